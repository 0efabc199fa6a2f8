#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vampvae/distributions.hpp"
#include "vampvae/rng.hpp"
#include "vampvae/tensor.hpp"

namespace vampvae {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

/// Trainable tensors in declaration order. Checkpoints and the optimizer
/// both rely on this order being stable.
using ParameterList = std::vector<NamedParameter>;

/// x W + b with W stored [in x out]. Glorot-uniform weights, zero bias.
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<double> w(in * out);
    for (double& v : w) v = (2.0 * rng.uniform() - 1.0) * bound;
    weight = Tensor::parameter({in, out}, std::move(w));
    bias = Tensor::zeros({out}, true);
  }

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }

  Tensor operator()(const Tensor& x) const { return matmul(x, weight) + bias; }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

/// (x W1 + b1) * sigmoid(x W2 + b2).
struct GatedDense {
  Linear value;
  Linear gate;

  GatedDense() = default;
  GatedDense(std::size_t in, std::size_t out, Rng& rng) : value(in, out, rng), gate(in, out, rng) {}

  Tensor operator()(const Tensor& x) const { return value(x) * sigmoid(gate(x)); }

  void collect(const std::string& prefix, ParameterList& out) const {
    value.collect(prefix + ".value", out);
    gate.collect(prefix + ".gate", out);
  }
};

struct GatedStack {
  std::vector<GatedDense> layers;

  GatedStack() = default;
  GatedStack(std::size_t in, std::size_t width, std::size_t depth, Rng& rng) {
    for (std::size_t i = 0; i < depth; ++i) layers.emplace_back(i == 0 ? in : width, width, rng);
  }

  Tensor operator()(Tensor x) const {
    for (const auto& layer : layers) x = layer(x);
    return x;
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + "." + std::to_string(i), out);
  }
};

/// Affine heads emitting a diagonal Gaussian from a hidden representation.
struct GaussianHead {
  Linear mean;
  Linear log_var;

  GaussianHead() = default;
  GaussianHead(std::size_t in, std::size_t latent, Rng& rng) : mean(in, latent, rng), log_var(in, latent, rng) {}

  DiagGaussian operator()(const Tensor& h) const { return DiagGaussian(mean(h), log_var(h)); }

  void collect(const std::string& prefix, ParameterList& out) const {
    mean.collect(prefix + ".mean", out);
    log_var.collect(prefix + ".log_var", out);
  }
};

/// Gated MLP mapping one input to a diagonal Gaussian: q(z|x), q(z2|x) and
/// p(z1|z2) all use this shape.
struct GaussianMlp {
  GatedStack trunk;
  GaussianHead head;

  GaussianMlp() = default;
  GaussianMlp(std::size_t in, std::size_t hidden, std::size_t depth, std::size_t latent, Rng& rng)
      : trunk(in, hidden, depth, rng), head(hidden, latent, rng) {}

  std::size_t input_dim() const { return trunk.layers.front().value.in_features(); }
  std::size_t latent_dim() const { return head.mean.out_features(); }

  DiagGaussian operator()(const Tensor& x) const { return head(trunk(x)); }

  void collect(const std::string& prefix, ParameterList& out) const {
    trunk.collect(prefix + ".trunk", out);
    head.collect(prefix + ".head", out);
  }
};

/// Two inputs, each through its own gated stack, concatenated and merged by
/// one joint gated layer.
struct TwoPathNet {
  GatedStack first;
  GatedStack second;
  GatedDense joint;

  TwoPathNet() = default;
  TwoPathNet(std::size_t in_first, std::size_t in_second, std::size_t hidden, std::size_t depth, Rng& rng)
      : first(in_first, hidden, depth, rng), second(in_second, hidden, depth, rng), joint(2 * hidden, hidden, rng) {}

  Tensor operator()(const Tensor& a, const Tensor& b) const { return joint(concat_cols({first(a), second(b)})); }

  void collect(const std::string& prefix, ParameterList& out) const {
    first.collect(prefix + ".first", out);
    second.collect(prefix + ".second", out);
    joint.collect(prefix + ".joint", out);
  }
};

}  // namespace vampvae
