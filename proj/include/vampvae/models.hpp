#pragma once

// One-level VAE and the two-level hierarchical VAE
//
//   q(z1 | x, z2) q(z2 | x)                   (variational part)
//   p(x | z1, z2) p(z1 | z2) p(z2)            (generative part)
//
// with p(z2) (or p(z) for one level) given by any PriorSpec. Every network is
// a stack of gated dense layers.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "vampvae/distributions.hpp"
#include "vampvae/errors.hpp"
#include "vampvae/nn.hpp"
#include "vampvae/priors.hpp"
#include "vampvae/rng.hpp"
#include "vampvae/tensor.hpp"

namespace vampvae {

enum class Likelihood { Bernoulli, DiscretizedLogistic };

inline std::string likelihood_name(Likelihood l) {
  return l == Likelihood::Bernoulli ? "bernoulli" : "logistic";
}

inline std::optional<Likelihood> parse_likelihood(const std::string& name) {
  if (name == "bernoulli") return Likelihood::Bernoulli;
  if (name == "logistic") return Likelihood::DiscretizedLogistic;
  return std::nullopt;
}

inline constexpr double kLogScaleMin = -7.0;
inline constexpr double kLogScaleMax = 2.0;

struct ModelSpec {
  int levels = 2;
  std::size_t data_dim = 0;
  std::size_t latent1 = 40;
  std::size_t latent2 = 40;
  std::size_t hidden = 300;
  std::size_t hidden_layers = 2;
  Likelihood likelihood = Likelihood::Bernoulli;
  PriorKind prior = PriorKind::Vamp;
  std::size_t components = 500;
  bool pseudo_unit_domain = true;
  std::size_t image_height = 0;
  std::size_t image_width = 0;

  /// Latent size of the layer the prior sits on.
  std::size_t top_latent() const { return levels == 1 ? latent1 : latent2; }

  void validate() const {
    if (levels != 1 && levels != 2) throw ContractError("levels must be 1 or 2");
    if (data_dim == 0 || latent1 == 0 || hidden == 0 || hidden_layers == 0 || (levels == 2 && latent2 == 0)) {
      throw ContractError("model dimensions must be >= 1");
    }
    if (prior != PriorKind::Standard && components == 0) throw ContractError("prior needs K >= 1");
    if (image_height * image_width != 0 && image_height * image_width != data_dim) {
      throw ContractError("image shape does not match data dimension");
    }
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// p(x | z) for one level or p(x | z1, z2) for two.
struct Decoder {
  Likelihood likelihood = Likelihood::Bernoulli;
  GatedStack single;  // one level
  TwoPathNet paired;  // two levels: (z1, z2)
  Linear location;    // Bernoulli logits or logistic mean (pre-sigmoid)
  Linear log_scale;   // logistic only

  Decoder() = default;
  Decoder(const ModelSpec& s, Rng& rng) : likelihood(s.likelihood) {
    if (s.levels == 1) {
      single = GatedStack(s.latent1, s.hidden, s.hidden_layers, rng);
    } else {
      paired = TwoPathNet(s.latent1, s.latent2, s.hidden, s.hidden_layers, rng);
    }
    location = Linear(s.hidden, s.data_dim, rng);
    if (likelihood == Likelihood::DiscretizedLogistic) log_scale = Linear(s.hidden, s.data_dim, rng);
  }

  LikelihoodParams head(const Tensor& h) const {
    if (likelihood == Likelihood::Bernoulli) return BernoulliParams{location(h)};
    return LogisticParams{sigmoid(location(h)), clamp(log_scale(h), kLogScaleMin, kLogScaleMax)};
  }

  LikelihoodParams operator()(const Tensor& z) const { return head(single(z)); }
  LikelihoodParams operator()(const Tensor& z1, const Tensor& z2) const { return head(paired(z1, z2)); }

  void collect(const std::string& prefix, ParameterList& out) const {
    if (!single.layers.empty()) single.collect(prefix + ".single", out);
    if (!paired.first.layers.empty()) paired.collect(prefix + ".paired", out);
    location.collect(prefix + ".location", out);
    if (likelihood == Likelihood::DiscretizedLogistic) log_scale.collect(prefix + ".log_scale", out);
  }
};

/// q(z1 | x, z2).
struct BottomEncoder {
  TwoPathNet net;
  GaussianHead head;

  BottomEncoder() = default;
  BottomEncoder(const ModelSpec& s, Rng& rng)
      : net(s.data_dim, s.latent2, s.hidden, s.hidden_layers, rng), head(s.hidden, s.latent1, rng) {}

  DiagGaussian operator()(const Tensor& x, const Tensor& z2) const { return head(net(x, z2)); }

  void collect(const std::string& prefix, ParameterList& out) const {
    net.collect(prefix + ".net", out);
    head.collect(prefix + ".head", out);
  }
};

struct Model {
  ModelSpec spec;
  GaussianMlp encoder;         // q(z | x), or q(z2 | x) for two levels
  BottomEncoder encoder_z1;    // q(z1 | x, z2), two levels only
  GaussianMlp conditional_z1;  // p(z1 | z2), two levels only
  Decoder decoder;
  PriorSpec prior;

  /// Architecture with Glorot-initialized networks and zero-valued prior
  /// tensors of the right shapes.
  static Model build(const ModelSpec& s, Rng& rng) {
    s.validate();
    Model m;
    m.spec = s;
    m.encoder = GaussianMlp(s.data_dim, s.hidden, s.hidden_layers, s.top_latent(), rng);
    if (s.levels == 2) {
      m.encoder_z1 = BottomEncoder(s, rng);
      m.conditional_z1 = GaussianMlp(s.latent2, s.hidden, s.hidden_layers, s.latent1, rng);
    }
    m.decoder = Decoder(s, rng);
    const std::size_t k = s.components, d = s.data_dim, lat = s.top_latent();
    switch (s.prior) {
      case PriorKind::Standard: m.prior = StandardPrior{lat}; break;
      case PriorKind::Mog: m.prior = MogPrior{Tensor::zeros({k, lat}, true), Tensor::zeros({k, lat}, true)}; break;
      case PriorKind::Vamp: m.prior = VampPrior{Tensor::zeros({k, d}, true), s.pseudo_unit_domain}; break;
      case PriorKind::VampData: m.prior = VampDataPrior{Tensor::zeros({k, d}, false)}; break;
      case PriorKind::WeightedVamp:
        m.prior = WeightedVampPrior{Tensor::zeros({k, d}, true), s.pseudo_unit_domain, Tensor::zeros({k}, true)};
        break;
    }
    return m;
  }

  /// Fully initialized model; `train` seeds the pseudo-inputs.
  static Model create(const ModelSpec& s, const Matrix& train, Rng& rng) {
    Model m = build(s, rng);
    m.prior = make_prior(s.prior, s.components, s.top_latent(), train, rng, s.pseudo_unit_domain);
    return m;
  }

  /// Every tensor (trainable or frozen) in declaration order.
  ParameterList parameters() const {
    ParameterList out;
    encoder.collect("encoder", out);
    if (spec.levels == 2) {
      encoder_z1.collect("encoder_z1", out);
      conditional_z1.collect("conditional_z1", out);
    }
    decoder.collect("decoder", out);
    collect_prior(prior, "prior", out);
    return out;
  }

  /// Deep copy with independent parameter storage.
  Model clone() const {
    Rng scratch(0);
    Model copy = build(spec, scratch);
    copy.copy_values_from(*this);
    return copy;
  }

  void copy_values_from(const Model& other) {
    auto dst = parameters();
    auto src = other.parameters();
    if (dst.size() != src.size()) throw DimensionError("copy_values_from: architectures differ");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i].tensor.shape() != src[i].tensor.shape()) throw DimensionError("copy_values_from: shape mismatch at " + dst[i].name);
      auto out = dst[i].tensor.mutable_data();
      auto in = src[i].tensor.data();
      std::copy(in.begin(), in.end(), out.begin());
    }
  }

  Tensor log_prior_top(const Tensor& z) const { return log_prior(z, prior, encoder); }
};

struct VaeRecord {
  Tensor log_px;  // log p(x | z)
  Tensor log_pz;  // log p(z)
  Tensor log_qz;  // log q(z | x)
  Tensor z;       // last sample
};

struct HvaeRecord {
  Tensor log_px;   // log p(x | z1, z2)
  Tensor log_pz2;  // log p(z2)
  Tensor log_pz1;  // log p(z1 | z2)
  Tensor log_qz2;  // log q(z2 | x)
  Tensor log_qz1;  // log q(z1 | x, z2)
  Tensor z1;
  Tensor z2;
};

namespace detail {

inline void check_batch(const Model& m, const Tensor& x) {
  if (x.rank() != 2 || x.shape()[1] != m.spec.data_dim) {
    throw DimensionError("expected a batch of shape [n x " + std::to_string(m.spec.data_dim) + "], got " +
                         shape_string(x.shape()));
  }
}

inline void accumulate(Tensor& acc, const Tensor& v) { acc = acc.defined() ? acc + v : v; }

inline Tensor average(const Tensor& acc, std::size_t samples) {
  return samples == 1 ? acc : scale(acc, 1.0 / static_cast<double>(samples));
}

}  // namespace detail

/// Per-row log terms of the one-level model averaged over L reparameterized
/// samples z ~ q(z|x).
inline VaeRecord vae_forward(const Model& m, const Tensor& x, Rng& rng, std::size_t mc_samples = 1) {
  if (m.spec.levels != 1) throw ContractError("vae_forward needs a one-level model");
  if (mc_samples == 0) throw ContractError("mc_samples must be >= 1");
  detail::check_batch(m, x);
  DiagGaussian q = m.encoder(x);
  // Prior components do not depend on z; evaluate once for all samples.
  std::optional<DiagGaussian> comps;
  if (uses_encoder(prior_kind(m.prior))) comps = prior_components(m.prior, m.encoder, m.spec.latent1);
  auto cached = [&](const Tensor&) { return *comps; };

  VaeRecord r;
  for (std::size_t l = 0; l < mc_samples; ++l) {
    Tensor z = sample_reparam(q, rng);
    detail::accumulate(r.log_px, log_likelihood(x, m.decoder(z)));
    detail::accumulate(r.log_pz, comps ? log_prior(z, m.prior, cached) : log_prior(z, m.prior));
    detail::accumulate(r.log_qz, log_normal_diag(z, q));
    r.z = z;
  }
  r.log_px = detail::average(r.log_px, mc_samples);
  r.log_pz = detail::average(r.log_pz, mc_samples);
  r.log_qz = detail::average(r.log_qz, mc_samples);
  return r;
}

/// Per-row log terms of the two-level model averaged over L samples
/// z2 ~ q(z2|x), z1 ~ q(z1|x,z2).
inline HvaeRecord hvae_forward(const Model& m, const Tensor& x, Rng& rng, std::size_t mc_samples = 1) {
  if (m.spec.levels != 2) throw ContractError("hvae_forward needs a two-level model");
  if (mc_samples == 0) throw ContractError("mc_samples must be >= 1");
  detail::check_batch(m, x);
  DiagGaussian q2 = m.encoder(x);
  std::optional<DiagGaussian> comps;
  if (uses_encoder(prior_kind(m.prior))) comps = prior_components(m.prior, m.encoder, m.spec.latent2);
  auto cached = [&](const Tensor&) { return *comps; };

  HvaeRecord r;
  for (std::size_t l = 0; l < mc_samples; ++l) {
    Tensor z2 = sample_reparam(q2, rng);
    DiagGaussian q1 = m.encoder_z1(x, z2);
    Tensor z1 = sample_reparam(q1, rng);
    DiagGaussian p1 = m.conditional_z1(z2);
    detail::accumulate(r.log_px, log_likelihood(x, m.decoder(z1, z2)));
    detail::accumulate(r.log_pz2, comps ? log_prior(z2, m.prior, cached) : log_prior(z2, m.prior));
    detail::accumulate(r.log_pz1, log_normal_diag(z1, p1));
    detail::accumulate(r.log_qz2, log_normal_diag(z2, q2));
    detail::accumulate(r.log_qz1, log_normal_diag(z1, q1));
    r.z1 = z1;
    r.z2 = z2;
  }
  r.log_px = detail::average(r.log_px, mc_samples);
  r.log_pz2 = detail::average(r.log_pz2, mc_samples);
  r.log_pz1 = detail::average(r.log_pz1, mc_samples);
  r.log_qz2 = detail::average(r.log_qz2, mc_samples);
  r.log_qz1 = detail::average(r.log_qz1, mc_samples);
  return r;
}

/// Per-row ELBO pieces common to both model depths.
struct ElboTerms {
  Tensor log_px;         // reconstruction term
  Tensor log_prior;      // log p(z), or log p(z2) + log p(z1|z2)
  Tensor log_posterior;  // log q(z|x), or log q(z2|x) + log q(z1|x,z2)

  /// log p(x|.) + log p(.) - log q(.), per row.
  Tensor elbo() const { return log_px + (log_prior - log_posterior); }
};

inline ElboTerms elbo_terms(const Model& m, const Tensor& x, Rng& rng, std::size_t mc_samples = 1) {
  if (m.spec.levels == 1) {
    VaeRecord r = vae_forward(m, x, rng, mc_samples);
    return {r.log_px, r.log_pz, r.log_qz};
  }
  HvaeRecord r = hvae_forward(m, x, rng, mc_samples);
  return {r.log_px, r.log_pz2 + r.log_pz1, r.log_qz2 + r.log_qz1};
}

struct Generation {
  Matrix images;  // [n x D] likelihood means
  Matrix z1;      // [n x M1]
  Matrix z2;      // [n x M2], empty for one level
  std::vector<std::size_t> component;
};

/// Ancestral sampling: z2 ~ p(z2) (or z2 ~ q(z2|u_k) when a Vamp component is
/// chosen), z1 ~ p(z1|z2), decoded to the likelihood mean.
inline Generation generate(const Model& m, std::size_t n, Rng& rng, std::optional<std::size_t> component = std::nullopt) {
  NoGradGuard no_grad;
  Generation g;
  if (n == 0) {
    g.images = Matrix(0, m.spec.data_dim);
    return g;
  }
  Matrix top;
  if (component) {
    const std::size_t k = component_count(m.prior);
    if (!uses_encoder(prior_kind(m.prior)) && prior_kind(m.prior) != PriorKind::Mog) {
      throw ContractError("component selection needs a mixture prior");
    }
    if (*component >= k) {
      throw std::out_of_range("component " + std::to_string(*component) + " out of range for K=" + std::to_string(k));
    }
    DiagGaussian comps = prior_components(m.prior, m.encoder, m.spec.top_latent());
    const std::size_t lat = comps.mean.shape()[1];
    top = Matrix(n, lat);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < lat; ++j)
        top(i, j) = comps.mean.at(*component, j) + std::exp(0.5 * comps.log_var.at(*component, j)) * rng.normal();
    g.component.assign(n, *component);
  } else {
    PriorSample s = sample_prior(m.prior, n, rng, m.encoder);
    top = std::move(s.z);
    g.component = std::move(s.component);
  }
  Tensor top_t = Tensor::from_matrix(top);
  if (m.spec.levels == 1) {
    g.images = likelihood_mean(m.decoder(top_t)).to_matrix();
    g.z1 = std::move(top);
    return g;
  }
  Tensor z1 = sample_reparam(m.conditional_z1(top_t), rng);
  g.images = likelihood_mean(m.decoder(z1, top_t)).to_matrix();
  g.z1 = z1.to_matrix();
  g.z2 = std::move(top);
  return g;
}

/// Encodes each row with one posterior sample and decodes to the likelihood mean.
inline Matrix reconstruct(const Model& m, const Matrix& x, Rng& rng) {
  NoGradGuard no_grad;
  if (x.cols != m.spec.data_dim) throw DimensionError("reconstruct: row width does not match model data dimension");
  if (x.empty()) return Matrix(0, m.spec.data_dim);
  Tensor xt = Tensor::from_matrix(x);
  Tensor top = sample_reparam(m.encoder(xt), rng);
  if (m.spec.levels == 1) return likelihood_mean(m.decoder(top)).to_matrix();
  Tensor z1 = sample_reparam(m.encoder_z1(xt, top), rng);
  return likelihood_mean(m.decoder(z1, top)).to_matrix();
}

}  // namespace vampvae
