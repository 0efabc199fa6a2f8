#pragma once

// Priors over the top latent layer: standard Gaussian, a trainable mixture
// of Gaussians, and the variational mixture of posteriors in its learnable,
// data-subset and weighted forms. The mixture-of-posteriors variants evaluate
// the encoder on K pseudo-inputs every call, so gradients flow into both the
// pseudo-inputs and the encoder weights.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "vampvae/distributions.hpp"
#include "vampvae/nn.hpp"
#include "vampvae/rng.hpp"
#include "vampvae/tensor.hpp"

namespace vampvae {

struct StandardPrior {
  std::size_t dim = 0;
};

struct MogPrior {
  Tensor means;     // [K x M]
  Tensor log_vars;  // [K x M]
};

/// Pseudo-inputs are stored unconstrained and mapped through the logistic
/// function when the data live in [0, 1].
struct VampPrior {
  Tensor pseudo_inputs;  // [K x D]
  bool unit_domain = true;
};

/// Frozen pseudo-inputs taken verbatim from training rows.
struct VampDataPrior {
  Tensor pseudo_inputs;  // [K x D], constant
};

struct WeightedVampPrior {
  Tensor pseudo_inputs;  // [K x D]
  bool unit_domain = true;
  Tensor weight_logits;  // [K]; weights are softmax(weight_logits)
};

using PriorSpec = std::variant<StandardPrior, MogPrior, VampPrior, VampDataPrior, WeightedVampPrior>;

enum class PriorKind { Standard, Mog, Vamp, VampData, WeightedVamp };

inline PriorKind prior_kind(const PriorSpec& spec) { return static_cast<PriorKind>(spec.index()); }

inline std::string prior_name(PriorKind kind) {
  switch (kind) {
    case PriorKind::Standard: return "sg";
    case PriorKind::Mog: return "mog";
    case PriorKind::Vamp: return "vamp";
    case PriorKind::VampData: return "vamp-data";
    case PriorKind::WeightedVamp: return "weighted-vamp";
  }
  return "sg";
}

inline std::optional<PriorKind> parse_prior_kind(const std::string& name) {
  for (auto kind : {PriorKind::Standard, PriorKind::Mog, PriorKind::Vamp, PriorKind::VampData, PriorKind::WeightedVamp}) {
    if (prior_name(kind) == name) return kind;
  }
  return std::nullopt;
}

inline bool uses_encoder(PriorKind kind) {
  return kind == PriorKind::Vamp || kind == PriorKind::VampData || kind == PriorKind::WeightedVamp;
}

/// Number of mixture components (1 for the standard Gaussian).
inline std::size_t component_count(const PriorSpec& spec) {
  return std::visit(
      [](const auto& p) -> std::size_t {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, StandardPrior>) {
          return 1;
        } else if constexpr (std::is_same_v<P, MogPrior>) {
          return p.means.shape()[0];
        } else {
          return p.pseudo_inputs.shape()[0];
        }
      },
      spec);
}

/// Pseudo-inputs in data space, or an undefined tensor for non-Vamp priors.
inline Tensor pseudo_input_values(const PriorSpec& spec) {
  return std::visit(
      [](const auto& p) -> Tensor {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, VampPrior> || std::is_same_v<P, WeightedVampPrior>) {
          return p.unit_domain ? sigmoid(p.pseudo_inputs) : p.pseudo_inputs;
        } else if constexpr (std::is_same_v<P, VampDataPrior>) {
          return p.pseudo_inputs;
        } else {
          return Tensor();
        }
      },
      spec);
}

/// Every tensor the prior owns, trainable or frozen, in a stable order.
inline void collect_prior(const PriorSpec& spec, const std::string& prefix, ParameterList& out) {
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, MogPrior>) {
          out.push_back({prefix + ".means", p.means});
          out.push_back({prefix + ".log_vars", p.log_vars});
        } else if constexpr (std::is_same_v<P, VampPrior> || std::is_same_v<P, VampDataPrior>) {
          out.push_back({prefix + ".pseudo_inputs", p.pseudo_inputs});
        } else if constexpr (std::is_same_v<P, WeightedVampPrior>) {
          out.push_back({prefix + ".pseudo_inputs", p.pseudo_inputs});
          out.push_back({prefix + ".weight_logits", p.weight_logits});
        }
      },
      spec);
}

template <class E>
concept GaussianEncoder = requires(const E& e, const Tensor& x) {
  { e(x) } -> std::convertible_to<DiagGaussian>;
};

/// Stand-in encoder for priors that never consult one.
struct NoEncoder {
  DiagGaussian operator()(const Tensor&) const {
    throw ContractError("this prior requires an encoder for its pseudo-inputs");
  }
};

/// Mixture components as one [K x M] DiagGaussian. The standard prior yields
/// a single N(0, I) row.
template <GaussianEncoder Encoder>
DiagGaussian prior_components(const PriorSpec& spec, const Encoder& encoder, std::size_t latent_dim) {
  return std::visit(
      [&](const auto& p) -> DiagGaussian {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, StandardPrior>) {
          return DiagGaussian(Tensor::zeros({1, p.dim}), Tensor::zeros({1, p.dim}));
        } else if constexpr (std::is_same_v<P, MogPrior>) {
          return DiagGaussian(p.means, p.log_vars);
        } else {
          (void)latent_dim;
          return encoder(pseudo_input_values(spec));
        }
      },
      spec);
}

/// log p(z) per row of z [n x M].
template <GaussianEncoder Encoder>
Tensor log_prior(const Tensor& z, const PriorSpec& spec, const Encoder& encoder) {
  if (z.rank() != 2) throw DimensionError("log_prior: z must be [n x M], got " + shape_string(z.shape()));
  const std::size_t m = z.shape()[1];
  if (const auto* sg = std::get_if<StandardPrior>(&spec)) {
    if (sg->dim != m) throw DimensionError("log_prior: latent dim " + std::to_string(m) + " vs prior dim " + std::to_string(sg->dim));
    return log_normal_diag(z, Tensor::zeros({m}), Tensor::zeros({m}));
  }
  DiagGaussian comps = prior_components(spec, encoder, m);
  if (comps.mean.shape()[1] != m) {
    throw DimensionError("log_prior: latent dim " + std::to_string(m) + " vs component dim " +
                         std::to_string(comps.mean.shape()[1]));
  }
  const std::size_t k = comps.mean.shape()[0];
  Tensor log_weights;
  if (const auto* w = std::get_if<WeightedVampPrior>(&spec)) {
    // Shifting by the (constant) maximum first makes equal logits give
    // exactly -log K, the uniform mixture's weights.
    auto logits = w->weight_logits.data();
    Tensor shifted = w->weight_logits - *std::max_element(logits.begin(), logits.end());
    log_weights = shifted - log_sum_exp(shifted);
  } else {
    log_weights = Tensor::full({k}, -std::log(static_cast<double>(k)));
  }
  return log_sum_exp(log_normal_pairwise(z, comps.mean, comps.log_var) + log_weights);
}

inline Tensor log_prior(const Tensor& z, const PriorSpec& spec) { return log_prior(z, spec, NoEncoder{}); }

/// Mixture weights as plain values (uniform except for the weighted prior).
inline std::vector<double> component_weights(const PriorSpec& spec) {
  const std::size_t k = component_count(spec);
  if (const auto* w = std::get_if<WeightedVampPrior>(&spec)) {
    auto logits = w->weight_logits.data();
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> out(k);
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) total += out[i] = std::exp(logits[i] - mx);
    for (double& v : out) v /= total;
    return out;
  }
  return std::vector<double>(k, 1.0 / static_cast<double>(k));
}

struct PriorSample {
  Matrix z;                           // [n x M]
  std::vector<std::size_t> component;  // mixture index per row
};

/// Ancestral draws: pick a component (uniformly, or by weight), then sample
/// its Gaussian.
template <GaussianEncoder Encoder>
PriorSample sample_prior(const PriorSpec& spec, std::size_t n, Rng& rng, const Encoder& encoder) {
  if (n == 0) throw ContractError("sample_prior: n must be >= 1");
  NoGradGuard no_grad;
  if (const auto* sg = std::get_if<StandardPrior>(&spec)) {
    return {Matrix(n, sg->dim, rng.normals(n * sg->dim)), std::vector<std::size_t>(n, 0)};
  }
  DiagGaussian comps = prior_components(spec, encoder, 0);
  const std::size_t m = comps.mean.shape()[1];
  std::vector<double> weights = component_weights(spec);
  std::vector<double> cumulative(weights.size());
  std::partial_sum(weights.begin(), weights.end(), cumulative.begin());

  PriorSample out{Matrix(n, m), std::vector<std::size_t>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform() * cumulative.back();
    const std::size_t k = std::min<std::size_t>(
        static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin()),
        weights.size() - 1);
    out.component[i] = k;
    for (std::size_t j = 0; j < m; ++j) {
      out.z(i, j) = comps.mean.at(k, j) + std::exp(0.5 * comps.log_var.at(k, j)) * rng.normal();
    }
  }
  return out;
}

inline PriorSample sample_prior(const PriorSpec& spec, std::size_t n, Rng& rng) {
  return sample_prior(spec, n, rng, NoEncoder{});
}

/// -log p(z) for z ~ q(z|x), one value per (repetition, row): entry
/// s * N + i belongs to repetition s of data row i. Draws depend only on the
/// encoder and rng, so two priors evaluated with equal seeds share samples.
template <GaussianEncoder Posterior, GaussianEncoder PriorEncoder>
std::vector<double> cross_entropy_samples(const Matrix& data, const Posterior& posterior, const PriorSpec& spec,
                                          const PriorEncoder& prior_encoder, std::size_t samples_per_x, Rng& rng) {
  if (data.empty()) throw ContractError("cross_entropy_to_prior: empty batch");
  if (samples_per_x == 0) throw ContractError("cross_entropy_to_prior: samples_per_x must be >= 1");
  NoGradGuard no_grad;
  DiagGaussian q = posterior(Tensor::from_matrix(data));
  std::vector<double> out;
  out.reserve(data.rows * samples_per_x);
  for (std::size_t s = 0; s < samples_per_x; ++s) {
    Tensor z = sample_reparam(q, rng);
    Tensor lp = log_prior(z, spec, prior_encoder);
    for (double v : lp.data()) out.push_back(-v);
  }
  return out;
}

/// Monte Carlo estimate of E_{q(z)}[-log p(z)] where q(z) is the aggregated
/// posterior over `data`.
template <GaussianEncoder Encoder>
double cross_entropy_to_prior(const Matrix& data, const Encoder& encoder, const PriorSpec& spec,
                              std::size_t samples_per_x, Rng& rng) {
  auto values = cross_entropy_samples(data, encoder, spec, encoder, samples_per_x, rng);
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

// ---- initialization ----------------------------------------------------

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

/// Learnable pseudo-inputs drawn per coordinate from N(data_mean_d, 0.01^2).
inline Tensor init_pseudo_inputs(std::size_t k, std::span<const double> data_mean, bool unit_domain, Rng& rng) {
  const std::size_t d = data_mean.size();
  std::vector<double> values(k * d);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double v = data_mean[j] + 0.01 * rng.normal();
      values[i * d + j] = unit_domain ? logit(std::clamp(v, 1e-4, 1.0 - 1e-4)) : v;
    }
  }
  return Tensor::parameter({k, d}, std::move(values));
}

/// K training rows chosen uniformly without replacement.
inline Tensor init_data_pseudo_inputs(std::size_t k, const Matrix& train, Rng& rng) {
  if (k > train.rows) throw ContractError("vamp-data prior needs K <= number of training rows");
  std::vector<std::size_t> idx(train.rows);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.index(train.rows - i)]);
  idx.resize(k);
  Matrix rows = train.gather_rows(idx);
  return Tensor::constant({k, train.cols}, std::move(rows.data));
}

/// Builds a freshly initialized prior. `train` supplies the data mean and the
/// VampData subset; it may be empty for the standard and MoG priors.
inline PriorSpec make_prior(PriorKind kind, std::size_t k, std::size_t latent_dim, const Matrix& train, Rng& rng,
                            bool unit_domain = true) {
  if (kind != PriorKind::Standard && k == 0) throw ContractError("prior needs K >= 1 components");
  auto data_mean = [&] {
    if (train.empty()) throw ContractError("this prior needs training data for initialization");
    std::vector<double> mean(train.cols, 0.0);
    for (std::size_t i = 0; i < train.rows; ++i)
      for (std::size_t j = 0; j < train.cols; ++j) mean[j] += train(i, j);
    for (double& v : mean) v /= static_cast<double>(train.rows);
    return mean;
  };
  switch (kind) {
    case PriorKind::Standard:
      return StandardPrior{latent_dim};
    case PriorKind::Mog: {
      std::vector<double> means(k * latent_dim);
      for (double& v : means) v = 0.5 * rng.normal();
      return MogPrior{Tensor::parameter({k, latent_dim}, std::move(means)), Tensor::zeros({k, latent_dim}, true)};
    }
    case PriorKind::Vamp:
      return VampPrior{init_pseudo_inputs(k, data_mean(), unit_domain, rng), unit_domain};
    case PriorKind::VampData:
      return VampDataPrior{init_data_pseudo_inputs(k, train, rng)};
    case PriorKind::WeightedVamp:
      return WeightedVampPrior{init_pseudo_inputs(k, data_mean(), unit_domain, rng), unit_domain,
                               Tensor::zeros({k}, true)};
  }
  return StandardPrior{latent_dim};
}

}  // namespace vampvae
