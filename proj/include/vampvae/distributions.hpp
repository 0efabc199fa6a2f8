#pragma once

// Log-densities and samplers: diagonal Gaussian, Bernoulli over pixels,
// discretized logistic over 8-bit intensities, and the reparameterized
// Gaussian sample.

#include <cmath>
#include <string>
#include <variant>

#include "vampvae/errors.hpp"
#include "vampvae/rng.hpp"
#include "vampvae/tensor.hpp"

namespace vampvae {

inline constexpr double kLog2Pi = detail::kLog2Pi;
inline constexpr double kLogVarMin = -14.0;
inline constexpr double kLogVarMax = 14.0;

/// N(mean, diag(exp(log_var))) over the last axis; rows are independent
/// distributions when the tensors are [n x M].
struct DiagGaussian {
  Tensor mean;
  Tensor log_var;

  DiagGaussian(Tensor m, Tensor lv) : mean(std::move(m)), log_var(clamp(lv, kLogVarMin, kLogVarMax)) {
    if (mean.shape() != log_var.shape()) {
      throw DimensionError("DiagGaussian: mean " + shape_string(mean.shape()) + " vs log_var " +
                           shape_string(log_var.shape()));
    }
  }

  std::size_t dim() const { return mean.cols(); }
};

inline Tensor log_normal_diag(const Tensor& z, const DiagGaussian& p) {
  if (z.shape() != p.mean.shape()) {
    throw DimensionError("log_normal_diag: z " + shape_string(z.shape()) + " vs mean " +
                         shape_string(p.mean.shape()));
  }
  return log_normal_diag(z, p.mean, p.log_var);
}

/// mean + exp(log_var / 2) * eps.
inline Tensor sample_reparam(const DiagGaussian& p, const Tensor& eps) {
  if (eps.shape() != p.mean.shape()) {
    throw DimensionError("sample_reparam: eps " + shape_string(eps.shape()) + " vs mean " +
                         shape_string(p.mean.shape()));
  }
  return p.mean + exp(scale(p.log_var, 0.5)) * eps;
}

inline Tensor sample_reparam(const DiagGaussian& p, Rng& rng) {
  return sample_reparam(p, Tensor::constant(p.mean.shape(), rng.normals(p.mean.numel())));
}

/// Closed-form KL(p || q) summed over the last axis.
inline Tensor kl_diag(const DiagGaussian& p, const DiagGaussian& q) {
  Tensor diff = p.mean - q.mean;
  Tensor ratio = (exp(p.log_var) + square(diff)) * exp(neg(q.log_var));
  return sum_rows(scale((q.log_var - p.log_var) + ratio - 1.0, 0.5));
}

/// Differential entropy summed over the last axis: 1/2 sum(1 + ln 2pi + log_var).
inline Tensor entropy_diag(const DiagGaussian& p) {
  return sum_rows(scale(p.log_var + (1.0 + kLog2Pi), 0.5));
}

/// sum_d [x_d log sigma(l_d) + (1 - x_d) log(1 - sigma(l_d))], evaluated as
/// x * l - softplus(l). Soft targets in [0, 1] are accepted.
inline Tensor log_bernoulli(const Tensor& x, const Tensor& logits) {
  if (x.shape() != logits.shape()) {
    throw DimensionError("log_bernoulli: x " + shape_string(x.shape()) + " vs logits " +
                         shape_string(logits.shape()));
  }
  for (double v : x.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("log_bernoulli: target outside [0, 1]");
  }
  return sum_rows(x * logits - softplus(logits));
}

inline constexpr double kLogisticBinWidth = 1.0 / 256.0;
inline constexpr double kLogisticFloor = 1e-7;

inline bool on_intensity_grid(double v) {
  const double scaled = v * 255.0;
  return v >= -1e-9 && v <= 1.0 + 1e-9 && std::abs(scaled - std::round(scaled)) <= 255.0 * 1e-9;
}

/// sum_d log[sigma((x + 1/256 - mean) / s) - sigma((x - mean) / s)] with
/// s = exp(log_scale) and the bin probability floored at 1e-7. x must lie on
/// the {0, 1/255, ..., 1} grid.
inline Tensor log_discretized_logistic(const Tensor& x, const Tensor& mean, const Tensor& log_scale) {
  if (x.shape() != mean.shape() || x.shape() != log_scale.shape()) {
    throw DimensionError("log_discretized_logistic: x, mean and log_scale must share a shape");
  }
  for (double v : x.data()) {
    if (!on_intensity_grid(v)) throw DomainError("log_discretized_logistic: x is off the 1/255 grid");
  }
  Tensor inv_scale = exp(neg(log_scale));
  Tensor centered = x - mean;
  Tensor upper = sigmoid((centered + kLogisticBinWidth) * inv_scale);
  Tensor lower = sigmoid(centered * inv_scale);
  return sum_rows(log(clamp(upper - lower, kLogisticFloor, 1.0)));
}

struct BernoulliParams {
  Tensor logits;
};

struct LogisticParams {
  Tensor mean;
  Tensor log_scale;
};

using LikelihoodParams = std::variant<BernoulliParams, LogisticParams>;

inline Tensor log_likelihood(const Tensor& x, const LikelihoodParams& params) {
  return std::visit(
      [&](const auto& p) -> Tensor {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, BernoulliParams>) {
          return log_bernoulli(x, p.logits);
        } else {
          return log_discretized_logistic(x, p.mean, p.log_scale);
        }
      },
      params);
}

/// Expected pixel value: sigma(logits) or the logistic location.
inline Tensor likelihood_mean(const LikelihoodParams& params) {
  return std::visit(
      [](const auto& p) -> Tensor {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, BernoulliParams>) {
          return sigmoid(p.logits);
        } else {
          return p.mean;
        }
      },
      params);
}

}  // namespace vampvae
