#pragma once

// Test-time metrics: importance-sampled marginal log-likelihood,
// bits-per-dim, the reconstruction / entropy / cross-entropy split of the
// ELBO, the active-units statistic, and log-likelihood histograms.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "vampvae/datasets.hpp"
#include "vampvae/models.hpp"
#include "vampvae/training.hpp"

namespace vampvae {

inline constexpr std::size_t kImportanceChunk = 500;

/// Streaming log(sum(exp(v))) with O(1) state.
class RunningLogSumExp {
 public:
  void add(double v) {
    if (v <= max_) {
      sum_ += std::exp(v - max_);
    } else {
      sum_ = sum_ * std::exp(max_ - v) + 1.0;
      max_ = v;
    }
    ++count_;
  }
  double value() const { return max_ + std::log(sum_); }
  std::size_t count() const { return count_; }

 private:
  double max_ = -std::numeric_limits<double>::infinity();
  double sum_ = 0.0;
  std::size_t count_ = 0;
};

/// log(1/S sum_s exp(w_s)) for importance weights produced `chunk` at a time
/// by draw(count, rng). Memory stays O(chunk).
inline double is_log_likelihood(const std::function<std::vector<double>(std::size_t, Rng&)>& draw, std::size_t samples,
                                Rng& rng, std::size_t chunk = kImportanceChunk) {
  if (samples == 0) throw ContractError("is_log_likelihood: S must be >= 1");
  if (chunk == 0) throw ContractError("is_log_likelihood: chunk must be >= 1");
  RunningLogSumExp lse;
  for (std::size_t done = 0; done < samples;) {
    const std::size_t c = std::min(chunk, samples - done);
    for (double w : draw(c, rng)) lse.add(w);
    done += c;
  }
  return lse.value() - std::log(static_cast<double>(samples));
}

/// log p(x,z) - log q(z|x) for `count` posterior samples of a single row x.
inline std::vector<double> log_importance_weights(const Model& m, std::span<const double> x, std::size_t count, Rng& rng) {
  if (x.size() != m.spec.data_dim) throw DimensionError("importance weights: row width does not match model data dimension");
  NoGradGuard no_grad;
  Matrix rep(count, x.size());
  for (std::size_t i = 0; i < count; ++i) std::copy(x.begin(), x.end(), rep.row(i).begin());
  Tensor w = elbo_terms(m, Tensor::from_matrix(rep), rng).elbo();
  return {w.data().begin(), w.data().end()};
}

inline double is_log_likelihood(const Model& m, std::span<const double> x, std::size_t samples, Rng& rng,
                                std::size_t chunk = kImportanceChunk) {
  return is_log_likelihood([&](std::size_t c, Rng& r) { return log_importance_weights(m, x, c, r); }, samples, rng, chunk);
}

/// -mean_ll / (D ln 2).
inline double bits_per_dim(double mean_ll_nats, std::size_t dim) {
  if (dim == 0) throw ContractError("bits_per_dim: D must be >= 1");
  return -mean_ll_nats / (static_cast<double>(dim) * std::log(2.0));
}

struct ElboDecomposition {
  double recon = 0.0;                       // E[log p(x|z)]
  double posterior_entropy = 0.0;           // E_x H[q(z|x)], closed form
  double posterior_entropy_sampled = 0.0;   // E[-log q(z|x)] on the drawn z
  double cross_entropy_term = 0.0;          // E[-log p(z)]
  double elbo_sum = 0.0;                    // recon + posterior_entropy - cross_entropy_term
  double elbo_sum_sampled = 0.0;            // recon + posterior_entropy_sampled - cross_entropy_term
};

/// Splits the ELBO into reconstruction, posterior entropy and cross-entropy
/// to the prior. For two levels z = (z1, z2), the prior term is
/// log p(z2) + log p(z1|z2) and the entropy is that of q(z2|x) q(z1|x,z2).
/// Draw order matches elbo_terms, so a generator with the same seed yields
/// the same samples there.
inline ElboDecomposition elbo_decomposition(const Model& m, const Matrix& data, std::size_t samples_per_x, Rng& rng) {
  if (data.empty()) throw ContractError("elbo_decomposition: empty data");
  if (samples_per_x == 0) throw ContractError("elbo_decomposition: samples_per_x must be >= 1");
  NoGradGuard no_grad;
  const Tensor x = Tensor::from_matrix(data);
  ElboDecomposition d;
  auto total = [](const Tensor& t) {
    auto v = t.data();
    return std::accumulate(v.begin(), v.end(), 0.0);
  };
  for (std::size_t s = 0; s < samples_per_x; ++s) {
    DiagGaussian q_top = m.encoder(x);
    Tensor top = sample_reparam(q_top, rng);
    d.posterior_entropy += total(entropy_diag(q_top));
    d.posterior_entropy_sampled -= total(log_normal_diag(top, q_top));
    d.cross_entropy_term -= total(m.log_prior_top(top));
    if (m.spec.levels == 1) {
      d.recon += total(log_likelihood(x, m.decoder(top)));
    } else {
      DiagGaussian q1 = m.encoder_z1(x, top);
      Tensor z1 = sample_reparam(q1, rng);
      d.posterior_entropy += total(entropy_diag(q1));
      d.posterior_entropy_sampled -= total(log_normal_diag(z1, q1));
      d.cross_entropy_term -= total(log_normal_diag(z1, m.conditional_z1(top)));
      d.recon += total(log_likelihood(x, m.decoder(z1, top)));
    }
  }
  const double n = static_cast<double>(data.rows * samples_per_x);
  d.recon /= n;
  d.posterior_entropy /= n;
  d.posterior_entropy_sampled /= n;
  d.cross_entropy_term /= n;
  d.elbo_sum = d.recon + d.posterior_entropy - d.cross_entropy_term;
  d.elbo_sum_sampled = d.recon + d.posterior_entropy_sampled - d.cross_entropy_term;
  return d;
}

struct ActiveUnits {
  std::vector<std::size_t> counts;           // per level: [z] or [z1, z2]
  std::vector<std::vector<double>> scores;   // per level, per latent dimension
};

/// Var_x(E_q[z_d]) per latent dimension, using posterior means (for z1 the
/// posterior is conditioned on the mean of q(z2|x)). A unit is active when
/// its score exceeds `threshold`.
inline ActiveUnits active_units(const Model& m, const Matrix& data, double threshold = 0.01) {
  if (data.rows < 2) throw ContractError("active_units: needs at least 2 data points");
  NoGradGuard no_grad;
  const Tensor x = Tensor::from_matrix(data);
  std::vector<Matrix> means;
  DiagGaussian q_top = m.encoder(x);
  if (m.spec.levels == 1) {
    means.push_back(q_top.mean.to_matrix());
  } else {
    means.push_back(m.encoder_z1(x, q_top.mean).mean.to_matrix());
    means.push_back(q_top.mean.to_matrix());
  }
  ActiveUnits out;
  for (const Matrix& mu : means) {
    std::vector<double> score(mu.cols, 0.0);
    for (std::size_t j = 0; j < mu.cols; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < mu.rows; ++i) mean += mu(i, j);
      mean /= static_cast<double>(mu.rows);
      double var = 0.0;
      for (std::size_t i = 0; i < mu.rows; ++i) var += (mu(i, j) - mean) * (mu(i, j) - mean);
      score[j] = var / static_cast<double>(mu.rows);
    }
    out.counts.push_back(static_cast<std::size_t>(std::count_if(score.begin(), score.end(), [&](double s) { return s > threshold; })));
    out.scores.push_back(std::move(score));
  }
  return out;
}

struct Histogram {
  std::vector<double> edges;  // bins + 1 edges
  std::vector<std::size_t> counts;

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "bin_left,bin_right,count\n";
    for (std::size_t i = 0; i < counts.size(); ++i) out << edges[i] << "," << edges[i + 1] << "," << counts[i] << "\n";
    return out.str();
  }
};

/// Equal-width bins over [min, max]; the maximum falls in the last bin.
inline Histogram ll_histogram(std::span<const double> values, std::size_t bins) {
  if (values.empty()) throw ContractError("ll_histogram: no values");
  if (bins == 0) throw ContractError("ll_histogram: bins must be >= 1");
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  const double width = (hi - lo) / static_cast<double>(bins);
  Histogram h;
  h.counts.assign(bins, 0);
  for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(i == bins ? hi : lo + width * static_cast<double>(i));
  for (double v : values) {
    std::size_t b = width > 0.0 ? static_cast<std::size_t>((v - lo) / width) : 0;
    ++h.counts[std::min(b, bins - 1)];
  }
  return h;
}

/// Worker count: VAMPVAE_THREADS when set, otherwise the hardware count.
inline std::size_t worker_count() {
  if (const char* env = std::getenv("VAMPVAE_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs body(i) for i in [0, n) on up to `workers` threads.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& body) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

struct EvalReport {
  double mean_test_ll = 0.0;
  std::vector<double> per_example_ll;
  std::optional<double> bits_per_dim;
  ActiveUnits active;
  Histogram histogram;
  std::size_t is_samples = 0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mean_test_ll"] = mean_test_ll;
    j["per_example_ll"] = per_example_ll;
    j["bits_per_dim"] = bits_per_dim ? nlohmann::json(*bits_per_dim) : nlohmann::json(nullptr);
    j["active_units"] = {{"counts", active.counts}, {"scores", active.scores}};
    j["histogram"] = {{"edges", histogram.edges}, {"counts", histogram.counts}};
    j["is_samples"] = is_samples;
    j["seed"] = seed;
    if (is_samples == 1) j["note"] = "S=1: single-sample ELBO, a lower bound on log-likelihood";
    return j;
  }
};

struct EvalOptions {
  std::size_t is_samples = 5000;
  std::uint64_t seed = 0;
  std::size_t histogram_bins = 50;
  double active_threshold = 0.01;
  std::size_t workers = 1;
};

/// Importance-sampled test log-likelihood per example plus diagnostics.
/// Example i draws from Rng(seed).derive(i), so results do not depend on the
/// worker count. Dynamic data are binarized once with Rng(seed).
inline EvalReport evaluate(const Model& m, const Matrix& test, Binarization binarization, const EvalOptions& opt) {
  if (test.empty()) throw ContractError("evaluate: empty test set");
  Rng base(opt.seed);
  const Matrix x = binarization == Binarization::Dynamic ? dynamic_binarize(test, base) : test;
  EvalReport r;
  r.is_samples = opt.is_samples;
  r.seed = opt.seed;
  r.per_example_ll.assign(x.rows, 0.0);
  parallel_for(x.rows, opt.workers, [&](std::size_t i) {
    Rng rng = Rng(opt.seed).derive(i);
    r.per_example_ll[i] = is_log_likelihood(m, x.row(i), opt.is_samples, rng);
  });
  r.mean_test_ll = std::accumulate(r.per_example_ll.begin(), r.per_example_ll.end(), 0.0) /
                   static_cast<double>(r.per_example_ll.size());
  if (m.spec.likelihood == Likelihood::DiscretizedLogistic) r.bits_per_dim = bits_per_dim(r.mean_test_ll, m.spec.data_dim);
  if (x.rows >= 2) r.active = active_units(m, x, opt.active_threshold);
  r.histogram = ll_histogram(r.per_example_ll, opt.histogram_bins);
  return r;
}

}  // namespace vampvae
