#pragma once

// Optimization recipe: warm-up weighted negative ELBO, Adam on per-block
// L2-normalized gradients, mini-batches with dynamic binarization, and early
// stopping on validation ELBO.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vampvae/datasets.hpp"
#include "vampvae/models.hpp"
#include "vampvae/rng.hpp"
#include "vampvae/tensor.hpp"

namespace vampvae {

struct TrainConfig {
  double learning_rate = 5e-4;
  std::size_t batch_size = 100;
  std::size_t warmup_epochs = 100;
  std::size_t early_stop_patience = 50;
  std::size_t max_epochs = 2000;
  std::size_t mc_samples = 1;
  std::uint64_t seed = 0;
  /// Seed of the fixed validation binarization and noise.
  std::uint64_t val_seed = 7919;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ContractError("learning_rate must be > 0");
    if (batch_size == 0) throw ContractError("batch_size must be >= 1");
    if (early_stop_patience == 0) throw ContractError("early_stop_patience must be >= 1");
    if (max_epochs == 0) throw ContractError("max_epochs must be >= 1");
    if (mc_samples == 0) throw ContractError("mc_samples must be >= 1");
  }
};

/// KL weight for a given epoch: min(1, epoch / warmup_epochs); 1 when warm-up is disabled.
inline double warmup_beta(std::size_t epoch, std::size_t warmup_epochs) {
  if (warmup_epochs == 0) return 1.0;
  return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(warmup_epochs));
}

/// -mean_rows[log p(x|.) + beta * (log p(.) - log q(.))].
inline Tensor objective(const Model& m, const Tensor& batch, double beta, Rng& rng, std::size_t mc_samples = 1) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ContractError("objective: beta must lie in [0, 1]");
  ElboTerms t = elbo_terms(m, batch, rng, mc_samples);
  return neg(mean(t.log_px + scale(t.log_prior - t.log_posterior, beta)));
}

/// Bernoulli(intensity) draw per pixel.
inline Matrix dynamic_binarize(const Matrix& x, Rng& rng) {
  Matrix out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double p = x.data[i];
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("dynamic_binarize: intensity outside [0, 1]");
    out.data[i] = rng.uniform() < p ? 1.0 : 0.0;
  }
  return out;
}

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over trainable tensors, with each tensor's gradient rescaled to unit
/// L2 norm before the moment update. Blocks whose gradient norm is below
/// 1e-12 are left untouched for that step.
class Adam {
 public:
  explicit Adam(const ParameterList& params, AdamHyper hyper = {}) : hyper_(hyper) {
    for (const auto& p : params) {
      if (!p.tensor.requires_grad()) continue;
      blocks_.push_back(p.tensor);
      first_.emplace_back(p.tensor.numel(), 0.0);
      second_.emplace_back(p.tensor.numel(), 0.0);
    }
  }

  std::size_t steps() const { return steps_; }
  const std::vector<std::vector<double>>& first_moments() const { return first_; }
  const std::vector<std::vector<double>>& second_moments() const { return second_; }

  void zero_grad() {
    for (auto& t : blocks_) t.zero_grad();
  }

  void step(double lr) {
    for (const auto& t : blocks_) {
      if (!t.has_grad()) throw ContractError("Adam::step: a trainable tensor has no gradient");
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(steps_));
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      std::vector<double> g = blocks_[b].grad();
      const double norm = std::sqrt(std::inner_product(g.begin(), g.end(), g.begin(), 0.0));
      if (norm < 1e-12) continue;
      auto values = blocks_[b].mutable_data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = g[i] / norm;
        first_[b][i] = hyper_.beta1 * first_[b][i] + (1.0 - hyper_.beta1) * gi;
        second_[b][i] = hyper_.beta2 * second_[b][i] + (1.0 - hyper_.beta2) * gi * gi;
        values[i] -= lr * (first_[b][i] / c1) / (std::sqrt(second_[b][i] / c2) + hyper_.eps);
      }
    }
  }

 private:
  AdamHyper hyper_;
  std::vector<Tensor> blocks_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::size_t steps_ = 0;
};

/// Tracks the best validation score (higher is better) and signals a stop
/// once `patience` epochs pass without improvement.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {
    if (patience == 0) throw ContractError("patience must be >= 1");
  }

  /// Returns true when `score` improves on the best so far.
  bool update(std::size_t epoch, double score) {
    if (!has_best_ || score > best_score_) {
      has_best_ = true;
      best_epoch_ = epoch;
      best_score_ = score;
      last_epoch_ = epoch;
      return true;
    }
    last_epoch_ = epoch;
    return false;
  }

  bool should_stop() const { return has_best_ && last_epoch_ - best_epoch_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_score() const { return best_score_; }

 private:
  std::size_t patience_;
  bool has_best_ = false;
  std::size_t best_epoch_ = 0;
  double best_score_ = -std::numeric_limits<double>::infinity();
  std::size_t last_epoch_ = 0;
};

/// Mean single-sample ELBO (beta = 1) over `data`, deterministic in `seed`.
/// Dynamic data are binarized once with the same seed.
inline double mean_elbo(const Model& m, const Matrix& data, std::uint64_t seed, Binarization binarization,
                        std::size_t batch_size = 100) {
  if (data.empty()) throw ContractError("mean_elbo: empty data");
  NoGradGuard no_grad;
  Rng rng(seed);
  const Matrix x = binarization == Binarization::Dynamic ? dynamic_binarize(data, rng) : data;
  double total = 0.0;
  for (std::size_t begin = 0; begin < x.rows; begin += batch_size) {
    const std::size_t end = std::min(x.rows, begin + batch_size);
    Tensor e = elbo_terms(m, Tensor::from_matrix(x.slice_rows(begin, end)), rng).elbo();
    for (double v : e.data()) total += v;
  }
  return total / static_cast<double>(x.rows);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double beta = 0.0;
  double train_loss = 0.0;
  double val_elbo = 0.0;
  double wallclock_s = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_elbo = -std::numeric_limits<double>::infinity();
  std::string stop_reason;

  /// One JSON object per epoch. Wall-clock time is left out so logs of
  /// identical runs compare equal byte for byte.
  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : epochs) {
      nlohmann::json j = {{"epoch", r.epoch}, {"beta", r.beta}, {"train_loss", r.train_loss}, {"val_elbo", r.val_elbo}};
      out += j.dump() + "\n";
    }
    return out;
  }

  /// Per-epoch wall-clock seconds, kept apart from the deterministic log.
  std::string timing_jsonl() const {
    std::string out;
    for (const auto& r : epochs) out += nlohmann::json{{"epoch", r.epoch}, {"wallclock_s", r.wallclock_s}}.dump() + "\n";
    return out;
  }
};

struct FitOptions {
  /// Replaces the validation ELBO; used to inject metric sequences.
  std::function<double(const Model&, std::size_t epoch)> validation;
  /// Called after every epoch with the record just appended.
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
  TrainLog log;
  Model best;  // parameters at the best validation epoch
};

/// Trains `model` in place. Shuffling, binarization and reparameterization
/// noise all derive from config.seed.
inline FitResult fit(const Matrix& train, const Matrix& val, Model& model, const TrainConfig& config,
                     Binarization binarization, const FitOptions& options = {}) {
  config.validate();
  if (train.empty() || val.empty()) throw ContractError("fit: train and validation splits must be non-empty");
  Rng rng(config.seed);
  Adam adam(model.parameters());
  EarlyStopper stopper(config.early_stop_patience);
  FitResult result{TrainLog{}, model.clone()};
  std::vector<std::size_t> order(train.rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto started = std::chrono::steady_clock::now();

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const double beta = warmup_beta(epoch, config.warmup_epochs);
    const Matrix x = binarization == Binarization::Dynamic ? dynamic_binarize(train, rng) : train;
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < x.rows; begin += config.batch_size) {
      const std::size_t end = std::min(x.rows, begin + config.batch_size);
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      Tensor loss = objective(model, Tensor::from_matrix(x.gather_rows(idx)), beta, rng, config.mc_samples);
      loss_sum += loss.item() * static_cast<double>(end - begin);
      adam.zero_grad();
      backward(loss);
      adam.step(config.learning_rate);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.beta = beta;
    rec.train_loss = loss_sum / static_cast<double>(x.rows);
    rec.val_elbo = options.validation ? options.validation(model, epoch)
                                      : mean_elbo(model, val, config.val_seed, binarization, config.batch_size);
    rec.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.epochs.push_back(rec);
    if (stopper.update(epoch, rec.val_elbo)) {
      result.best.copy_values_from(model);
      result.log.best_epoch = epoch;
      result.log.best_val_elbo = rec.val_elbo;
    }
    if (options.on_epoch) options.on_epoch(rec);
    if (stopper.should_stop()) {
      result.log.stop_reason = "early_stopping";
      return result;
    }
  }
  result.log.stop_reason = "max_epochs";
  return result;
}

}  // namespace vampvae
