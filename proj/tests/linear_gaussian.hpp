#pragma once

// Linear-Gaussian latent model p(z) = N(0, I), p(x|z) = N(Wz + b, sigma^2 I)
// with orthogonal columns in W, so the exact posterior is diagonal. The
// marginal log N(x | b, W W^T + sigma^2 I) comes from an Eigen Cholesky
// factorization, independent of the library's density code.

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "vampvae/rng.hpp"

namespace testing_support {

struct LinearGaussian {
  Eigen::MatrixXd W;  // D x M
  Eigen::VectorXd b;
  double sigma = 0.5;

  static LinearGaussian random(int d, int m, std::uint64_t seed, double sigma = 0.5) {
    vampvae::Rng rng(seed);
    Eigen::MatrixXd a(d, m);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < m; ++j) a(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, m);
    LinearGaussian lg;
    lg.W = q;
    for (int j = 0; j < m; ++j) lg.W.col(j) *= 0.5 + 1.5 * rng.uniform();
    lg.b.resize(d);
    for (int i = 0; i < d; ++i) lg.b(i) = 0.3 * rng.normal();
    lg.sigma = sigma;
    return lg;
  }

  int dim() const { return static_cast<int>(W.rows()); }
  int latent() const { return static_cast<int>(W.cols()); }

  double log_marginal(const Eigen::VectorXd& x) const {
    const int d = dim();
    Eigen::MatrixXd cov = W * W.transpose() + sigma * sigma * Eigen::MatrixXd::Identity(d, d);
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    const Eigen::VectorXd r = x - b;
    const Eigen::VectorXd y = llt.matrixL().solve(r);
    double log_det = 0.0;
    for (int i = 0; i < d; ++i) log_det += 2.0 * std::log(llt.matrixL()(i, i));
    return -0.5 * (d * std::log(2.0 * M_PI) + log_det + y.squaredNorm());
  }

  // Exact posterior; `mean_shift` and `var_scale` perturb it.
  void posterior(const Eigen::VectorXd& x, Eigen::VectorXd& mean, Eigen::VectorXd& var, double mean_shift = 0.0,
                 double var_scale = 1.0) const {
    const double s2 = sigma * sigma;
    var.resize(latent());
    for (int j = 0; j < latent(); ++j) var(j) = var_scale / (1.0 + W.col(j).squaredNorm() / s2);
    mean = (W.transpose() * (x - b)) / s2;
    for (int j = 0; j < latent(); ++j) mean(j) = mean(j) / (1.0 + W.col(j).squaredNorm() / s2) + mean_shift;
  }

  static double log_normal(const Eigen::VectorXd& v, const Eigen::VectorXd& mean, const Eigen::VectorXd& var) {
    double out = 0.0;
    for (int i = 0; i < v.size(); ++i) {
      const double d = v(i) - mean(i);
      out += -0.5 * (std::log(2.0 * M_PI * var(i)) + d * d / var(i));
    }
    return out;
  }

  // log p(x, z) - log q(z|x) for `count` draws from the (possibly perturbed) posterior.
  std::vector<double> weights(const Eigen::VectorXd& x, std::size_t count, vampvae::Rng& rng, double mean_shift = 0.0,
                              double var_scale = 1.0) const {
    Eigen::VectorXd mean, var;
    posterior(x, mean, var, mean_shift, var_scale);
    const int m = latent();
    const Eigen::VectorXd zeros = Eigen::VectorXd::Zero(m), ones = Eigen::VectorXd::Ones(m);
    const Eigen::VectorXd noise_var = Eigen::VectorXd::Constant(dim(), sigma * sigma);
    std::vector<double> out;
    out.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
      Eigen::VectorXd z(m);
      for (int j = 0; j < m; ++j) z(j) = mean(j) + std::sqrt(var(j)) * rng.normal();
      out.push_back(log_normal(x, W * z + b, noise_var) + log_normal(z, zeros, ones) - log_normal(z, mean, var));
    }
    return out;
  }

  Eigen::VectorXd sample_x(vampvae::Rng& rng) const {
    Eigen::VectorXd z(latent()), x(dim());
    for (int j = 0; j < latent(); ++j) z(j) = rng.normal();
    x = W * z + b;
    for (int i = 0; i < dim(); ++i) x(i) += sigma * rng.normal();
    return x;
  }
};

}  // namespace testing_support
