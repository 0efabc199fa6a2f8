#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "vampvae/nn.hpp"
#include "vampvae/rng.hpp"
#include "vampvae/tensor.hpp"

using namespace vampvae;

namespace {

Tensor random_param(Shape shape, Rng& rng, double spread = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = spread * rng.normal();
  return Tensor::parameter(std::move(shape), std::move(v));
}

double check(const std::function<Tensor()>& f, std::vector<Tensor> params, double h = 1e-5) {
  return grad_check(f, params, h);
}

}  // namespace

TEST(Autodiff, SigmoidAtZeroIsHalf) { EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5); }

TEST(Autodiff, LogSumExpOfEqualZeros) {
  EXPECT_NEAR(log_sum_exp(Tensor::constant({2}, {0.0, 0.0})).item(), std::log(2.0), 1e-15);
}

TEST(Autodiff, LogSumExpDoesNotOverflow) {
  const double v = log_sum_exp(Tensor::constant({2}, {1000.0, 1000.0})).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 1000.0 + std::log(2.0), 1e-12);
}

TEST(Autodiff, LogSumExpShiftInvariance) {
  Rng rng(3);
  std::vector<double> v(7);
  for (double& x : v) x = 3.0 * rng.normal();
  const double base = log_sum_exp(Tensor::constant({7}, v)).item();
  for (double c : {-500.0, -3.0, 11.0, 400.0}) {
    std::vector<double> shifted = v;
    for (double& x : shifted) x += c;
    const double s = log_sum_exp(Tensor::constant({7}, shifted)).item();
    EXPECT_NEAR(s - c, base, 1e-12 * std::max(1.0, std::abs(s)));
  }
}

TEST(Autodiff, LogSumExpRowsMatchesDefinition) {
  Tensor a = Tensor::constant({2, 3}, {0.1, -2.0, 5.0, 7.0, 7.0, -1.0});
  Tensor r = log_sum_exp(a);
  ASSERT_EQ(r.shape(), Shape{2});
  for (std::size_t i = 0; i < 2; ++i) {
    double mx = std::max({a.at(i, 0), a.at(i, 1), a.at(i, 2)});
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) s += std::exp(a.at(i, j) - mx);
    EXPECT_EQ(r[i], mx + std::log(s));
  }
}

TEST(Autodiff, SumOfSquaresGradient) {
  Tensor w = Tensor::parameter({2}, {1.0, 2.0});
  backward(sum(w * w));
  EXPECT_EQ(w.grad(), (std::vector<double>{2.0, 4.0}));
}

TEST(Autodiff, LogSumExpGradientIsSoftmax) {
  Tensor v = Tensor::parameter({2}, {0.0, 0.0});
  backward(log_sum_exp(v));
  EXPECT_DOUBLE_EQ(v.grad()[0], 0.5);
  EXPECT_DOUBLE_EQ(v.grad()[1], 0.5);
}

TEST(Autodiff, FanOutAccumulates) {
  Tensor w = Tensor::parameter({3}, {0.5, -1.0, 2.0});
  backward(sum(exp(w)) + sum(square(w)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(w.grad()[i], std::exp(w[i]) + 2.0 * w[i], 1e-14);
}

TEST(Autodiff, BackwardAccumulatesAcrossCalls) {
  Tensor w = Tensor::parameter({1}, {3.0});
  backward(sum(w * w));
  backward(sum(w * w));
  EXPECT_EQ(w.grad()[0], 12.0);
  w.zero_grad();
  EXPECT_FALSE(w.has_grad());
}

TEST(Autodiff, BackwardRejectsNonScalar) {
  Tensor w = Tensor::parameter({2}, {1.0, 2.0});
  EXPECT_THROW(backward(w * w), ContractError);
}

TEST(Autodiff, NoGradGuardSkipsRecording) {
  Tensor w = Tensor::parameter({2}, {1.0, 2.0});
  NoGradGuard guard;
  Tensor y = sum(w * w);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, ShapeMismatchRaises) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  EXPECT_THROW(a + b, DimensionError);
  EXPECT_THROW(matmul(a, a), DimensionError);
  EXPECT_THROW(Tensor::constant({2, 2}, {1.0}), DimensionError);
}

TEST(Autodiff, NonFiniteResultsRaise) {
  EXPECT_THROW(log(Tensor::constant({1}, {0.0})), NumericError);
  EXPECT_THROW(log(Tensor::constant({1}, {-1.0})), NumericError);
  EXPECT_THROW(exp(Tensor::constant({1}, {1000.0})), NumericError);
  EXPECT_THROW(div(Tensor::scalar(1.0), Tensor::scalar(0.0)), NumericError);
}

TEST(Autodiff, BroadcastRowAndScalar) {
  Tensor m = Tensor::constant({2, 2}, {1, 2, 3, 4});
  Tensor row = Tensor::constant({2}, {10, 20});
  EXPECT_EQ((m + row).to_matrix().data, (std::vector<double>{11, 22, 13, 24}));
  EXPECT_EQ((row + m).to_matrix().data, (std::vector<double>{11, 22, 13, 24}));
  EXPECT_EQ((m * Tensor::scalar(2.0)).to_matrix().data, (std::vector<double>{2, 4, 6, 8}));
}

TEST(Autodiff, SoftplusIsStableForLargeInputs) {
  Tensor s = softplus(Tensor::constant({3}, {-800.0, 0.0, 800.0}));
  EXPECT_EQ(s[0], 0.0);
  EXPECT_NEAR(s[1], std::log(2.0), 1e-15);
  EXPECT_EQ(s[2], 800.0);
}

TEST(Autodiff, SliceAndConcatRoundTrip) {
  Tensor a = Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor c = concat_cols({slice_cols(a, 0, 1), slice_cols(a, 1, 3)});
  EXPECT_EQ(c.to_matrix().data, a.to_matrix().data);
}

// Per-op gradient checks on random small shapes; pure ops to 1e-7.
TEST(Autodiff, PerOpGradients) {
  Rng rng(11);
  Tensor a = random_param({3, 4}, rng);
  Tensor b = random_param({3, 4}, rng);
  Tensor row = random_param({4}, rng);
  Tensor pos = Tensor::parameter({3, 4}, std::vector<double>(12, 0.0));
  for (std::size_t i = 0; i < 12; ++i) pos.mutable_data()[i] = 0.5 + rng.uniform();
  Tensor w = random_param({4, 2}, rng);
  Tensor c = random_param({3, 2}, rng);
  Tensor s = random_param({}, rng);

  const double tol = 1e-7;
  EXPECT_LT(check([&] { return sum(a + b); }, {a, b}), tol);
  EXPECT_LT(check([&] { return sum(square(a - row)); }, {a, row}), tol);
  EXPECT_LT(check([&] { return sum(a * b); }, {a, b}), tol);
  EXPECT_LT(check([&] { return sum(a / pos); }, {a, pos}), tol);
  EXPECT_LT(check([&] { return sum(-a * s); }, {a, s}), tol);
  EXPECT_LT(check([&] { return sum(scale(a, 1.7) + 0.3); }, {a}), tol);
  EXPECT_LT(check([&] { return sum(exp(a)); }, {a}), tol);
  EXPECT_LT(check([&] { return sum(log(pos)); }, {pos}), tol);
  EXPECT_LT(check([&] { return sum(square(a)); }, {a}), tol);
  EXPECT_LT(check([&] { return sum(sigmoid(a)); }, {a}), tol);
  EXPECT_LT(check([&] { return sum(tanh(a)); }, {a}), tol);
  EXPECT_LT(check([&] { return sum(softplus(a)); }, {a}), tol);
  EXPECT_LT(check([&] { return sum(clamp(a, -0.5, 0.5) * b); }, {a, b}), tol);
  EXPECT_LT(check([&] { return mean(a * b); }, {a, b}), tol);
  EXPECT_LT(check([&] { return sum(square(sum_rows(a))); }, {a}), tol);
  EXPECT_LT(check([&] { return sum(square(log_sum_exp(a))); }, {a}), tol);
  EXPECT_LT(check([&] { return sum(matmul(a, w) * c); }, {a, w, c}), tol);
  EXPECT_LT(check([&] { return sum(square(slice_cols(a, 1, 3))); }, {a}), tol);
  EXPECT_LT(check([&] { return sum(concat_cols({a, c}) * concat_cols({b, c})); }, {a, b, c}), tol);
}

TEST(Autodiff, FusedGaussianDensityGradients) {
  Rng rng(12);
  Tensor z = random_param({3, 2}, rng);
  Tensor m = random_param({3, 2}, rng);
  Tensor lv = random_param({3, 2}, rng, 0.5);
  Tensor mrow = random_param({2}, rng);
  Tensor lvrow = random_param({2}, rng, 0.5);
  Tensor km = random_param({4, 2}, rng);
  Tensor klv = random_param({4, 2}, rng, 0.5);
  EXPECT_LT(check([&] { return sum(log_normal_diag(z, m, lv)); }, {z, m, lv}), 1e-7);
  EXPECT_LT(check([&] { return sum(log_normal_diag(z, mrow, lvrow)); }, {z, mrow, lvrow}), 1e-7);
  EXPECT_LT(check([&] { return sum(log_sum_exp(log_normal_pairwise(z, km, klv))); }, {z, km, klv}), 1e-7);
}

TEST(Autodiff, FusedPairwiseMatchesRowwise) {
  Rng rng(13);
  Tensor z = random_param({3, 2}, rng);
  Tensor km = random_param({4, 2}, rng);
  Tensor klv = random_param({4, 2}, rng, 0.5);
  Tensor pw = log_normal_pairwise(z, km, klv);
  for (std::size_t c = 0; c < 4; ++c) {
    Tensor mc = Tensor::constant({2}, {km.at(c, 0), km.at(c, 1)});
    Tensor lc = Tensor::constant({2}, {klv.at(c, 0), klv.at(c, 1)});
    Tensor col = log_normal_diag(z, mc, lc);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(pw.at(i, c), col[i], 1e-13);
  }
}

TEST(Autodiff, GatedMlpGradientCheck) {
  Rng rng(5);
  GatedStack net(5, 6, 3, rng);
  Linear out(6, 1, rng);
  Tensor x = Tensor::constant({4, 5}, rng.normals(20));
  ParameterList named;
  net.collect("net", named);
  out.collect("out", named);
  std::vector<Tensor> params;
  for (auto& p : named) params.push_back(p.tensor);
  EXPECT_LT(grad_check([&] { return sum(tanh(out(net(x)))); }, params, 1e-5), 1e-5);
}

TEST(Autodiff, QuadraticFormIsExact) {
  Rng rng(6);
  Tensor w = random_param({1, 3}, rng);
  Tensor q = Tensor::constant({3, 3}, {2, 0.5, 0, 0.5, 3, -1, 0, -1, 4});
  EXPECT_LT(grad_check([&] { return sum(matmul(w, q) * w); }, std::span<Tensor>(&w, 1), 1e-4), 1e-9);
}

TEST(Autodiff, WrongBackwardIsDetected) {
  Tensor w = Tensor::parameter({2}, {0.3, -0.7});
  auto broken_square = [](const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * a[i];
    return Tensor::make_result("broken_square", a.shape(), std::move(out), {a}, [](detail::Node& self) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * 3.0 * self.inputs[0]->value[i];
    });
  };
  EXPECT_GT(grad_check([&] { return sum(broken_square(w)); }, std::span<Tensor>(&w, 1)), 1e-2);
}

TEST(Autodiff, GradCheckRejectsNondeterministicFunction) {
  Tensor w = Tensor::parameter({1}, {1.0});
  int calls = 0;
  auto f = [&] { return sum(w * Tensor::scalar(static_cast<double>(++calls))); };
  EXPECT_THROW(grad_check(f, std::span<Tensor>(&w, 1)), ContractError);
}

TEST(Autodiff, GradCheckRejectsStepOutsideRange) {
  Tensor w = Tensor::parameter({1}, {1.0});
  auto f = [&] { return sum(w * w); };
  EXPECT_THROW(grad_check(f, std::span<Tensor>(&w, 1), 1e-2), ContractError);
  EXPECT_THROW(grad_check(f, std::span<Tensor>(&w, 1), 1e-9), ContractError);
}

TEST(Autodiff, GraphIsReleasedAfterBackward) {
  Tensor w = Tensor::parameter({2}, {1.0, 2.0});
  Tensor y = sum(exp(w));
  backward(y);
  EXPECT_TRUE(y.node().inputs.empty());
  EXPECT_THROW(backward(y), ContractError);
}
