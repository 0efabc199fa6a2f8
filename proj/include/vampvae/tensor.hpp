#pragma once

// Dense real tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a shared handle onto a graph node. Operations on tensors that
// require gradients record a node holding their inputs and a backward rule;
// backward() walks the recorded graph once in reverse topological order and
// then releases it. Leaf tensors created with Tensor::parameter() accumulate
// gradients across calls until zero_grad().

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "vampvae/errors.hpp"

namespace vampvae {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* tag = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// While alive, operations on this thread do not record graph nodes.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Plain row-major matrix used for datasets and non-differentiable results.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != rows * cols) throw DimensionError("Matrix: payload does not match extents");
  }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  bool empty() const { return rows == 0; }

  /// Rows [begin, end) as a new matrix.
  Matrix slice_rows(std::size_t begin, std::size_t end) const {
    Matrix out(end - begin, cols);
    std::copy(data.begin() + static_cast<std::ptrdiff_t>(begin * cols),
              data.begin() + static_cast<std::ptrdiff_t>(end * cols), out.data.begin());
    return out;
  }

  Matrix gather_rows(std::span<const std::size_t> index) const {
    Matrix out(index.size(), cols);
    for (std::size_t i = 0; i < index.size(); ++i) {
      auto src = row(index[i]);
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values) {
    return Tensor(make_leaf(std::move(shape), std::move(values), false));
  }
  static Tensor parameter(Shape shape, std::vector<double> values) {
    return Tensor(make_leaf(std::move(shape), std::move(values), true));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape), 0.0);
    return Tensor(make_leaf(std::move(shape), std::move(v), requires_grad));
  }
  static Tensor full(Shape shape, double value) {
    std::vector<double> v(shape_numel(shape), value);
    return Tensor(make_leaf(std::move(shape), std::move(v), false));
  }
  static Tensor scalar(double v) { return constant({}, {v}); }
  static Tensor from_matrix(const Matrix& m) { return constant({m.rows, m.cols}, m.data); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return rank() == 2 ? node_->shape[0] : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }

  std::span<const double> data() const { return node_->value; }
  /// Direct write access for optimizers and finite differencing.
  std::span<double> mutable_data() { return node_->value; }
  double item() const {
    if (numel() != 1) throw ContractError("item(): tensor of shape " + shape_string(shape()) + " is not a scalar");
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  const char* tag() const { return node_->tag; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  /// Accumulated gradient; zeros if backward never reached this tensor.
  std::vector<double> grad() const {
    return has_grad() ? node_->grad : std::vector<double>(node_->value.size(), 0.0);
  }
  void zero_grad() { node_->grad.clear(); }

  /// Value copy with no graph attached.
  Tensor detach() const { return constant(shape(), node_->value); }
  Matrix to_matrix() const {
    if (rank() == 2) return Matrix(shape()[0], shape()[1], node_->value);
    return Matrix(1, numel(), node_->value);
  }

  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  /// Records an operation result. Throws NumericError on any non-finite
  /// output value.
  static Tensor make_result(const char* tag, Shape shape, std::vector<double> value,
                            std::initializer_list<Tensor> inputs,
                            std::function<void(detail::Node&)> backward) {
    return make_result(tag, std::move(shape), std::move(value), std::vector<Tensor>(inputs),
                       std::move(backward));
  }

  static Tensor make_result(const char* tag, Shape shape, std::vector<double> value,
                            const std::vector<Tensor>& inputs,
                            std::function<void(detail::Node&)> backward) {
    for (double v : value) {
      if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + tag);
    }
    auto node = make_leaf(std::move(shape), std::move(value), false);
    node->tag = tag;
    if (grad_enabled()) {
      bool any = std::any_of(inputs.begin(), inputs.end(),
                             [](const Tensor& t) { return t.requires_grad(); });
      if (any) {
        node->requires_grad = true;
        node->leaf = false;
        node->inputs.reserve(inputs.size());
        for (const auto& t : inputs) node->inputs.push_back(t.node_);
        node->backward = std::move(backward);
      }
    }
    return Tensor(std::move(node));
  }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

  static std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> values,
                                                 bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_string(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    }
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_string(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return node;
  }

  std::shared_ptr<detail::Node> node_;
};

/// Computes d(root)/d(leaf) for every leaf reachable from root that requires
/// a gradient, accumulating into the leaves. The recorded graph is released
/// afterwards.
inline void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ContractError("backward: root must be a scalar tensor");
  }
  if (!root.requires_grad()) throw ContractError("backward: root is not part of a recorded graph");

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&root.node(), 0}};
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && !child->leaf && seen.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && node->grad.size() == node->value.size()) node->backward(*node);
  }
  for (detail::Node* node : order) {
    node->inputs.clear();
    node->backward = nullptr;
    node->grad.clear();
    node->requires_grad = false;
  }
}

namespace detail {

enum class Broadcast { Same, Scalar, Row };

inline Broadcast classify(const Shape& big, const Shape& small, std::size_t small_numel) {
  if (big == small) return Broadcast::Same;
  if (small_numel == 1) return Broadcast::Scalar;
  if (big.size() == 2 && small.size() == 1 && small[0] == big[1]) return Broadcast::Row;
  if (big.size() == 2 && small.size() == 2 && small[0] == 1 && small[1] == big[1]) return Broadcast::Row;
  throw DimensionError("cannot broadcast " + shape_string(small) + " onto " + shape_string(big));
}

inline std::size_t map_index(Broadcast b, std::size_t i, std::size_t cols) {
  switch (b) {
    case Broadcast::Same: return i;
    case Broadcast::Scalar: return 0;
    case Broadcast::Row: return i % cols;
  }
  return i;
}

// Elementwise binary op with leading-batch / scalar broadcasting on either side.
// f(a, b) -> out, da(a, b, out) -> d out / d a, db(a, b, out) -> d out / d b.
template <class F, class DA, class DB>
Tensor binary(const char* tag, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const bool a_big = a.numel() >= b.numel();
  const Shape out_shape = a_big ? a.shape() : b.shape();
  const Broadcast ba = classify(out_shape, a.shape(), a.numel());
  const Broadcast bb = classify(out_shape, b.shape(), b.numel());
  const std::size_t n = shape_numel(out_shape);
  const std::size_t cols = out_shape.empty() ? 1 : out_shape.back();
  std::vector<double> out(n);
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[map_index(ba, i, cols)], bv[map_index(bb, i, cols)]);
  return Tensor::make_result(tag, out_shape, std::move(out), {a, b}, [=](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t ia = map_index(ba, i, cols);
      const std::size_t ib = map_index(bb, i, cols);
      const double g = self.grad[i];
      if (na.requires_grad) na.grad_buffer()[ia] += g * da(na.value[ia], nb.value[ib], self.value[i]);
      if (nb.requires_grad) nb.grad_buffer()[ib] += g * db(na.value[ia], nb.value[ib], self.value[i]);
    }
  });
}

// Elementwise unary op; df(x, out) -> d out / d x.
template <class F, class DF>
Tensor unary(const char* tag, const Tensor& a, F f, DF df) {
  std::vector<double> out(a.numel());
  auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return Tensor::make_result(tag, a.shape(), std::move(out), {a}, [df](Node& self) {
    Node& na = *self.inputs[0];
    auto& g = na.grad_buffer();
    for (std::size_t i = 0; i < self.value.size(); ++i) g[i] += self.grad[i] * df(na.value[i], self.value[i]);
  });
}

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Per-coordinate diagonal Gaussian log-density term.
inline double normal_term(double z, double mean, double log_var) {
  const double d = z - mean;
  return -0.5 * kLog2Pi - 0.5 * log_var - d * d / (2.0 * std::exp(log_var));
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary("add", a, b, [](double x, double y) { return x + y; },
                        [](double, double, double) { return 1.0; },
                        [](double, double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary("sub", a, b, [](double x, double y) { return x - y; },
                        [](double, double, double) { return 1.0; },
                        [](double, double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary("mul", a, b, [](double x, double y) { return x * y; },
                        [](double, double y, double) { return y; },
                        [](double x, double, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary("div", a, b, [](double x, double y) { return x / y; },
                        [](double, double y, double) { return 1.0 / y; },
                        [](double x, double y, double) { return -x / (y * y); });
}

inline Tensor neg(const Tensor& a) {
  return detail::unary("neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
inline Tensor scale(const Tensor& a, double c) {
  return detail::unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}
inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}
inline Tensor exp(const Tensor& a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& a) {
  return detail::unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Tensor square(const Tensor& a) {
  return detail::unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}
inline Tensor sigmoid(const Tensor& a) {
  return detail::unary("sigmoid", a, detail::stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}
inline Tensor tanh(const Tensor& a) {
  return detail::unary("tanh", a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}
inline Tensor softplus(const Tensor& a) {
  return detail::unary("softplus", a, detail::stable_softplus,
                       [](double x, double) { return detail::stable_sigmoid(x); });
}
/// Values clipped to [lo, hi]; the gradient is zero outside the interval.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }

/// Sum of all entries, as a rank-0 tensor.
inline Tensor sum(const Tensor& a) {
  auto v = a.data();
  double s = std::accumulate(v.begin(), v.end(), 0.0);
  return Tensor::make_result("sum", {}, {s}, {a}, [](detail::Node& self) {
    detail::Node& na = *self.inputs[0];
    auto& g = na.grad_buffer();
    for (double& gi : g) gi += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Row sums of an [n x m] matrix, giving [n]. A rank-1 input reduces to a scalar.
inline Tensor sum_rows(const Tensor& a) {
  if (a.rank() <= 1) return sum(a);
  if (a.rank() != 2) throw DimensionError("sum_rows expects rank <= 2, got " + shape_string(a.shape()));
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  std::vector<double> out(n, 0.0);
  auto v = a.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i] += v[i * m + j];
  return Tensor::make_result("sum_rows", {n}, std::move(out), {a}, [n, m](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g[i * m + j] += self.grad[i];
  });
}

/// log(sum(exp(v))) over the last axis: rank-1 input gives a scalar, an
/// [n x m] input gives [n]. Evaluated as max + log(sum(exp(v - max))).
inline Tensor log_sum_exp(const Tensor& a) {
  if (a.rank() > 2) throw DimensionError("log_sum_exp expects rank <= 2, got " + shape_string(a.shape()));
  const std::size_t n = a.rank() == 2 ? a.shape()[0] : 1;
  const std::size_t m = a.cols();
  Shape out_shape = a.rank() == 2 ? Shape{n} : Shape{};
  std::vector<double> out(n);
  auto v = a.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = v.data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(row[j] - mx);
    out[i] = mx + std::log(s);
  }
  return Tensor::make_result("log_sum_exp", std::move(out_shape), std::move(out), {a},
                             [n, m](detail::Node& self) {
                               detail::Node& na = *self.inputs[0];
                               auto& g = na.grad_buffer();
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < m; ++j)
                                   g[i * m + j] += self.grad[i] * std::exp(na.value[i * m + j] - self.value[i]);
                             });
}

/// [n x k] times [k x m].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  std::vector<double> out(n * m);
  using detail::ConstMap;
  using detail::MutMap;
  const auto ni = static_cast<Eigen::Index>(n), ki = static_cast<Eigen::Index>(k), mi = static_cast<Eigen::Index>(m);
  MutMap(out.data(), ni, mi).noalias() = ConstMap(a.data().data(), ni, ki) * ConstMap(b.data().data(), ki, mi);
  return Tensor::make_result("matmul", {n, m}, std::move(out), {a, b}, [ni, ki, mi](detail::Node& self) {
    detail::Node& na = *self.inputs[0];
    detail::Node& nb = *self.inputs[1];
    ConstMap g(self.grad.data(), ni, mi);
    if (na.requires_grad) {
      MutMap(na.grad_buffer().data(), ni, ki).noalias() += g * ConstMap(nb.value.data(), ki, mi).transpose();
    }
    if (nb.requires_grad) {
      MutMap(nb.grad_buffer().data(), ki, mi).noalias() += ConstMap(na.value.data(), ni, ki).transpose() * g;
    }
  });
}

/// Columns [begin, end) of an [n x m] matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() != 2 || begin >= end || end > a.shape()[1]) {
    throw DimensionError("slice_cols: bad range for " + shape_string(a.shape()));
  }
  const std::size_t n = a.shape()[0], m = a.shape()[1], w = end - begin;
  std::vector<double> out(n * w);
  auto v = a.data();
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(v.data() + i * m + begin, w, out.data() + i * w);
  return Tensor::make_result("slice_cols", {n, w}, std::move(out), {a}, [n, m, w, begin](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * m + begin + j] += self.grad[i * w + j];
  });
}

/// Horizontal concatenation of [n x m_i] matrices.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.shape()[0] != n) throw DimensionError("concat_cols: row count mismatch");
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  std::vector<double> out(n * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].data();
    for (std::size_t i = 0; i < n; ++i) std::copy_n(v.data() + i * widths[k], widths[k], out.data() + i * total + offset);
    offset += widths[k];
  }
  return Tensor::make_result("concat_cols", {n, total}, std::move(out), parts, [n, total, widths](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      detail::Node& in = *self.inputs[k];
      if (in.requires_grad) {
        auto& g = in.grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g[i * widths[k] + j] += self.grad[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

/// Diagonal Gaussian log-density summed over the last axis. z is [n x M] or
/// [M]; mean and log_var either match z or are [M] rows shared by every row.
inline Tensor log_normal_diag(const Tensor& z, const Tensor& mean, const Tensor& log_var) {
  const std::size_t m = z.cols();
  const std::size_t n = z.rank() == 2 ? z.shape()[0] : 1;
  auto check = [&](const Tensor& p, const char* what) {
    if (p.shape() == z.shape()) return false;
    if (p.rank() == 1 && p.shape()[0] == m) return true;
    throw DimensionError(std::string("log_normal_diag: ") + what + " shape " + shape_string(p.shape()) +
                         " does not match z " + shape_string(z.shape()));
  };
  const bool mean_row = check(mean, "mean");
  const bool lv_row = check(log_var, "log_var");
  if (z.rank() > 2) throw DimensionError("log_normal_diag: z must have rank <= 2");
  Shape out_shape = z.rank() == 2 ? Shape{n} : Shape{};
  std::vector<double> out(n, 0.0);
  auto zv = z.data(), mv = mean.data(), lv = log_var.data();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      s += detail::normal_term(zv[i * m + j], mv[mean_row ? j : i * m + j], lv[lv_row ? j : i * m + j]);
    }
    out[i] = s;
  }
  return Tensor::make_result(
      "log_normal_diag", std::move(out_shape), std::move(out), {z, mean, log_var},
      [n, m, mean_row, lv_row](detail::Node& self) {
        detail::Node& nz = *self.inputs[0];
        detail::Node& nm = *self.inputs[1];
        detail::Node& nl = *self.inputs[2];
        for (std::size_t i = 0; i < n; ++i) {
          const double g = self.grad[i];
          for (std::size_t j = 0; j < m; ++j) {
            const std::size_t iz = i * m + j;
            const std::size_t im = mean_row ? j : iz;
            const std::size_t il = lv_row ? j : iz;
            const double d = nz.value[iz] - nm.value[im];
            const double inv_var = std::exp(-nl.value[il]);
            if (nz.requires_grad) nz.grad_buffer()[iz] += -g * d * inv_var;
            if (nm.requires_grad) nm.grad_buffer()[im] += g * d * inv_var;
            if (nl.requires_grad) nl.grad_buffer()[il] += g * (-0.5 + 0.5 * d * d * inv_var);
          }
        }
      });
}

/// All-pairs diagonal Gaussian log-densities: z is [n x M], mean and log_var
/// are [K x M]; entry (i, k) is log N(z_i | mean_k, exp(log_var_k)).
inline Tensor log_normal_pairwise(const Tensor& z, const Tensor& mean, const Tensor& log_var) {
  if (z.rank() != 2 || mean.rank() != 2 || mean.shape() != log_var.shape() || mean.shape()[1] != z.shape()[1]) {
    throw DimensionError("log_normal_pairwise: z " + shape_string(z.shape()) + ", mean " +
                         shape_string(mean.shape()) + ", log_var " + shape_string(log_var.shape()));
  }
  const std::size_t n = z.shape()[0], m = z.shape()[1], k = mean.shape()[0];
  std::vector<double> out(n * k);
  auto zv = z.data(), mv = mean.data(), lv = log_var.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += detail::normal_term(zv[i * m + j], mv[c * m + j], lv[c * m + j]);
      out[i * k + c] = s;
    }
  }
  return Tensor::make_result("log_normal_pairwise", {n, k}, std::move(out), {z, mean, log_var},
                             [n, m, k](detail::Node& self) {
                               detail::Node& nz = *self.inputs[0];
                               detail::Node& nm = *self.inputs[1];
                               detail::Node& nl = *self.inputs[2];
                               std::vector<double> inv_var(nl.value.size());
                               for (std::size_t i = 0; i < inv_var.size(); ++i) inv_var[i] = std::exp(-nl.value[i]);
                               for (std::size_t i = 0; i < n; ++i) {
                                 for (std::size_t c = 0; c < k; ++c) {
                                   const double g = self.grad[i * k + c];
                                   if (g == 0.0) continue;
                                   for (std::size_t j = 0; j < m; ++j) {
                                     const std::size_t iz = i * m + j, ic = c * m + j;
                                     const double d = nz.value[iz] - nm.value[ic];
                                     if (nz.requires_grad) nz.grad_buffer()[iz] += -g * d * inv_var[ic];
                                     if (nm.requires_grad) nm.grad_buffer()[ic] += g * d * inv_var[ic];
                                     if (nl.requires_grad) nl.grad_buffer()[ic] += g * (-0.5 + 0.5 * d * d * inv_var[ic]);
                                   }
                                 }
                               }
                             });
}

/// Maximum relative error between backward() gradients and central finite
/// differences of f over every coordinate of params. The relative error of a
/// coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
inline double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double h = 1e-5) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ContractError("grad_check: step h must lie in [1e-7, 1e-3]");
  double first = 0.0, second = 0.0;
  {
    NoGradGuard guard;
    first = f().item();
    second = f().item();
  }
  if (first != second) throw ContractError("grad_check: f is not deterministic");

  for (auto& p : params) p.zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad());

  NoGradGuard guard;
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = f().item();
      values[i] = saved - h;
      const double down = f().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace vampvae
