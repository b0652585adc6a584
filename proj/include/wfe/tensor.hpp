#pragma once

// Dense row-major double tensors with tape-free reverse-mode differentiation.
//
// A Tensor is a cheap handle onto an immutable value node. Operations never
// modify their inputs; they allocate a new node which, when gradients are
// enabled and some input requires them, remembers its inputs and a backward
// closure. Calling backward() on a scalar walks that graph in reverse
// topological order and accumulates into every reachable grad buffer.
//
// Only ranks 0, 1 and 2 are used. Vectors are rank 1 and play the role of
// column vectors in matrix products.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "wfe/errors.hpp"

namespace wfe {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables graph construction on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({}, {v}); }

  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }

  std::span<const double> data() const { return node_->value; }
  /// Direct write access. Only valid on leaves (parameters, constants).
  std::span<double> mutable_data() { return node_->value; }

  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape[1] + c]; }

  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  std::vector<double> to_vector() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  /// Gradient buffer; all zeros if nothing has been accumulated yet.
  std::span<double> grad() { return node_->grad_buffer(); }
  std::span<const double> grad() const {
    return const_cast<detail::Node&>(*node_).grad_buffer();
  }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  /// Accumulates d(this)/d(leaf) into every reachable leaf. `this` must be scalar.
  void backward() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(detail::Node&)>);
  std::shared_ptr<detail::Node> node_;
};

/// Wraps a freshly computed value as an op result, wiring the backward
/// closure only if some input participates in differentiation.
inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::function<void(detail::Node&)> backward) {
  Tensor out;
  out.node_ = std::make_shared<detail::Node>();
  out.node_->shape = std::move(shape);
  out.node_->value = std::move(value);
  if (!detail::grad_enabled) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (auto& t : inputs) out.node_->inputs.push_back(t.node_ptr());
  out.node_->backward = std::move(backward);
  return out;
}

inline void Tensor::backward() const {
  if (size() != 1) {
    throw DimensionError("backward() needs a scalar, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order without deep recursion.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      detail::Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline bool wants_grad(const Node& n, std::size_t input) {
  return n.inputs[input]->requires_grad;
}

inline std::vector<double>& input_grad(Node& n, std::size_t input) {
  return n.inputs[input]->grad_buffer();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise operations
// ---------------------------------------------------------------------------

enum class ElementOp { add, sub, mul, sigmoid, tanh, relu, log, exp, clip_relu1 };

namespace detail {

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return make_result(a.shape(), std::move(out), {a}, [deriv](Node& self) {
    const auto& in = self.inputs[0]->value;
    auto& g = input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(in[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants_grad(self, k)) continue;
      auto& g = detail::input_grad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants_grad(self, k)) continue;
      auto& g = detail::input_grad(self, k);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

/// Element-wise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    if (detail::wants_grad(self, 0)) {
      auto& g = detail::input_grad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y[i];
    }
    if (detail::wants_grad(self, 1)) {
      auto& g = detail::input_grad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x[i];
    }
  });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(a, detail::sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

// Hinge points take subgradient 0.
inline Tensor relu(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

/// max(0, min(1, x)) per element.
inline Tensor clip_relu1(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::max(0.0, std::min(1.0, x)); },
      [](double x, double) { return (x > 0.0 && x < 1.0) ? 1.0 : 0.0; });
}

/// Natural log; non-positive inputs give -infinity rather than throwing.
inline Tensor log(const Tensor& a) {
  return detail::unary(
      a,
      [](double x) { return x > 0.0 ? std::log(x) : -std::numeric_limits<double>::infinity(); },
      [](double x, double) { return 1.0 / x; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor scale(const Tensor& a, double k) {
  return detail::unary(
      a, [k](double x) { return k * x; }, [k](double, double) { return k; });
}

inline Tensor add_scalar(const Tensor& a, double k) {
  return detail::unary(
      a, [k](double x) { return x + k; }, [](double, double) { return 1.0; });
}

/// Integer power x^n for n >= 1.
inline Tensor pow_int(const Tensor& a, int n) {
  if (n < 1) throw DimensionError("pow_int: exponent must be >= 1");
  return detail::unary(
      a,
      [n](double x) {
        double r = x;
        for (int i = 1; i < n; ++i) r *= x;
        return r;
      },
      [n](double x, double) {
        double r = static_cast<double>(n);
        for (int i = 1; i < n; ++i) r *= x;
        return r;
      });
}

/// Op-code dispatch over the element-wise family. Binary codes need `b`.
inline Tensor elementwise(ElementOp op, const Tensor& a, const Tensor& b = {}) {
  const auto need_b = [&] {
    if (!b.defined()) throw DimensionError("elementwise: binary op needs a second operand");
  };
  switch (op) {
    case ElementOp::add: need_b(); return add(a, b);
    case ElementOp::sub: need_b(); return sub(a, b);
    case ElementOp::mul: need_b(); return mul(a, b);
    case ElementOp::sigmoid: return sigmoid(a);
    case ElementOp::tanh: return tanh(a);
    case ElementOp::relu: return relu(a);
    case ElementOp::log: return log(a);
    case ElementOp::exp: return exp(a);
    case ElementOp::clip_relu1: return clip_relu1(a);
  }
  throw DimensionError("elementwise: unknown op");
}

// ---------------------------------------------------------------------------
// Linear algebra and reshaping
// ---------------------------------------------------------------------------

/// [m x k]·[k x n] -> [m x n], or [m x k]·[k] -> [m].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || (b.rank() != 1 && b.rank() != 2) || a.cols() != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols();
  const std::size_t n = b.rank() == 2 ? b.cols() : 1;
  std::vector<double> out(m * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  Shape shape = b.rank() == 2 ? Shape{m, n} : Shape{m};
  return make_result(std::move(shape), std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    const double* A = self.inputs[0]->value.data();
    const double* B = self.inputs[1]->value.data();
    const double* G = self.grad.data();
    if (detail::wants_grad(self, 0)) {
      double* dA = detail::input_grad(self, 0).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          dA[i * k + p] += acc;
        }
    }
    if (detail::wants_grad(self, 1)) {
      double* dB = detail::input_grad(self, 1).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += av * G[i * n + j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + shape_str(a.shape()));
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return make_result({c, r}, std::move(out), {a}, [r, c](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

/// Joins vectors (scalars count as length 1) end to end.
inline Tensor concat(const std::vector<Tensor>& parts) {
  std::vector<double> out;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    if (p.rank() > 1) throw DimensionError("concat: expected vectors, got " + shape_str(p.shape()));
    out.insert(out.end(), p.data().begin(), p.data().end());
    sizes.push_back(p.size());
  }
  const std::size_t n = out.size();
  return make_result({n}, std::move(out), parts, [sizes](detail::Node& self) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (detail::wants_grad(self, k)) {
        auto& g = detail::input_grad(self, k);
        for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += self.grad[offset + i];
      }
      offset += sizes[k];
    }
  });
}

/// Contiguous range [offset, offset + length) of a vector.
inline Tensor slice(const Tensor& a, std::size_t offset, std::size_t length) {
  if (a.rank() != 1 || offset + length > a.size()) {
    throw DimensionError("slice: range [" + std::to_string(offset) + ", " +
                         std::to_string(offset + length) + ") out of " + shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin() + offset, a.data().begin() + offset + length);
  return make_result({length}, std::move(out), {a}, [offset, length](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < length; ++i) g[offset + i] += self.grad[i];
  });
}

/// Builds an [n x I] matrix whose columns are the given length-n vectors.
inline Tensor stack_columns(const std::vector<Tensor>& columns) {
  if (columns.empty()) throw DimensionError("stack_columns: no columns");
  const std::size_t n = columns.front().size(), count = columns.size();
  std::vector<double> out(n * count);
  for (std::size_t j = 0; j < count; ++j) {
    if (columns[j].rank() != 1 || columns[j].size() != n) {
      throw DimensionError("stack_columns: column " + std::to_string(j) + " has shape " +
                           shape_str(columns[j].shape()));
    }
    for (std::size_t i = 0; i < n; ++i) out[i * count + j] = columns[j][i];
  }
  return make_result({n, count}, std::move(out), columns, [n, count](detail::Node& self) {
    for (std::size_t j = 0; j < count; ++j) {
      if (!detail::wants_grad(self, j)) continue;
      auto& g = detail::input_grad(self, j);
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i * count + j];
    }
  });
}

/// Row `index` of a matrix (embedding lookup).
inline Tensor gather_row(const Tensor& table, std::size_t index) {
  if (table.rank() != 2 || index >= table.rows()) {
    throw DimensionError("gather_row: row " + std::to_string(index) + " out of " +
                         shape_str(table.shape()));
  }
  const std::size_t d = table.cols();
  std::vector<double> out(table.data().begin() + index * d, table.data().begin() + (index + 1) * d);
  return make_result({d}, std::move(out), {table}, [index, d](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < d; ++i) g[index * d + i] += self.grad[i];
  });
}

/// Single element of a vector as a scalar.
inline Tensor pick(const Tensor& a, std::size_t index) {
  if (index >= a.size()) {
    throw DimensionError("pick: index " + std::to_string(index) + " out of " + shape_str(a.shape()));
  }
  return make_result({}, {a[index]}, {a}, [index](detail::Node& self) {
    detail::input_grad(self, 0)[index] += self.grad[0];
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({}, {s}, {a}, [](detail::Node& self) {
    auto& g = detail::input_grad(self, 0);
    for (auto& v : g) v += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Softmax family and pooling
// ---------------------------------------------------------------------------

/// log(Softmax(x)) with max subtraction; finite for any finite input.
inline Tensor log_softmax(const Tensor& x) {
  if (x.rank() != 1 || x.size() == 0) {
    throw DimensionError("log_softmax: expected a nonempty vector, got " + shape_str(x.shape()));
  }
  const auto v = x.data();
  const double mx = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (double e : v) z += std::exp(e - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] - lse;
  return make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    double gs = 0.0;
    for (double g : self.grad) gs += g;
    auto& g = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] - std::exp(self.value[i]) * gs;
  });
}

inline Tensor softmax(const Tensor& x) {
  if (x.rank() != 1 || x.size() == 0) {
    throw DimensionError("softmax: expected a nonempty vector, got " + shape_str(x.shape()));
  }
  const auto v = x.data();
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) z += (out[i] = std::exp(v[i] - mx));
  for (auto& e : out) e /= z;
  return make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    double dot = 0.0;
    for (std::size_t i = 0; i < self.value.size(); ++i) dot += self.grad[i] * self.value[i];
    auto& g = detail::input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.value[i] * (self.grad[i] - dot);
  });
}

namespace detail {

// Per-row extremum over columns; ties go to the lowest column index.
template <class Better>
Tensor row_extremum(const Tensor& x, Better better, const char* name) {
  if (x.rank() != 2 || x.rows() == 0 || x.cols() == 0) {
    throw DimensionError(std::string(name) + ": expected a nonempty matrix, got " +
                         shape_str(x.shape()));
  }
  const std::size_t h = x.rows(), w = x.cols();
  std::vector<double> out(h);
  std::vector<std::size_t> arg(h);
  for (std::size_t r = 0; r < h; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < w; ++c)
      if (better(x[r * w + c], x[r * w + best])) best = c;
    arg[r] = best;
    out[r] = x[r * w + best];
  }
  return make_result({h}, std::move(out), {x}, [arg = std::move(arg), w](Node& self) {
    auto& g = input_grad(self, 0);
    for (std::size_t r = 0; r < arg.size(); ++r) g[r * w + arg[r]] += self.grad[r];
  });
}

}  // namespace detail

inline Tensor row_max(const Tensor& x) {
  return detail::row_extremum(x, std::greater<double>(), "row_max");
}

inline Tensor row_min(const Tensor& x) {
  return detail::row_extremum(x, std::less<double>(), "row_min");
}

}  // namespace wfe
