#pragma once

// Reverse-mode differentiation over dense tensors. Graphs are built on the
// fly by the op functions below and consumed by backward(). Only the ops the
// reconstruction networks and the ray renderer need are provided.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <type_traits>
#include <vector>

#include "onix4d/tensor.hpp"

namespace onix::ad {

namespace detail {
inline std::atomic<std::uint64_t> next_node_id{1};
inline thread_local bool grad_enabled = true;
}  // namespace detail

// Reduction accumulator: at least double precision.
template <class T>
using Acc = std::common_type_t<T, double>;

inline bool grad_enabled() noexcept { return detail::grad_enabled; }

// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  std::uint64_t id = detail::next_node_id.fetch_add(1, std::memory_order_relaxed);

  Tensor<T>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<T>(value.shape());
      has_grad = true;
    }
    return grad;
  }
};

template <class T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  static Var parameter(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  explicit operator bool() const noexcept { return static_cast<bool>(node_); }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_->has_grad; }
  std::uint64_t id() const { return node_->id; }
  const NodePtr& node() const { return node_; }

  // Gradient, or zeros when nothing has flowed into this node.
  Tensor<T> grad() const {
    if (node_->has_grad) return node_->grad;
    return Tensor<T>(node_->value.shape());
  }

  void zero_grad() {
    if (node_->has_grad) node_->grad.fill(T{0});
  }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

 private:
  NodePtr node_;
};

struct BackwardStats {
  std::size_t nodes_visited = 0;
};

namespace detail {

template <class T, class Fn>
Var<T> make_op(Tensor<T> value, std::initializer_list<const Var<T>*> parents, Fn&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool needs = false;
  if (::onix::ad::grad_enabled()) {
    for (const Var<T>* p : parents) needs = needs || p->requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const Var<T>* p : parents) n->parents.push_back(p->node());
    n->backward = std::forward<Fn>(backward);
  }
  return Var<T>(std::move(n));
}

template <class T, class Fn>
Var<T> make_op_n(Tensor<T> value, const std::vector<Var<T>>& parents, Fn&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  bool needs = false;
  if (::onix::ad::grad_enabled()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::forward<Fn>(backward);
  }
  return Var<T>(std::move(n));
}

inline void require(bool ok, const std::string& op, const Shape& a, const Shape& b) {
  if (!ok) throw ShapeError(op + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

}  // namespace detail

// Accumulates d(root)/d(leaf) into every reachable leaf that requires grad.
// Intermediate gradients are released once consumed.
template <class T>
BackwardStats backward(const Var<T>& root) {
  if (!root) throw Error("backward on empty variable");
  if (root.size() != 1) {
    throw ShapeError("backward requires a scalar root, got shape " + to_string(root.shape()));
  }
  BackwardStats stats;
  if (!root.requires_grad()) return stats;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    ++stats.nodes_visited;
    if (!n->backward || !n->has_grad) continue;
    n->backward(*n);
    n->grad = Tensor<T>();
    n->has_grad = false;
  }
  return stats;
}

template <class T>
Var<T> detach(const Var<T>& x) {
  return Var<T>::constant(x.value());
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <class T, class F, class DF>
Var<T> unary(const Var<T>& x, F f, DF df) {
  Tensor<T> out(x.shape(), uninitialized);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_op<T>(std::move(out), {&x}, [df](Node<T>& self) {
    auto& p = *self.parents[0];
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p.value[i], self.value[i]);
  });
}

}  // namespace detail

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope = T(0.2)) {
  return detail::unary(
      x, [slope](T v) { return v > T{0} ? v : slope * v; },
      [slope](T v, T) { return v > T{0} ? T{1} : slope; });
}

template <class T>
T sigmoid_scalar(T v) {
  if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <class T>
Var<T> softplus(const Var<T>& x) {
  return detail::unary(
      x,
      [](T v) { return v > T{0} ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](T v, T) { return sigmoid_scalar(v); });
}

template <class T>
Var<T> exp(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> log(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <class T>
Var<T> negate(const Var<T>& x) {
  return detail::unary(x, [](T v) { return -v; }, [](T, T) { return T{-1}; });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <class T>
Var<T> scale(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Var<T> add_scalar(const Var<T>& x, T c) {
  return detail::unary(x, [c](T v) { return v + c; }, [](T, T) { return T{1}; });
}

// Values outside [lo, hi] are pinned and receive no gradient.
template <class T>
Var<T> clamp(const Var<T>& x, T lo, T hi) {
  return detail::unary(
      x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
      [lo, hi](T v, T) { return (v > lo && v < hi) ? T{1} : T{0}; });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "add", a.shape(), b.shape());
  Tensor<T> out(a.shape(), uninitialized);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return detail::make_op<T>(std::move(out), {&a, &b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "sub", a.shape(), b.shape());
  Tensor<T> out(a.shape(), uninitialized);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return detail::make_op<T>(std::move(out), {&a, &b}, [](Node<T>& self) {
    const T sign[2] = {T{1}, T{-1}};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = self.parents[k];
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.shape() == b.shape(), "mul", a.shape(), b.shape());
  Tensor<T> out(a.shape(), uninitialized);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_op<T>(std::move(out), {&a, &b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions (accumulated in at least double precision)

template <class T>
Var<T> sum(const Var<T>& x) {
  Acc<T> acc = 0;
  for (T v : x.value()) acc += static_cast<Acc<T>>(v);
  return detail::make_op<T>(Tensor<T>::scalar(static_cast<T>(acc)), {&x}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T s = self.grad[0];
    for (auto& v : g) v += s;
  });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  Acc<T> acc = 0;
  for (T v : x.value()) acc += static_cast<Acc<T>>(v);
  const double n = static_cast<double>(x.size());
  return detail::make_op<T>(Tensor<T>::scalar(static_cast<T>(acc / static_cast<Acc<T>>(n))), {&x},
                            [n](Node<T>& self) {
                              auto& g = self.parents[0]->grad_buffer();
                              const T s = static_cast<T>(self.grad[0] / n);
                              for (auto& v : g) v += s;
                            });
}

// Mean over the leading (view) axis: [V, ...] -> [...].
template <class T>
Var<T> mean_over_views(const Var<T>& x) {
  if (x.shape().size() < 2) throw ShapeError("mean_over_views needs rank >= 2, got " + to_string(x.shape()));
  const std::size_t views = x.dim(0);
  Shape rest(x.shape().begin() + 1, x.shape().end());
  const std::size_t inner = numel(rest);
  Tensor<T> out(rest, uninitialized);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < inner; ++i) {
    Acc<T> acc = 0;
    for (std::size_t v = 0; v < views; ++v) acc += static_cast<Acc<T>>(xv[v * inner + i]);
    out[i] = static_cast<T>(acc / static_cast<Acc<T>>(views));
  }
  return detail::make_op<T>(std::move(out), {&x}, [views, inner](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    const T w = T{1} / static_cast<T>(views);
    for (std::size_t v = 0; v < views; ++v)
      for (std::size_t i = 0; i < inner; ++i) g[v * inner + i] += w * self.grad[i];
  });
}

// out[r, c] = weight[r] * sum_s x[r*S + s, c]. Used for per-ray quadrature.
template <class T>
Var<T> weighted_segment_sum(const Var<T>& x, std::size_t segment, std::span<const T> weights) {
  if (x.shape().size() != 2 || segment == 0 || x.dim(0) != weights.size() * segment) {
    throw ShapeError("weighted_segment_sum: shape " + to_string(x.shape()) + " vs " +
                     std::to_string(weights.size()) + " segments of " + std::to_string(segment));
  }
  const std::size_t rows = weights.size();
  const std::size_t cols = x.dim(1);
  Tensor<T> out(Shape{rows, cols}, uninitialized);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      Acc<T> acc = 0;
      for (std::size_t s = 0; s < segment; ++s) acc += static_cast<Acc<T>>(xv[(r * segment + s) * cols + c]);
      out[r * cols + c] = static_cast<T>(acc * static_cast<Acc<T>>(weights[r]));
    }
  }
  std::vector<T> w(weights.begin(), weights.end());
  return detail::make_op<T>(std::move(out), {&x}, [w = std::move(w), segment, cols](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < w.size(); ++r)
      for (std::size_t s = 0; s < segment; ++s)
        for (std::size_t c = 0; c < cols; ++c)
          g[(r * segment + s) * cols + c] += w[r] * self.grad[r * cols + c];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return detail::make_op<T>(std::move(out), {&x}, [](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <class T>
Var<T> transpose2d(const Var<T>& x) {
  if (x.shape().size() != 2) throw ShapeError("transpose2d needs rank 2, got " + to_string(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  Tensor<T> out(Shape{c, r}, uninitialized);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.value()[i * c + j];
  return detail::make_op<T>(std::move(out), {&x}, [r, c](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat axis out of range for " + to_string(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    detail::require(ok, "concat", s0, s);
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  const std::size_t out_row = out_shape[axis] * inner;
  Tensor<T> out(out_shape, uninitialized);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.value().data() + o * len, len, out.data() + o * out_row + off);
    off += len;
  }
  return detail::make_op_n<T>(std::move(out), parts, [offsets, outer, out_row](Node<T>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      const std::size_t len = g.size() / outer;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < len; ++i) g[o * len + i] += self.grad[o * out_row + offsets[k] + i];
    }
  });
}

// [B, C, H, W] -> [B, H, W, C]
template <class T>
Var<T> to_channels_last(const Var<T>& x) {
  if (x.shape().size() != 4) throw ShapeError("to_channels_last needs rank 4, got " + to_string(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out(Shape{B, H, W, C}, uninitialized);
  const auto& xv = x.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < H * W; ++p) out[(b * H * W + p) * C + c] = xv[(b * C + c) * H * W + p];
  return detail::make_op<T>(std::move(out), {&x}, [B, C, H, W](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < H * W; ++p) g[(b * C + c) * H * W + p] += self.grad[(b * H * W + p) * C + c];
  });
}

// ---------------------------------------------------------------------------
// Dense layers

// x [N, in], weight [out, in], bias [out] (optional) -> [N, out]
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = Var<T>()) {
  if (x.shape().size() != 2 || weight.shape().size() != 2 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: incompatible shapes " + to_string(x.shape()) + " and " +
                     to_string(weight.shape()));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), outd = weight.dim(0);
  if (bias && (bias.shape().size() != 1 || bias.dim(0) != outd)) {
    throw ShapeError("linear: bias shape " + to_string(bias.shape()) + " vs weight " +
                     to_string(weight.shape()));
  }
  using namespace detail;
  Tensor<T> out(Shape{n, outd}, uninitialized);
  CMapR<T> X(x.value().data(), n, in);
  CMapR<T> Wm(weight.value().data(), outd, in);
  MapR<T> Y(out.data(), n, outd);
  Y.noalias() = X * Wm.transpose();
  if (bias) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(bias.value().data(), outd);
    Y.rowwise() += b;
  }
  auto fn = [n, in, outd](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    CMapR<T> dY(self.grad.data(), n, outd);
    if (px.requires_grad) {
      MapR<T> dX(px.grad_buffer().data(), n, in);
      CMapR<T> Wm(pw.value.data(), outd, in);
      dX.noalias() += dY * Wm;
    }
    if (pw.requires_grad) {
      MapR<T> dW(pw.grad_buffer().data(), outd, in);
      CMapR<T> X(px.value.data(), n, in);
      dW.noalias() += dY.transpose() * X;
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->grad_buffer();
      for (std::size_t j = 0; j < outd; ++j) {
        Acc<T> acc = 0;
        for (std::size_t i = 0; i < n; ++i) acc += static_cast<Acc<T>>(self.grad[i * outd + j]);
        gb[j] += static_cast<T>(acc);
      }
    }
  };
  if (bias) return make_op<T>(std::move(out), {&x, &weight, &bias}, fn);
  return make_op<T>(std::move(out), {&x, &weight}, fn);
}

// Residual MLP block y = x + W2 relu(W1 relu(x) + b1) + b2, fused into one
// node. x [N, C], W1 [H, C], W2 [C, H].
template <class T>
Var<T> residual_block(const Var<T>& x, const Var<T>& w1, const Var<T>& b1, const Var<T>& w2, const Var<T>& b2) {
  if (x.shape().size() != 2 || w1.shape().size() != 2 || w2.shape().size() != 2 || w1.dim(1) != x.dim(1) ||
      w2.dim(0) != x.dim(1) || w2.dim(1) != w1.dim(0) || b1.shape() != Shape{w1.dim(0)} ||
      b2.shape() != Shape{w2.dim(0)}) {
    throw ShapeError("residual_block: incompatible shapes " + to_string(x.shape()) + ", " + to_string(w1.shape()) +
                     ", " + to_string(w2.shape()));
  }
  using namespace detail;
  const std::size_t n = x.dim(0), c = x.dim(1), h = w1.dim(0);
  CMapR<T> X(x.value().data(), n, c);
  CMapR<T> W1(w1.value().data(), h, c), W2(w2.value().data(), c, h);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> B1(b1.value().data(), h), B2(b2.value().data(), c);
  MatR<T> A = X.cwiseMax(T{0});
  MatR<T> Z(n, h);
  Z.noalias() = A * W1.transpose();
  Z.rowwise() += B1;
  MatR<T> R = Z.cwiseMax(T{0});
  Tensor<T> out(x.shape(), uninitialized);
  MapR<T> Y(out.data(), n, c);
  Y.noalias() = R * W2.transpose();
  Y.rowwise() += B2;
  Y += X;
  auto z = std::make_shared<MatR<T>>(std::move(Z));
  return make_op<T>(std::move(out), {&x, &w1, &b1, &w2, &b2}, [z, n, c, h](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw1 = *self.parents[1];
    auto& pb1 = *self.parents[2];
    auto& pw2 = *self.parents[3];
    auto& pb2 = *self.parents[4];
    CMapR<T> G(self.grad.data(), n, c);
    CMapR<T> X(px.value.data(), n, c);
    CMapR<T> W1(pw1.value.data(), h, c), W2(pw2.value.data(), c, h);
    const MatR<T>& Z = *z;
    auto col_sums = [](const auto& M, Tensor<T>& dst) {
      for (Eigen::Index j = 0; j < M.cols(); ++j) {
        Acc<T> acc = 0;
        for (Eigen::Index i = 0; i < M.rows(); ++i) acc += static_cast<Acc<T>>(M(i, j));
        dst[static_cast<std::size_t>(j)] += static_cast<T>(acc);
      }
    };
    if (pw2.requires_grad) {
      MapR<T> dW2(pw2.grad_buffer().data(), c, h);
      dW2.noalias() += G.transpose() * Z.cwiseMax(T{0});
    }
    if (pb2.requires_grad) col_sums(G, pb2.grad_buffer());
    MatR<T> dZ(n, h);
    dZ.noalias() = G * W2;
    dZ = (Z.array() > T{0}).select(dZ, T{0});
    if (pw1.requires_grad) {
      MapR<T> dW1(pw1.grad_buffer().data(), h, c);
      dW1.noalias() += dZ.transpose() * X.cwiseMax(T{0});
    }
    if (pb1.requires_grad) col_sums(dZ, pb1.grad_buffer());
    if (px.requires_grad) {
      MatR<T> dA(n, c);
      dA.noalias() = dZ * W1;
      MapR<T> dX(px.grad_buffer().data(), n, c);
      dX += G + (X.array() > T{0}).select(dA, T{0});
    }
  });
}

namespace detail {

struct ConvGeom {
  std::size_t C, H, W, K, stride, pad, Ho, Wo;
};

// Valid output range [lo, hi) along one axis for kernel tap k.
inline void tap_range(std::size_t k, const ConvGeom& g, std::size_t in, std::size_t out, std::size_t& lo,
                      std::size_t& hi) {
  const long pad = static_cast<long>(g.pad), kk = static_cast<long>(k), s = static_cast<long>(g.stride);
  long a = pad - kk;
  a = a > 0 ? (a + s - 1) / s : 0;
  long b = (static_cast<long>(in) - 1 + pad - kk);
  b = b >= 0 ? b / s + 1 : 0;
  lo = static_cast<std::size_t>(std::min<long>(a, static_cast<long>(out)));
  hi = static_cast<std::size_t>(std::clamp<long>(b, static_cast<long>(lo), static_cast<long>(out)));
}

template <class T>
void im2col(const T* img, const ConvGeom& g, T* cols) {
  const std::size_t hw = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ki = 0; ki < g.K; ++ki) {
      std::size_t y0, y1;
      tap_range(ki, g, g.H, g.Ho, y0, y1);
      for (std::size_t kj = 0; kj < g.K; ++kj) {
        std::size_t x0, x1;
        tap_range(kj, g, g.W, g.Wo, x0, x1);
        T* row = cols + ((c * g.K + ki) * g.K + kj) * hw;
        std::fill(row, row + y0 * g.Wo, T{0});
        for (std::size_t oy = y0; oy < y1; ++oy) {
          T* dst = row + oy * g.Wo;
          const T* src = img + (c * g.H + oy * g.stride + ki - g.pad) * g.W;
          std::fill(dst, dst + x0, T{0});
          if (g.stride == 1) {
            std::copy(src + x0 + kj - g.pad, src + x1 + kj - g.pad, dst + x0);
          } else {
            for (std::size_t ox = x0; ox < x1; ++ox) dst[ox] = src[ox * g.stride + kj - g.pad];
          }
          std::fill(dst + x1, dst + g.Wo, T{0});
        }
        std::fill(row + y1 * g.Wo, row + hw, T{0});
      }
    }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, T* img) {
  const std::size_t hw = g.Ho * g.Wo;
  for (std::size_t c = 0; c < g.C; ++c)
    for (std::size_t ki = 0; ki < g.K; ++ki) {
      std::size_t y0, y1;
      tap_range(ki, g, g.H, g.Ho, y0, y1);
      for (std::size_t kj = 0; kj < g.K; ++kj) {
        std::size_t x0, x1;
        tap_range(kj, g, g.W, g.Wo, x0, x1);
        const T* row = cols + ((c * g.K + ki) * g.K + kj) * hw;
        for (std::size_t oy = y0; oy < y1; ++oy) {
          const T* src = row + oy * g.Wo;
          T* dst = img + (c * g.H + oy * g.stride + ki - g.pad) * g.W;
          for (std::size_t ox = x0; ox < x1; ++ox) dst[ox * g.stride + kj - g.pad] += src[ox];
        }
      }
    }
}

}  // namespace detail

// x [B, C, H, W], weight [O, C, K, K], bias [O] (optional) -> [B, O, Ho, Wo]
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride,
              std::size_t pad) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0) {
    throw ShapeError("conv2d: incompatible shapes " + to_string(xs) + " and " + to_string(ws));
  }
  if (xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3]) {
    throw ShapeError("conv2d: kernel " + to_string(ws) + " larger than padded input " + to_string(xs));
  }
  if (bias && (bias.shape().size() != 1 || bias.dim(0) != ws[0])) {
    throw ShapeError("conv2d: bias shape " + to_string(bias.shape()) + " vs weight " + to_string(ws));
  }
  using namespace detail;
  ConvGeom g{xs[1], xs[2], xs[3], ws[2], stride, pad, 0, 0};
  g.Ho = (g.H + 2 * pad - g.K) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.K) / stride + 1;
  const std::size_t B = xs[0], O = ws[0], ckk = g.C * g.K * g.K, hw = g.Ho * g.Wo;
  Tensor<T> out(Shape{B, O, g.Ho, g.Wo}, uninitialized);
  std::vector<T> cols(ckk * hw);
  CMapR<T> Wm(weight.value().data(), O, ckk);
  for (std::size_t b = 0; b < B; ++b) {
    im2col(x.value().data() + b * g.C * g.H * g.W, g, cols.data());
    MapR<T> Y(out.data() + b * O * hw, O, hw);
    Y.noalias() = Wm * CMapR<T>(cols.data(), ckk, hw);
    if (bias) {
      for (std::size_t o = 0; o < O; ++o) Y.row(o).array() += bias.value()[o];
    }
  }
  auto fn = [g, B, O, ckk, hw](Node<T>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    std::vector<T> cols(ckk * hw);
    CMapR<T> Wm(pw.value.data(), O, ckk);
    for (std::size_t b = 0; b < B; ++b) {
      CMapR<T> dY(self.grad.data() + b * O * hw, O, hw);
      if (pw.requires_grad) {
        im2col(px.value.data() + b * g.C * g.H * g.W, g, cols.data());
        MapR<T> dW(pw.grad_buffer().data(), O, ckk);
        dW.noalias() += dY * CMapR<T>(cols.data(), ckk, hw).transpose();
      }
      if (px.requires_grad) {
        MapR<T> dcols(cols.data(), ckk, hw);
        dcols.noalias() = Wm.transpose() * dY;
        col2im_add(cols.data(), g, px.grad_buffer().data() + b * g.C * g.H * g.W);
      }
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->grad_buffer();
      for (std::size_t o = 0; o < O; ++o) {
        Acc<T> acc = 0;
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < hw; ++i) acc += static_cast<Acc<T>>(self.grad[(b * O + o) * hw + i]);
        gb[o] += static_cast<T>(acc);
      }
    }
  };
  if (bias) return make_op<T>(std::move(out), {&x, &weight, &bias}, fn);
  return make_op<T>(std::move(out), {&x, &weight}, fn);
}

// 2x2 average pooling with stride 2: [B, C, H, W] -> [B, C, H/2, W/2].
template <class T>
Var<T> avg_pool2x2(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2) throw ShapeError("avg_pool2x2 needs even spatial dims, got " + to_string(s));
  const std::size_t BC = s[0] * s[1], H = s[2], W = s[3], h = H / 2, w = W / 2;
  Tensor<T> out(Shape{s[0], s[1], h, w}, uninitialized);
  const auto& xv = x.value();
  for (std::size_t bc = 0; bc < BC; ++bc)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const T* p = xv.data() + (bc * H + 2 * i) * W + 2 * j;
        out[(bc * h + i) * w + j] = T(0.25) * (p[0] + p[1] + p[W] + p[W + 1]);
      }
  return detail::make_op<T>(std::move(out), {&x}, [BC, H, W, h, w](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t bc = 0; bc < BC; ++bc)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          const T v = T(0.25) * self.grad[(bc * h + i) * w + j];
          T* p = g.data() + (bc * H + 2 * i) * W + 2 * j;
          p[0] += v;
          p[1] += v;
          p[W] += v;
          p[W + 1] += v;
        }
  });
}

// ---------------------------------------------------------------------------
// Bilinear lookup into a channels-last map [B, H, W, C] at continuous pixel
// coordinates (x = column, y = row; integer values are pixel centers).
// Corners outside the map contribute zero. Differentiable w.r.t. the map only.

template <class T>
struct BilinearTap {
  std::size_t index[4];
  T weight[4];
};

template <class T>
inline BilinearTap<T> bilinear_tap(T x, T y, std::size_t H, std::size_t W) {
  BilinearTap<T> tap{};
  const T fx0 = std::floor(x), fy0 = std::floor(y);
  const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
  const T ax = x - fx0, ay = y - fy0;
  const long xs[2] = {x0, x0 + 1};
  const long ys[2] = {y0, y0 + 1};
  const T wx[2] = {T{1} - ax, ax};
  const T wy[2] = {T{1} - ay, ay};
  for (int k = 0; k < 4; ++k) {
    const long cx = xs[k & 1], cy = ys[k >> 1];
    const bool inside = cx >= 0 && cy >= 0 && cx < static_cast<long>(W) && cy < static_cast<long>(H);
    tap.index[k] = inside ? static_cast<std::size_t>(cy) * W + static_cast<std::size_t>(cx) : 0;
    tap.weight[k] = inside ? wx[k & 1] * wy[k >> 1] : T{0};
  }
  return tap;
}

template <class T>
Var<T> bilinear_sample(const Var<T>& map, std::size_t batch, std::span<const T> coords_xy) {
  const auto& s = map.shape();
  if (s.size() != 4 || batch >= s[0] || coords_xy.size() % 2) {
    throw ShapeError("bilinear_sample: map " + to_string(s) + ", batch " + std::to_string(batch) +
                     ", " + std::to_string(coords_xy.size()) + " coordinates");
  }
  const std::size_t H = s[1], W = s[2], C = s[3], N = coords_xy.size() / 2;
  const std::size_t base = batch * H * W;
  std::vector<BilinearTap<T>> taps(N);
  Tensor<T> out(Shape{N, C});
  const T* mv = map.value().data();
  for (std::size_t n = 0; n < N; ++n) {
    taps[n] = bilinear_tap(coords_xy[2 * n], coords_xy[2 * n + 1], H, W);
    T* o = out.data() + n * C;
    for (int k = 0; k < 4; ++k) {
      const T w = taps[n].weight[k];
      if (w == T{0}) continue;
      const T* src = mv + (base + taps[n].index[k]) * C;
      for (std::size_t c = 0; c < C; ++c) o[c] += w * src[c];
    }
  }
  return detail::make_op<T>(std::move(out), {&map}, [taps = std::move(taps), base, C](Node<T>& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t n = 0; n < taps.size(); ++n) {
      const T* go = self.grad.data() + n * C;
      for (int k = 0; k < 4; ++k) {
        const T w = taps[n].weight[k];
        if (w == T{0}) continue;
        T* dst = g.data() + (base + taps[n].index[k]) * C;
        for (std::size_t c = 0; c < C; ++c) dst[c] += w * go[c];
      }
    }
  });
}

}  // namespace onix::ad
