#pragma once

// Tape-based reverse-mode differentiation over rank-4 tensors.
//
// A Tape is built during the forward pass. Every node records its value and,
// when any input requires a gradient, a closure that scatters the node's
// gradient into its inputs. Inputs always precede outputs on the tape, so a
// single reverse sweep over node ids is a reverse topological order.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cfmd/error.hpp"
#include "cfmd/tensor.hpp"

namespace cfmd {

template <Scalar T>
class Tape;

template <Scalar T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Tape<T>& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <Scalar T>
using GradMap = std::map<std::size_t, Tensor<T>>;

template <Scalar T>
class Tape {
 public:
  /// Receives the node's accumulated output gradient.
  using Backward = std::function<void(const Tensor<T>& grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, true, nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Appends an op result. The closure is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    bool rg = false;
    for (const Var<T>& v : inputs) rg = rg || requires_grad(v.id());
    return record_if(std::move(value), rg, std::move(backward));
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, Backward backward) {
    bool rg = false;
    for (const Var<T>& v : inputs) rg = rg || requires_grad(v.id());
    return record_if(std::move(value), rg, std::move(backward));
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulator of a node, zero-initialized on first access. Only
  /// valid for nodes that require a gradient.
  std::span<T> grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) throw Error(ErrorKind::internal, "gradient requested for constant node");
    if (n.grad.empty()) n.grad.assign(n.value.numel(), T(0));
    return {n.grad.data(), n.grad.size()};
  }

  /// Runs the reverse sweep from a scalar root and returns gradients for every
  /// leaf that requires one (zero when the leaf does not reach the root).
  GradMap<T> backward(const Var<T>& root) {
    if (root.shape() != Shape(1, 1, 1, 1)) {
      throw ContractError("backward root must be scalar, got " + root.shape().str());
    }
    if (swept_) throw ContractError("tape already consumed by backward");
    swept_ = true;
    GradMap<T> grads;
    if (requires_grad(root.id())) {
      grad_buffer(root.id())[0] = T(1);
      for (std::size_t id = root.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (n.leaf || !n.backward || n.grad.empty()) continue;
        const Tensor<T> g(n.value.shape(), std::move(n.grad));
        n.grad.clear();
        n.backward(g, *this);
        n.backward = nullptr;
      }
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (!n.leaf || !n.requires_grad) continue;
      if (n.grad.empty()) {
        grads.emplace(id, zeros_like(n.value));
      } else {
        grads.emplace(id, Tensor<T>(n.value.shape(), std::move(n.grad)));
      }
    }
    for (Node& n : nodes_) n.backward = nullptr;
    return grads;
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad;
    bool leaf;
    Backward backward;
  };

  Var<T> record_if(Tensor<T> value, bool rg, Backward backward) {
    nodes_.push_back(Node{std::move(value), {}, rg, false, rg ? std::move(backward) : nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool swept_ = false;
};

// ---------------------------------------------------------------------------
// Scalar functions shared by forward kernels and oracles.

namespace fn {

template <Scalar T>
T sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

/// Exact x * Phi(x).
template <Scalar T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <Scalar T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <Scalar T>
T softplus(T x) {
  return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <Scalar T>
T silu(T x) {
  return x * sigmoid(x);
}

template <Scalar T>
T silu_grad(T x) {
  const T s = sigmoid(x);
  return s * (T(1) + x * (T(1) - s));
}

}  // namespace fn

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

struct BroadcastPlan {
  Shape out;
  std::array<std::size_t, 4> stride_a{}, stride_b{};
  bool same = false;
};

inline std::array<std::size_t, 4> strides_of(const Shape& s) {
  return {s.c() * s.h() * s.w(), s.h() * s.w(), s.w(), 1};
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const auto sa = strides_of(a), sb = strides_of(b);
  for (int i = 0; i < 4; ++i) {
    if (a[i] == b[i]) {
      p.out.dims[i] = a[i];
      p.stride_a[i] = sa[i];
      p.stride_b[i] = sb[i];
    } else if (b[i] == 1) {
      p.out.dims[i] = a[i];
      p.stride_a[i] = sa[i];
      p.stride_b[i] = 0;
    } else if (a[i] == 1) {
      p.out.dims[i] = b[i];
      p.stride_a[i] = 0;
      p.stride_b[i] = sb[i];
    } else {
      throw ShapeError(std::string(op) + ": " + a.str() + " and " + b.str() + " do not broadcast");
    }
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  if (p.same) {
    const std::size_t n = p.out.numel();
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  std::size_t o = 0;
  for (std::size_t n = 0; n < p.out[0]; ++n)
    for (std::size_t c = 0; c < p.out[1]; ++c)
      for (std::size_t h = 0; h < p.out[2]; ++h) {
        std::size_t ia = n * p.stride_a[0] + c * p.stride_a[1] + h * p.stride_a[2];
        std::size_t ib = n * p.stride_b[0] + c * p.stride_b[1] + h * p.stride_b[2];
        for (std::size_t w = 0; w < p.out[3]; ++w, ++o) {
          f(o, ia + w * p.stride_a[3], ib + w * p.stride_b[3]);
        }
      }
}

template <Scalar T, typename Fwd, typename DFwd>
Var<T> unary(const Var<T>& x, Fwd fwd, DFwd dfdx) {
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape());
  auto yd = y.mutable_data();
  auto xd = xv.data();
  for (std::size_t i = 0; i < yd.size(); ++i) yd[i] = fwd(xd[i]);
  const std::size_t xid = x.id();
  return x.tape().record(std::move(y), {x}, [xv, xid, dfdx](const Tensor<T>& g, Tape<T>& tape) {
    auto gx = tape.grad_buffer(xid);
    auto xd = xv.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gd[i] * dfdx(xd[i]);
  });
}

}  // namespace detail

template <Scalar T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const auto plan = detail::plan_broadcast(a.shape(), b.shape(), "add");
  Tensor<T> out(plan.out);
  auto o = out.mutable_data();
  auto ad = a.value().data(), bd = b.value().data();
  detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = ad[ia] + bd[ib]; });
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(out), {a, b}, [plan, aid, bid](const Tensor<T>& g, Tape<T>& tape) {
    auto gd = g.data();
    if (tape.requires_grad(aid)) {
      auto ga = tape.grad_buffer(aid);
      detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += gd[i]; });
    }
    if (tape.requires_grad(bid)) {
      auto gb = tape.grad_buffer(bid);
      detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += gd[i]; });
    }
  });
}

template <Scalar T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  const auto plan = detail::plan_broadcast(a.shape(), b.shape(), "sub");
  Tensor<T> out(plan.out);
  auto o = out.mutable_data();
  auto ad = a.value().data(), bd = b.value().data();
  detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = ad[ia] - bd[ib]; });
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(out), {a, b}, [plan, aid, bid](const Tensor<T>& g, Tape<T>& tape) {
    auto gd = g.data();
    if (tape.requires_grad(aid)) {
      auto ga = tape.grad_buffer(aid);
      detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += gd[i]; });
    }
    if (tape.requires_grad(bid)) {
      auto gb = tape.grad_buffer(bid);
      detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] -= gd[i]; });
    }
  });
}

template <Scalar T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const auto plan = detail::plan_broadcast(a.shape(), b.shape(), "mul");
  Tensor<T> out(plan.out);
  auto o = out.mutable_data();
  const Tensor<T> av = a.value(), bv = b.value();
  auto ad = av.data(), bd = bv.data();
  detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = ad[ia] * bd[ib]; });
  const std::size_t aid = a.id(), bid = b.id();
  return a.tape().record(std::move(out), {a, b}, [plan, aid, bid, av, bv](const Tensor<T>& g, Tape<T>& tape) {
    auto gd = g.data();
    auto ad = av.data(), bd = bv.data();
    if (tape.requires_grad(aid)) {
      auto ga = tape.grad_buffer(aid);
      detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += gd[i] * bd[ib]; });
    }
    if (tape.requires_grad(bid)) {
      auto gb = tape.grad_buffer(bid);
      detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += gd[i] * ad[ia]; });
    }
  });
}

template <Scalar T>
Var<T> scale(const Var<T>& x, T k) {
  return detail::unary(x, [k](T v) { return k * v; }, [k](T) { return k; });
}

template <Scalar T>
Var<T> exp(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <Scalar T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(x, [](T v) { return fn::sigmoid(v); }, [](T v) {
    const T s = fn::sigmoid(v);
    return s * (T(1) - s);
  });
}

template <Scalar T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T v) {
    const T t = std::tanh(v);
    return T(1) - t * t;
  });
}

template <Scalar T>
Var<T> gelu(const Var<T>& x) {
  return detail::unary(x, [](T v) { return fn::gelu(v); }, [](T v) { return fn::gelu_grad(v); });
}

template <Scalar T>
Var<T> silu(const Var<T>& x) {
  return detail::unary(x, [](T v) { return fn::silu(v); }, [](T v) { return fn::silu_grad(v); });
}

template <Scalar T>
Var<T> softplus(const Var<T>& x) {
  return detail::unary(x, [](T v) { return fn::softplus(v); }, [](T v) { return fn::sigmoid(v); });
}

enum class Elementwise { add, sub, mul, sigmoid, tanh, gelu, silu, softplus, scale };

/// Dispatch form of the elementwise family; `b` is used by binary ops, `k` by scale.
template <Scalar T>
Var<T> elementwise(Elementwise op, const Var<T>& a, const Var<T>* b = nullptr, T k = T(1)) {
  auto need_b = [&]() -> const Var<T>& {
    if (!b) throw ContractError("binary elementwise op needs a second operand");
    return *b;
  };
  switch (op) {
    case Elementwise::add: return add(a, need_b());
    case Elementwise::sub: return sub(a, need_b());
    case Elementwise::mul: return mul(a, need_b());
    case Elementwise::sigmoid: return sigmoid(a);
    case Elementwise::tanh: return tanh(a);
    case Elementwise::gelu: return gelu(a);
    case Elementwise::silu: return silu(a);
    case Elementwise::softplus: return softplus(a);
    case Elementwise::scale: return scale(a, k);
  }
  throw Error(ErrorKind::internal, "unknown elementwise op");
}

// ---------------------------------------------------------------------------
// Reductions and layout

template <Scalar T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  const std::size_t xid = x.id();
  return x.tape().record(Tensor<T>(Shape(1, 1, 1, 1), s), {x}, [xid](const Tensor<T>& g, Tape<T>& tape) {
    const T gv = g[0];
    for (T& v : tape.grad_buffer(xid)) v += gv;
  });
}

template <Scalar T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().numel()));
}

template <Scalar T>
Var<T> reshape(const Var<T>& x, Shape s) {
  const std::size_t xid = x.id();
  return x.tape().record(x.value().reshaped(s), {x}, [xid](const Tensor<T>& g, Tape<T>& tape) {
    auto gx = tape.grad_buffer(xid);
    auto gd = g.data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gd[i];
  });
}

/// (N, C, M, K) x (1, 1, K, L) -> (N, C, M, L).
template <Scalar T>
Var<T> matmul_lastdim(const Var<T>& a, const Var<T>& w) {
  const Shape as = a.shape(), ws = w.shape();
  if (ws.n() != 1 || ws.c() != 1) throw ShapeError("matmul weight must be (1,1,K,L), got " + ws.str());
  if (as.w() != ws.h()) throw ShapeError("matmul inner extents " + as.str() + " x " + ws.str());
  const std::size_t rows = as.n() * as.c() * as.h(), K = ws.h(), L = ws.w();
  const Tensor<T> av = a.value(), wv = w.value();
  Tensor<T> out(Shape(as.n(), as.c(), as.h(), L));
  {
    auto o = out.mutable_data();
    auto ad = av.data(), wd = wv.data();
    for (std::size_t r = 0; r < rows; ++r) {
      T* orow = &o[r * L];
      const T* arow = &ad[r * K];
      for (std::size_t k = 0; k < K; ++k) {
        const T s = arow[k];
        const T* wrow = &wd[k * L];
        for (std::size_t l = 0; l < L; ++l) orow[l] += s * wrow[l];
      }
    }
  }
  const std::size_t aid = a.id(), wid = w.id();
  return a.tape().record(std::move(out), {a, w}, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gd = g.data();
    auto ad = av.data(), wd = wv.data();
    if (tape.requires_grad(aid)) {
      auto ga = tape.grad_buffer(aid);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* grow = &gd[r * L];
        for (std::size_t k = 0; k < K; ++k) {
          const T* wrow = &wd[k * L];
          T s = 0;
          for (std::size_t l = 0; l < L; ++l) s += grow[l] * wrow[l];
          ga[r * K + k] += s;
        }
      }
    }
    if (tape.requires_grad(wid)) {
      auto gw = tape.grad_buffer(wid);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* grow = &gd[r * L];
        const T* arow = &ad[r * K];
        for (std::size_t k = 0; k < K; ++k) {
          const T s = arow[k];
          T* gwrow = &gw[k * L];
          for (std::size_t l = 0; l < L; ++l) gwrow[l] += s * grow[l];
        }
      }
    }
  });
}

/// Columns [start, start+len) of the last axis.
template <Scalar T>
Var<T> slice_lastdim(const Var<T>& x, std::size_t start, std::size_t len) {
  const Shape s = x.shape();
  if (start + len > s.w()) throw ShapeError("slice_lastdim out of range for " + s.str());
  const std::size_t rows = s.n() * s.c() * s.h(), W = s.w();
  Tensor<T> out(Shape(s.n(), s.c(), s.h(), len));
  auto o = out.mutable_data();
  auto xd = x.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < len; ++j) o[r * len + j] = xd[r * W + start + j];
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gx = tape.grad_buffer(xid);
    auto gd = g.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < len; ++j) gx[r * W + start + j] += gd[r * len + j];
  });
}

/// Rows [start, start+len) of the H axis.
template <Scalar T>
Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t len) {
  const Shape s = x.shape();
  if (start + len > s.h()) throw ShapeError("slice_rows out of range for " + s.str());
  const std::size_t planes = s.n() * s.c(), H = s.h(), W = s.w();
  Tensor<T> out(Shape(s.n(), s.c(), len, W));
  auto o = out.mutable_data();
  auto xd = x.value().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < len * W; ++i) o[p * len * W + i] = xd[(p * H + start) * W + i];
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gx = tape.grad_buffer(xid);
    auto gd = g.data();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < len * W; ++i) gx[(p * H + start) * W + i] += gd[p * len * W + i];
  });
}

/// Concatenation along the H axis.
template <Scalar T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows of nothing");
  const Shape s0 = parts[0].shape();
  std::size_t H = 0;
  for (const auto& p : parts) {
    const Shape s = p.shape();
    if (s.n() != s0.n() || s.c() != s0.c() || s.w() != s0.w())
      throw ShapeError("concat_rows " + s0.str() + " vs " + s.str());
    H += s.h();
  }
  const std::size_t planes = s0.n() * s0.c(), W = s0.w();
  Tensor<T> out(Shape(s0.n(), s0.c(), H, W));
  auto o = out.mutable_data();
  std::vector<std::pair<std::size_t, std::size_t>> spans;  // (row offset, rows)
  std::size_t row = 0;
  for (const auto& part : parts) {
    const std::size_t h = part.shape().h();
    auto pd = part.value().data();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < h * W; ++i) o[(p * H + row) * W + i] = pd[p * h * W + i];
    spans.emplace_back(row, h);
    row += h;
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts[0].tape().record(std::move(out), parts, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gd = g.data();
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tape.requires_grad(ids[k])) continue;
      auto gp = tape.grad_buffer(ids[k]);
      const auto [r0, h] = spans[k];
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < h * W; ++i) gp[p * h * W + i] += gd[(p * H + r0) * W + i];
    }
  });
}

/// Reverses the H axis.
template <Scalar T>
Var<T> flip_rows(const Var<T>& x) {
  const Shape s = x.shape();
  const std::size_t planes = s.n() * s.c(), H = s.h(), W = s.w();
  Tensor<T> out(s);
  auto o = out.mutable_data();
  auto xd = x.value().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) o[(p * H + h) * W + w] = xd[(p * H + (H - 1 - h)) * W + w];
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gx = tape.grad_buffer(xid);
    auto gd = g.data();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) gx[(p * H + (H - 1 - h)) * W + w] += gd[(p * H + h) * W + w];
  });
}

/// Mean over the H axis: (N, C, H, W) -> (N, C, 1, W).
template <Scalar T>
Var<T> mean_rows(const Var<T>& x) {
  const Shape s = x.shape();
  const std::size_t planes = s.n() * s.c(), H = s.h(), W = s.w();
  if (H == 0) throw ContractError("mean_rows over zero rows");
  Tensor<T> out(Shape(s.n(), s.c(), 1, W));
  auto o = out.mutable_data();
  auto xd = x.value().data();
  const T inv = T(1) / static_cast<T>(H);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) o[p * W + w] += xd[(p * H + h) * W + w];
    for (std::size_t w = 0; w < W; ++w) o[p * W + w] *= inv;
  }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gx = tape.grad_buffer(xid);
    auto gd = g.data();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) gx[(p * H + h) * W + w] += gd[p * W + w] * inv;
  });
}

/// Feature map to token sequence: (N, C, H, W) -> (N, 1, H*W, C), row-major tokens.
template <Scalar T>
Var<T> to_tokens(const Var<T>& x) {
  const Shape s = x.shape();
  const std::size_t N = s.n(), C = s.c(), P = s.h() * s.w();
  Tensor<T> out(Shape(N, 1, P, C));
  auto o = out.mutable_data();
  auto xd = x.value().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) o[(n * P + p) * C + c] = xd[(n * C + c) * P + p];
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gx = tape.grad_buffer(xid);
    auto gd = g.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t p = 0; p < P; ++p) gx[(n * C + c) * P + p] += gd[(n * P + p) * C + c];
  });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle

/// Fourth-order central differences, f'(x) ~ (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h.
/// The wider stencil tolerates a larger h, which keeps cancellation error small
/// for gradient components far below the function's magnitude.
struct GradCheckOptions {
  double step = 1e-4;
  /// Components checked per input; all of them when the input is smaller.
  std::size_t max_components = 64;
  std::uint64_t seed = 1234;
  /// Multiplies the analytic gradient before comparison (negative-control hook).
  double analytic_scale = 1.0;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  std::size_t checked = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0, worst_numeric = 0;
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Builds a scalar from a set of named inputs bound on a tape.
template <Scalar T>
using MultiFn = std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)>;

/// Central-difference check of every input of `f`. Returns one result per input.
template <Scalar T>
std::vector<GradCheckResult> finite_diff_check_all(const MultiFn<T>& f, const std::vector<Tensor<T>>& inputs,
                                                   const std::vector<std::string>& names,
                                                   const GradCheckOptions& opt = {}) {
  std::vector<Tensor<T>> analytic;
  {
    Tape<T> tape;
    std::vector<Var<T>> vars;
    for (const auto& t : inputs) vars.push_back(tape.leaf(t, true));
    Var<T> root = f(tape, vars);
    auto grads = tape.backward(root);
    for (const auto& v : vars) analytic.push_back(grads.at(v.id()));
  }
  auto eval = [&](const std::vector<Tensor<T>>& xs) {
    Tape<T> tape;
    std::vector<Var<T>> vars;
    for (const auto& t : xs) vars.push_back(tape.constant(t));
    const double v = static_cast<double>(f(tape, vars).value()[0]);
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite function value");
    return v;
  };
  Rng rng(opt.seed);
  std::vector<GradCheckResult> results;
  std::vector<Tensor<T>> work = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    GradCheckResult r;
    r.name = k < names.size() ? names[k] : std::to_string(k);
    const std::size_t n = inputs[k].numel();
    std::vector<std::size_t> idx;
    if (n <= opt.max_components) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < opt.max_components; ++i)
        idx.push_back(static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1)));
    }
    for (std::size_t i : idx) {
      const T orig = inputs[k][i];
      auto at = [&](double m) {
        work[k].mutable_data()[i] = orig + static_cast<T>(m * opt.step);
        return eval(work);
      };
      const double f2 = at(2), f1 = at(1), m1 = at(-1), m2 = at(-2);
      work[k].mutable_data()[i] = orig;
      const double numeric = (8 * (f1 - m1) - (f2 - m2)) / (12 * opt.step);
      const double a = static_cast<double>(analytic[k][i]) * opt.analytic_scale;
      const double e = relative_error(a, numeric);
      if (e >= r.max_rel_error) {
        r.max_rel_error = e;
        r.worst_index = i;
        r.worst_analytic = a;
        r.worst_numeric = numeric;
      }
      ++r.checked;
    }
    results.push_back(r);
  }
  return results;
}

/// Single-input form: f maps x to a scalar.
template <Scalar T>
GradCheckResult finite_diff_check(const std::function<Var<T>(Tape<T>&, const Var<T>&)>& f, const Tensor<T>& x,
                                  const GradCheckOptions& opt = {}) {
  MultiFn<T> g = [&](Tape<T>& tape, const std::vector<Var<T>>& v) { return f(tape, v[0]); };
  return finite_diff_check_all<T>(g, {x}, {"x"}, opt)[0];
}

/// Fixed random projection to a scalar, so every output element carries an O(1) weight.
template <Scalar T>
Var<T> random_projection(const Var<T>& y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> w = tensor_create<T>(y.shape(), Normal{0.0, 1.0, &rng});
  return sum(mul(y, y.tape().constant(std::move(w))));
}

}  // namespace cfmd
