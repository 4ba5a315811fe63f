#pragma once

// Selective state-space recurrence with a diagonal state matrix:
//
//   x_k = Abar_k * x_{k-1} + Bbar_k u_k,   y_k = <C_k, x_k> + d * u_k,   x_0 = 0
//
// with Abar = exp(delta * A), Bbar u = delta * B * u (zero-order hold for a
// diagonal A = -exp(a_log)) and delta = softplus(u W_delta + delta_bias).
// Sequences are stored as (N, 1, L, D) tensors, timestep-major.

#include <cmath>
#include <cstddef>
#include <vector>

#include "cfmd/autodiff.hpp"
#include "cfmd/parallel.hpp"
#include "cfmd/tensor.hpp"

namespace cfmd {

template <Scalar T>
struct SsmStaticParams {
  Tensor<T> a_log;       // (1, 1, D, S)
  Tensor<T> w_delta;     // (1, 1, D, D)
  Tensor<T> w_b;         // (1, 1, D, S)
  Tensor<T> w_c;         // (1, 1, D, S)
  Tensor<T> delta_bias;  // (1, 1, 1, D)
  Tensor<T> d_skip;      // (1, 1, 1, D)

  std::size_t width() const { return a_log.shape().h(); }
  std::size_t state() const { return a_log.shape().w(); }
};

/// Per-timestep discretized parameters of one sequence.
template <Scalar T>
struct ScanParams {
  Tensor<T> a_bar;   // (1, L, D, S)
  Tensor<T> bu_bar;  // (1, L, D, S), input already multiplied in
  Tensor<T> c;       // (1, 1, L, S)

  std::size_t length() const { return a_bar.shape().c(); }
  std::size_t width() const { return a_bar.shape().h(); }
  std::size_t state() const { return a_bar.shape().w(); }
};

namespace detail {

template <Scalar T>
void check_sequence(const Tensor<T>& u, std::size_t D, const char* op) {
  const Shape s = u.shape();
  if (s.n() != 1 || s.c() != 1 || s.w() != D) {
    throw ShapeError(std::string(op) + ": expected (1,1,L," + std::to_string(D) + ") sequence, got " + s.str());
  }
  if (s.h() < 1) throw ContractError(std::string(op) + ": sequence length must be >= 1");
}

}  // namespace detail

template <Scalar T>
ScanParams<T> discretize(const Tensor<T>& u, const SsmStaticParams<T>& p) {
  const std::size_t D = p.width(), S = p.state();
  detail::check_sequence(u, D, "discretize");
  const std::size_t L = u.shape().h();
  if (p.w_delta.shape() != Shape(1, 1, D, D) || p.w_b.shape() != Shape(1, 1, D, S) ||
      p.w_c.shape() != Shape(1, 1, D, S) || p.delta_bias.shape() != Shape(1, 1, 1, D)) {
    throw ShapeError("discretize: inconsistent static parameter shapes");
  }
  for (const Tensor<T>* t : {&p.a_log, &p.w_delta, &p.w_b, &p.w_c, &p.delta_bias, &u}) {
    require_finite(*t, "discretize input");
  }
  auto ud = u.data();
  auto wd = p.w_delta.data(), wb = p.w_b.data(), wc = p.w_c.data(), bias = p.delta_bias.data(), al = p.a_log.data();
  ScanParams<T> sp{Tensor<T>(Shape(1, L, D, S)), Tensor<T>(Shape(1, L, D, S)), Tensor<T>(Shape(1, 1, L, S))};
  auto ab = sp.a_bar.mutable_data();
  auto bu = sp.bu_bar.mutable_data();
  auto cc = sp.c.mutable_data();
  std::vector<T> delta(D), b(S);
  for (std::size_t k = 0; k < L; ++k) {
    const T* uk = &ud[k * D];
    for (std::size_t d = 0; d < D; ++d) delta[d] = bias[d];
    std::fill(b.begin(), b.end(), T(0));
    for (std::size_t j = 0; j < D; ++j) {
      for (std::size_t d = 0; d < D; ++d) delta[d] += uk[j] * wd[j * D + d];
      for (std::size_t s = 0; s < S; ++s) {
        b[s] += uk[j] * wb[j * S + s];
        cc[k * S + s] += uk[j] * wc[j * S + s];
      }
    }
    for (std::size_t d = 0; d < D; ++d) {
      const T dt = fn::softplus(delta[d]);
      for (std::size_t s = 0; s < S; ++s) {
        const T a = -std::exp(al[d * S + s]);
        ab[(k * D + d) * S + s] = std::exp(dt * a);
        bu[(k * D + d) * S + s] = dt * b[s] * uk[d];
      }
    }
  }
  require_finite(sp.a_bar, "discretize");
  require_finite(sp.bu_bar, "discretize");
  return sp;
}

/// Reference recurrence; returns y as (1, 1, L, D).
template <Scalar T>
Tensor<T> scan_sequential(const ScanParams<T>& sp, const Tensor<T>& d_skip, const Tensor<T>& u) {
  const std::size_t L = sp.length(), D = sp.width(), S = sp.state();
  detail::check_sequence(u, D, "scan_sequential");
  if (u.shape().h() != L || d_skip.numel() != D) throw ShapeError("scan_sequential: parameter/input mismatch");
  auto ab = sp.a_bar.data(), bu = sp.bu_bar.data(), cc = sp.c.data(), ud = u.data(), dd = d_skip.data();
  Tensor<T> y(Shape(1, 1, L, D));
  auto yd = y.mutable_data();
  std::vector<T> x(D * S, T(0));
  for (std::size_t k = 0; k < L; ++k) {
    const T* ck = &cc[k * S];
    for (std::size_t d = 0; d < D; ++d) {
      T* xd = &x[d * S];
      const std::size_t base = (k * D + d) * S;
      T acc = 0;
      for (std::size_t s = 0; s < S; ++s) {
        xd[s] = ab[base + s] * xd[s] + bu[base + s];
        acc += ck[s] * xd[s];
      }
      yd[k * D + d] = acc + dd[d] * ud[k * D + d];
    }
  }
  return y;
}

/// Same result as scan_sequential, computed in three phases: per-block
/// composition of the affine maps x -> Abar x + b (independent across blocks),
/// a short sequential pass over block carries, and a per-block replay from each
/// carry (independent across blocks). Phases 1 and 3 run on `threads` workers.
template <Scalar T>
Tensor<T> scan_blocked(const ScanParams<T>& sp, const Tensor<T>& d_skip, const Tensor<T>& u, std::size_t block,
                       unsigned threads = num_threads()) {
  if (block < 1) throw ContractError("scan_blocked: block must be >= 1");
  const std::size_t L = sp.length(), D = sp.width(), S = sp.state();
  detail::check_sequence(u, D, "scan_blocked");
  if (u.shape().h() != L || d_skip.numel() != D) throw ShapeError("scan_blocked: parameter/input mismatch");
  const std::size_t nblocks = (L + block - 1) / block;
  const std::size_t DS = D * S;
  auto ab = sp.a_bar.data(), bu = sp.bu_bar.data(), cc = sp.c.data(), ud = u.data(), dd = d_skip.data();

  // Phase 1: block b maps its incoming state x to prod[b] * x + local[b].
  std::vector<T> prod(nblocks * DS, T(1)), local(nblocks * DS, T(0));
  parallel_for(
      nblocks,
      [&](std::size_t b) {
        T* pb = &prod[b * DS];
        T* hb = &local[b * DS];
        const std::size_t end = std::min(L, (b + 1) * block);
        for (std::size_t k = b * block; k < end; ++k) {
          const T* a = &ab[k * DS];
          const T* bb = &bu[k * DS];
          for (std::size_t i = 0; i < DS; ++i) {
            pb[i] = a[i] * pb[i];
            hb[i] = a[i] * hb[i] + bb[i];
          }
        }
      },
      threads);

  // Phase 2: carry[b] is the state entering block b.
  std::vector<T> carry(nblocks * DS, T(0));
  for (std::size_t b = 1; b < nblocks; ++b) {
    const T* prev = &carry[(b - 1) * DS];
    const T* pb = &prod[(b - 1) * DS];
    const T* hb = &local[(b - 1) * DS];
    T* cur = &carry[b * DS];
    for (std::size_t i = 0; i < DS; ++i) cur[i] = pb[i] * prev[i] + hb[i];
  }

  // Phase 3: replay each block from its carry and emit outputs.
  Tensor<T> y(Shape(1, 1, L, D));
  auto yd = y.mutable_data();
  parallel_for(
      nblocks,
      [&](std::size_t b) {
        std::vector<T> x(carry.begin() + static_cast<std::ptrdiff_t>(b * DS),
                         carry.begin() + static_cast<std::ptrdiff_t>((b + 1) * DS));
        const std::size_t end = std::min(L, (b + 1) * block);
        for (std::size_t k = b * block; k < end; ++k) {
          const T* ck = &cc[k * S];
          for (std::size_t d = 0; d < D; ++d) {
            T* xd = &x[d * S];
            const std::size_t base = (k * D + d) * S;
            T acc = 0;
            for (std::size_t s = 0; s < S; ++s) {
              xd[s] = ab[base + s] * xd[s] + bu[base + s];
              acc += ck[s] * xd[s];
            }
            yd[k * D + d] = acc + dd[d] * ud[k * D + d];
          }
        }
      },
      threads);
  return y;
}

// ---------------------------------------------------------------------------
// Differentiable fused discretize + scan over a batch of sequences.

/// u, delta: (N,1,L,E); a: (1,1,E,S), entries < 0; b, c: (N,1,L,S); d_skip: (1,1,1,E).
template <Scalar T>
Var<T> selective_scan(const Var<T>& u, const Var<T>& delta, const Var<T>& a, const Var<T>& b, const Var<T>& c,
                      const Var<T>& d_skip) {
  const Shape us = u.shape();
  const std::size_t N = us.n(), L = us.h(), E = us.w(), S = a.shape().w();
  if (us.c() != 1 || delta.shape() != us || a.shape() != Shape(1, 1, E, S) || b.shape() != Shape(N, 1, L, S) ||
      c.shape() != Shape(N, 1, L, S) || d_skip.shape() != Shape(1, 1, 1, E)) {
    throw ShapeError("selective_scan: inconsistent operand shapes (u " + us.str() + ", a " + a.shape().str() +
                     ", b " + b.shape().str() + ")");
  }
  if (L < 1) throw ContractError("selective_scan: sequence length must be >= 1");
  const Tensor<T> uv = u.value(), dv = delta.value(), av = a.value(), bv = b.value(), cv = c.value(),
                  skv = d_skip.value();
  // States after each step, (N, L, E, S).
  Tensor<T> states(Shape(N, L, E, S));
  Tensor<T> y(us);
  {
    auto xs = states.mutable_data();
    auto yd = y.mutable_data();
    auto ud = uv.data(), dd = dv.data(), ad = av.data(), bd = bv.data(), cd = cv.data(), sk = skv.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < L; ++k) {
        const std::size_t row = (n * L + k);
        const T* bk = &bd[row * S];
        const T* ck = &cd[row * S];
        for (std::size_t e = 0; e < E; ++e) {
          const T dt = dd[row * E + e], ue = ud[row * E + e];
          const T* prev = k ? &xs[((row - 1) * E + e) * S] : nullptr;
          T* cur = &xs[(row * E + e) * S];
          T acc = 0;
          for (std::size_t s = 0; s < S; ++s) {
            const T abar = std::exp(dt * ad[e * S + s]);
            cur[s] = (prev ? abar * prev[s] : T(0)) + dt * bk[s] * ue;
            acc += ck[s] * cur[s];
          }
          yd[row * E + e] = acc + sk[e] * ue;
        }
      }
  }
  const std::size_t ids[6] = {u.id(), delta.id(), a.id(), b.id(), c.id(), d_skip.id()};
  return u.tape().record(std::move(y), {u, delta, a, b, c, d_skip}, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gd = g.data();
    auto xs = states.data();
    auto ud = uv.data(), dd = dv.data(), ad = av.data(), bd = bv.data(), cd = cv.data(), sk = skv.data();
    // Local accumulators; added to the tape buffers of inputs that need them.
    std::vector<T> gu(uv.numel()), gdt(dv.numel()), ga(av.numel()), gb(bv.numel()), gc(cv.numel()), gsk(skv.numel());
    std::vector<T> lam(E * S);
    for (std::size_t n = 0; n < N; ++n) {
      std::fill(lam.begin(), lam.end(), T(0));
      for (std::size_t k = L; k-- > 0;) {
        const std::size_t row = n * L + k;
        const T* bk = &bd[row * S];
        const T* ck = &cd[row * S];
        for (std::size_t e = 0; e < E; ++e) {
          const T gy = gd[row * E + e];
          const T dt = dd[row * E + e], ue = ud[row * E + e];
          gsk[e] += gy * ue;
          T gue = gy * sk[e];
          T gdte = 0;
          const T* cur = &xs[(row * E + e) * S];
          const T* prev = k ? &xs[((row - 1) * E + e) * S] : nullptr;
          T* le = &lam[e * S];
          for (std::size_t s = 0; s < S; ++s) {
            gc[row * S + s] += gy * cur[s];
            le[s] += gy * ck[s];
            const T as = ad[e * S + s];
            const T abar = std::exp(dt * as);
            const T xprev = prev ? prev[s] : T(0);
            const T g_abar = le[s] * xprev * abar;
            gdte += g_abar * as + le[s] * bk[s] * ue;
            ga[e * S + s] += g_abar * dt;
            gb[row * S + s] += le[s] * dt * ue;
            gue += le[s] * dt * bk[s];
            le[s] *= abar;
          }
          gu[row * E + e] += gue;
          gdt[row * E + e] += gdte;
        }
      }
    }
    const std::vector<T>* locals[6] = {&gu, &gdt, &ga, &gb, &gc, &gsk};
    for (int i = 0; i < 6; ++i) {
      if (!tape.requires_grad(ids[i])) continue;
      auto buf = tape.grad_buffer(ids[i]);
      for (std::size_t j = 0; j < buf.size(); ++j) buf[j] += (*locals[i])[j];
    }
  });
}

// ---------------------------------------------------------------------------
// Gated Mamba block

template <Scalar T>
struct MambaBlockParams {
  Var<T> in_proj;     // (1, 1, D, 2E): columns [0, E) main branch, [E, 2E) gate
  Var<T> a_log;       // (1, 1, E, S)
  Var<T> w_delta;     // (1, 1, E, E)
  Var<T> delta_bias;  // (1, 1, 1, E)
  Var<T> w_b;         // (1, 1, E, S)
  Var<T> w_c;         // (1, 1, E, S)
  Var<T> d_skip;      // (1, 1, 1, E)
  Var<T> out_proj;    // (1, 1, E, D)
  bool bidirectional = false;
};

/// x: (N, 1, L, D) -> (N, 1, L, D), residual included.
template <Scalar T>
Var<T> mamba_block(const Var<T>& x, const MambaBlockParams<T>& p) {
  const Shape xs = x.shape();
  if (xs.c() != 1) throw ShapeError("mamba_block expects (N,1,L,D), got " + xs.str());
  if (xs.h() < 1) throw ContractError("mamba_block: sequence length must be >= 1");
  const Shape ip = p.in_proj.shape();
  if (ip.h() != xs.w() || ip.w() % 2 != 0) throw ShapeError("mamba_block in_proj " + ip.str() + " vs input " + xs.str());
  const std::size_t E = ip.w() / 2;
  if (p.out_proj.shape() != Shape(1, 1, E, xs.w())) throw ShapeError("mamba_block out_proj " + p.out_proj.shape().str());

  const Var<T> h = matmul_lastdim(x, p.in_proj);
  const Var<T> u = silu(slice_lastdim(h, 0, E));
  const Var<T> gate = silu(slice_lastdim(h, E, E));
  const Var<T> a = scale(exp(p.a_log), T(-1));

  auto scan = [&](const Var<T>& seq) {
    const Var<T> delta = softplus(add(matmul_lastdim(seq, p.w_delta), p.delta_bias));
    return selective_scan(seq, delta, a, matmul_lastdim(seq, p.w_b), matmul_lastdim(seq, p.w_c), p.d_skip);
  };
  Var<T> y = scan(u);
  if (p.bidirectional) y = scale(add(y, flip_rows(scan(flip_rows(u)))), T(0.5));
  const Var<T> out = matmul_lastdim(mul(y, gate), p.out_proj);
  return add(out, x);
}

}  // namespace cfmd
