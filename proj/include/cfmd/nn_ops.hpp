#pragma once

// Neural operator vocabulary: 1x1 and depthwise 3x3 convolutions, a strided
// dense 3x3 convolution for the backbone, adaptive average pooling, pixel
// shuffle, bilinear resize and bilinear grid sampling.
//
// Sampling grids hold absolute pixel coordinates in input space, channel 0 = x
// (width axis) and channel 1 = y. A grid with 2G channels samples G contiguous
// channel groups of the input independently. Coordinates are clamped to the
// input extent before the 4-neighbour lookup (border padding), and resizing
// uses the half-pixel (align_corners = false) convention.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "cfmd/autodiff.hpp"
#include "cfmd/tensor.hpp"

namespace cfmd {

template <Scalar T>
struct Conv1x1Params {
  Var<T> weight;  // (C_out, C_in, 1, 1)
  std::optional<Var<T>> bias;  // (1, C_out, 1, 1)
};

template <Scalar T>
struct DWConv3x3Params {
  Var<T> weight;  // (C, 1, 3, 3)
  std::optional<Var<T>> bias;  // (1, C, 1, 1)
};

template <Scalar T>
struct Conv3x3Params {
  Var<T> weight;  // (C_out, C_in, 3, 3)
  std::optional<Var<T>> bias;
  std::size_t stride = 1;
};

namespace detail {

template <Scalar T>
void check_bias(const std::optional<Var<T>>& b, std::size_t channels, const char* op) {
  if (b && b->shape() != Shape(1, channels, 1, 1)) {
    throw ShapeError(std::string(op) + " bias must be (1," + std::to_string(channels) + ",1,1), got " +
                     b->shape().str());
  }
}

template <Scalar T>
Var<T> with_bias(Var<T> y, const std::optional<Var<T>>& b) {
  return b ? add(y, *b) : y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv1x1

template <Scalar T>
Var<T> conv1x1(const Var<T>& x, const Conv1x1Params<T>& p) {
  const Shape xs = x.shape(), ws = p.weight.shape();
  if (ws.h() != 1 || ws.w() != 1) throw ShapeError("conv1x1 weight must be (C_out,C_in,1,1), got " + ws.str());
  if (xs.c() != ws.c()) {
    throw ShapeError("conv1x1 expects " + std::to_string(ws.c()) + " input channels, got " + xs.str());
  }
  detail::check_bias(p.bias, ws.n(), "conv1x1");
  const std::size_t N = xs.n(), Ci = xs.c(), Co = ws.n(), P = xs.h() * xs.w();
  const Tensor<T> xv = x.value(), wv = p.weight.value();
  Tensor<T> out(Shape(N, Co, xs.h(), xs.w()));
  {
    auto o = out.mutable_data();
    auto xd = xv.data(), wd = wv.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t co = 0; co < Co; ++co) {
        T* orow = &o[(n * Co + co) * P];
        for (std::size_t ci = 0; ci < Ci; ++ci) {
          const T w = wd[co * Ci + ci];
          const T* xrow = &xd[(n * Ci + ci) * P];
          for (std::size_t q = 0; q < P; ++q) orow[q] += w * xrow[q];
        }
      }
  }
  const std::size_t xid = x.id(), wid = p.weight.id();
  Var<T> y = x.tape().record(std::move(out), {x, p.weight}, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gd = g.data();
    auto xd = xv.data(), wd = wv.data();
    if (tape.requires_grad(xid)) {
      auto gx = tape.grad_buffer(xid);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Co; ++co) {
          const T* grow = &gd[(n * Co + co) * P];
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            const T w = wd[co * Ci + ci];
            T* gxrow = &gx[(n * Ci + ci) * P];
            for (std::size_t q = 0; q < P; ++q) gxrow[q] += w * grow[q];
          }
        }
    }
    if (tape.requires_grad(wid)) {
      auto gw = tape.grad_buffer(wid);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Co; ++co) {
          const T* grow = &gd[(n * Co + co) * P];
          for (std::size_t ci = 0; ci < Ci; ++ci) {
            const T* xrow = &xd[(n * Ci + ci) * P];
            T s = 0;
            for (std::size_t q = 0; q < P; ++q) s += grow[q] * xrow[q];
            gw[co * Ci + ci] += s;
          }
        }
    }
  });
  return detail::with_bias(y, p.bias);
}

// ---------------------------------------------------------------------------
// Depthwise 3x3, zero padding 1

template <Scalar T>
Var<T> dwconv3x3(const Var<T>& x, const DWConv3x3Params<T>& p) {
  const Shape xs = x.shape(), ws = p.weight.shape();
  if (ws != Shape(xs.c(), 1, 3, 3)) {
    throw ShapeError("dwconv3x3 weight " + ws.str() + " does not match input " + xs.str());
  }
  detail::check_bias(p.bias, xs.c(), "dwconv3x3");
  const std::size_t N = xs.n(), C = xs.c();
  const long H = static_cast<long>(xs.h()), W = static_cast<long>(xs.w());
  const Tensor<T> xv = x.value(), wv = p.weight.value();

  // Visits every in-bounds (output, input) pair of tap (ky, kx) for plane nc.
  auto for_tap = [H, W](long ky, long kx, auto&& body) {
    const long dy = ky - 1, dx = kx - 1;
    const long y0 = std::max(0L, -dy), y1 = std::min(H, H - dy);
    const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
    for (long y = y0; y < y1; ++y)
      for (long xx = x0; xx < x1; ++xx) body(y * W + xx, (y + dy) * W + xx + dx);
  };

  Tensor<T> out(xs);
  {
    auto o = out.mutable_data();
    auto xd = xv.data(), wd = wv.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        T* op = &o[(n * C + c) * H * W];
        const T* ip = &xd[(n * C + c) * H * W];
        for (long ky = 0; ky < 3; ++ky)
          for (long kx = 0; kx < 3; ++kx) {
            const T w = wd[c * 9 + ky * 3 + kx];
            for_tap(ky, kx, [&](long oi, long ii) { op[oi] += w * ip[ii]; });
          }
      }
  }
  const std::size_t xid = x.id(), wid = p.weight.id();
  Var<T> y = x.tape().record(std::move(out), {x, p.weight}, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gd = g.data();
    auto xd = xv.data(), wd = wv.data();
    const bool need_x = tape.requires_grad(xid), need_w = tape.requires_grad(wid);
    std::span<T> gx, gw;
    if (need_x) gx = tape.grad_buffer(xid);
    if (need_w) gw = tape.grad_buffer(wid);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c) {
        const T* gp = &gd[(n * C + c) * H * W];
        const T* ip = &xd[(n * C + c) * H * W];
        for (long ky = 0; ky < 3; ++ky)
          for (long kx = 0; kx < 3; ++kx) {
            const T w = wd[c * 9 + ky * 3 + kx];
            if (need_x) {
              T* gxp = &gx[(n * C + c) * H * W];
              for_tap(ky, kx, [&](long oi, long ii) { gxp[ii] += w * gp[oi]; });
            }
            if (need_w) {
              T s = 0;
              for_tap(ky, kx, [&](long oi, long ii) { s += gp[oi] * ip[ii]; });
              gw[c * 9 + ky * 3 + kx] += s;
            }
          }
      }
  });
  return detail::with_bias(y, p.bias);
}

// ---------------------------------------------------------------------------
// Dense 3x3, zero padding 1, integer stride

template <Scalar T>
Var<T> conv3x3(const Var<T>& x, const Conv3x3Params<T>& p) {
  const Shape xs = x.shape(), ws = p.weight.shape();
  if (ws.h() != 3 || ws.w() != 3 || ws.c() != xs.c()) {
    throw ShapeError("conv3x3 weight " + ws.str() + " does not match input " + xs.str());
  }
  if (p.stride < 1) throw ContractError("conv3x3 stride must be >= 1");
  detail::check_bias(p.bias, ws.n(), "conv3x3");
  const std::size_t N = xs.n(), Ci = xs.c(), Co = ws.n();
  const long H = static_cast<long>(xs.h()), W = static_cast<long>(xs.w()), S = static_cast<long>(p.stride);
  const long Ho = (H - 1) / S + 1, Wo = (W - 1) / S + 1;
  const Tensor<T> xv = x.value(), wv = p.weight.value();

  // Valid output range [lo, hi) for which o*S + k - 1 lies inside [0, extent).
  auto range = [S](long k, long extent, long out_extent) {
    long lo = 0;
    while (lo < out_extent && lo * S + k - 1 < 0) ++lo;
    long hi = out_extent;
    while (hi > lo && (hi - 1) * S + k - 1 >= extent) --hi;
    return std::pair{lo, hi};
  };

  Tensor<T> out(Shape(N, Co, Ho, Wo));
  {
    auto o = out.mutable_data();
    auto xd = xv.data(), wd = wv.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t co = 0; co < Co; ++co) {
        T* op = &o[(n * Co + co) * Ho * Wo];
        for (std::size_t ci = 0; ci < Ci; ++ci) {
          const T* ip = &xd[(n * Ci + ci) * H * W];
          for (long ky = 0; ky < 3; ++ky) {
            const auto [ylo, yhi] = range(ky, H, Ho);
            for (long kx = 0; kx < 3; ++kx) {
              const auto [xlo, xhi] = range(kx, W, Wo);
              const T w = wd[((co * Ci + ci) * 3 + ky) * 3 + kx];
              for (long oy = ylo; oy < yhi; ++oy) {
                const T* irow = ip + (oy * S + ky - 1) * W + kx - 1;
                T* orow = op + oy * Wo;
                for (long ox = xlo; ox < xhi; ++ox) orow[ox] += w * irow[ox * S];
              }
            }
          }
        }
      }
  }
  const std::size_t xid = x.id(), wid = p.weight.id();
  Var<T> y = x.tape().record(std::move(out), {x, p.weight}, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gd = g.data();
    auto xd = xv.data(), wd = wv.data();
    const bool need_x = tape.requires_grad(xid), need_w = tape.requires_grad(wid);
    std::span<T> gx, gw;
    if (need_x) gx = tape.grad_buffer(xid);
    if (need_w) gw = tape.grad_buffer(wid);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t co = 0; co < Co; ++co) {
        const T* gp = &gd[(n * Co + co) * Ho * Wo];
        for (std::size_t ci = 0; ci < Ci; ++ci) {
          const T* ip = &xd[(n * Ci + ci) * H * W];
          for (long ky = 0; ky < 3; ++ky) {
            const auto [ylo, yhi] = range(ky, H, Ho);
            for (long kx = 0; kx < 3; ++kx) {
              const auto [xlo, xhi] = range(kx, W, Wo);
              const std::size_t widx = ((co * Ci + ci) * 3 + ky) * 3 + kx;
              const T w = wd[widx];
              T s = 0;
              for (long oy = ylo; oy < yhi; ++oy) {
                const long row = (oy * S + ky - 1) * W + kx - 1;
                const T* grow = gp + oy * Wo;
                if (need_x) {
                  T* gxrow = &gx[(n * Ci + ci) * H * W + row];
                  for (long ox = xlo; ox < xhi; ++ox) gxrow[ox * S] += w * grow[ox];
                }
                if (need_w) {
                  const T* irow = ip + row;
                  for (long ox = xlo; ox < xhi; ++ox) s += grow[ox] * irow[ox * S];
                }
              }
              if (need_w) gw[widx] += s;
            }
          }
        }
      }
  });
  return detail::with_bias(y, p.bias);
}

// ---------------------------------------------------------------------------
// Adaptive average pooling

struct PoolWindow {
  std::size_t begin, end;
};

/// Window [floor(i*in/out), ceil((i+1)*in/out)).
inline PoolWindow pool_window(std::size_t i, std::size_t in, std::size_t out) {
  return {(i * in) / out, ((i + 1) * in + out - 1) / out};
}

template <Scalar T>
Var<T> adaptive_avg_pool(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  const Shape xs = x.shape();
  if (out_h == 0 || out_w == 0) throw ContractError("adaptive_avg_pool output extents must be >= 1");
  if (out_h > xs.h() || out_w > xs.w()) {
    throw ContractError("adaptive_avg_pool output (" + std::to_string(out_h) + "," + std::to_string(out_w) +
                        ") exceeds input " + xs.str());
  }
  const std::size_t planes = xs.n() * xs.c(), H = xs.h(), W = xs.w();
  Tensor<T> out(Shape(xs.n(), xs.c(), out_h, out_w));
  auto o = out.mutable_data();
  auto xd = x.value().data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto wy = pool_window(i, H, out_h);
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto wx = pool_window(j, W, out_w);
        T s = 0;
        for (std::size_t y = wy.begin; y < wy.end; ++y)
          for (std::size_t xx = wx.begin; xx < wx.end; ++xx) s += xd[(p * H + y) * W + xx];
        o[(p * out_h + i) * out_w + j] = s / static_cast<T>((wy.end - wy.begin) * (wx.end - wx.begin));
      }
    }
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gx = tape.grad_buffer(xid);
    auto gd = g.data();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < out_h; ++i) {
        const auto wy = pool_window(i, H, out_h);
        for (std::size_t j = 0; j < out_w; ++j) {
          const auto wx = pool_window(j, W, out_w);
          const T share = gd[(p * out_h + i) * out_w + j] / static_cast<T>((wy.end - wy.begin) * (wx.end - wx.begin));
          for (std::size_t y = wy.begin; y < wy.end; ++y)
            for (std::size_t xx = wx.begin; xx < wx.end; ++xx) gx[(p * H + y) * W + xx] += share;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Pixel shuffle: out[n, c, s*y+dy, s*x+dx] = in[n, c*s*s + dy*s + dx, y, x]

namespace detail {

// Index pairs (shuffled, unshuffled) for a given low-resolution shape.
template <typename F>
void for_each_shuffle(const Shape& low, std::size_t s, F&& f) {
  const std::size_t N = low.n(), C = low.c() / (s * s), H = low.h(), W = low.w();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t dy = 0; dy < s; ++dy)
        for (std::size_t dx = 0; dx < s; ++dx) {
          const std::size_t cin = c * s * s + dy * s + dx;
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t xx = 0; xx < W; ++xx) {
              const std::size_t lo = ((n * low.c() + cin) * H + y) * W + xx;
              const std::size_t hi = ((n * C + c) * H * s + s * y + dy) * W * s + s * xx + dx;
              f(hi, lo);
            }
        }
}

}  // namespace detail

template <Scalar T>
Var<T> pixel_shuffle(const Var<T>& x, std::size_t s) {
  const Shape xs = x.shape();
  if (s == 0 || xs.c() % (s * s) != 0) {
    throw ShapeError("pixel_shuffle: " + std::to_string(xs.c()) + " channels not divisible by s^2 for s=" +
                     std::to_string(s));
  }
  Tensor<T> out(Shape(xs.n(), xs.c() / (s * s), xs.h() * s, xs.w() * s));
  auto o = out.mutable_data();
  auto xd = x.value().data();
  detail::for_each_shuffle(xs, s, [&](std::size_t hi, std::size_t lo) { o[hi] = xd[lo]; });
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gx = tape.grad_buffer(xid);
    auto gd = g.data();
    detail::for_each_shuffle(xs, s, [&](std::size_t hi, std::size_t lo) { gx[lo] += gd[hi]; });
  });
}

template <Scalar T>
Var<T> pixel_unshuffle(const Var<T>& x, std::size_t s) {
  const Shape xs = x.shape();
  if (s == 0 || xs.h() % s != 0 || xs.w() % s != 0) {
    throw ShapeError("pixel_unshuffle: spatial extents of " + xs.str() + " not divisible by " + std::to_string(s));
  }
  const Shape low(xs.n(), xs.c() * s * s, xs.h() / s, xs.w() / s);
  Tensor<T> out(low);
  auto o = out.mutable_data();
  auto xd = x.value().data();
  detail::for_each_shuffle(low, s, [&](std::size_t hi, std::size_t lo) { o[lo] = xd[hi]; });
  const std::size_t xid = x.id();
  return x.tape().record(std::move(out), {x}, [=](const Tensor<T>& g, Tape<T>& tape) {
    auto gx = tape.grad_buffer(xid);
    auto gd = g.data();
    detail::for_each_shuffle(low, s, [&](std::size_t hi, std::size_t lo) { gx[hi] += gd[lo]; });
  });
}

// ---------------------------------------------------------------------------
// Bilinear grid sampling

namespace detail {

template <Scalar T>
struct BilinearTap {
  std::size_t i00, i01, i10, i11;
  T wx1, wy1;
  T dclamp_x, dclamp_y;  // derivative of the clamp, 0 outside the valid range
};

template <Scalar T>
BilinearTap<T> bilinear_tap(T gx, T gy, std::size_t H, std::size_t W) {
  BilinearTap<T> t{};
  const T maxx = static_cast<T>(W - 1), maxy = static_cast<T>(H - 1);
  t.dclamp_x = (gx >= 0 && gx <= maxx) ? T(1) : T(0);
  t.dclamp_y = (gy >= 0 && gy <= maxy) ? T(1) : T(0);
  const T sx = std::clamp(gx, T(0), maxx), sy = std::clamp(gy, T(0), maxy);
  const std::size_t x0 = std::min(static_cast<std::size_t>(std::floor(sx)), W - 1);
  const std::size_t y0 = std::min(static_cast<std::size_t>(std::floor(sy)), H - 1);
  const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
  t.wx1 = sx - static_cast<T>(x0);
  t.wy1 = sy - static_cast<T>(y0);
  t.i00 = y0 * W + x0;
  t.i01 = y0 * W + x1;
  t.i10 = y1 * W + x0;
  t.i11 = y1 * W + x1;
  return t;
}

}  // namespace detail

/// Samples x at grid coordinates. grid is (N or 1, 2G, H_out, W_out); input
/// channel c uses the coordinate pair of group c / (C / G).
template <Scalar T>
Var<T> grid_sample_bilinear(const Var<T>& x, const Var<T>& grid) {
  const Shape xs = x.shape(), gs = grid.shape();
  if (gs.c() == 0 || gs.c() % 2 != 0) throw ShapeError("grid must have 2G channels, got " + gs.str());
  const std::size_t G = gs.c() / 2;
  if (xs.c() % G != 0) throw ShapeError("input channels " + xs.str() + " not divisible into " + std::to_string(G) + " groups");
  if (gs.n() != xs.n() && gs.n() != 1) throw ShapeError("grid batch " + gs.str() + " vs input " + xs.str());
  if (xs.h() == 0 || xs.w() == 0) throw ShapeError("grid_sample on empty input " + xs.str());
  const std::size_t N = xs.n(), C = xs.c(), Cg = C / G, H = xs.h(), W = xs.w();
  const std::size_t Ho = gs.h(), Wo = gs.w(), P = Ho * Wo;
  const Tensor<T> xv = x.value(), gv = grid.value();
  const bool grid_broadcast = gs.n() == 1 && N != 1;

  auto taps_for = [=](std::size_t n, std::size_t g) {
    auto gd = gv.data();
    const std::size_t gn = grid_broadcast ? 0 : n;
    const T* gxp = &gd[((gn * 2 * G) + 2 * g) * P];
    const T* gyp = gxp + P;
    std::vector<detail::BilinearTap<T>> taps(P);
    for (std::size_t q = 0; q < P; ++q) taps[q] = detail::bilinear_tap(gxp[q], gyp[q], H, W);
    return taps;
  };

  Tensor<T> out(Shape(N, C, Ho, Wo));
  {
    auto o = out.mutable_data();
    auto xd = xv.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t g = 0; g < G; ++g) {
        const auto taps = taps_for(n, g);
        for (std::size_t c = g * Cg; c < (g + 1) * Cg; ++c) {
          const T* ip = &xd[(n * C + c) * H * W];
          T* op = &o[(n * C + c) * P];
          for (std::size_t q = 0; q < P; ++q) {
            const auto& t = taps[q];
            const T top = ip[t.i00] + t.wx1 * (ip[t.i01] - ip[t.i00]);
            const T bot = ip[t.i10] + t.wx1 * (ip[t.i11] - ip[t.i10]);
            op[q] = top + t.wy1 * (bot - top);
          }
        }
      }
  }
  const std::size_t xid = x.id(), gid = grid.id();
  return x.tape().record(std::move(out), {x, grid}, [=](const Tensor<T>& gout, Tape<T>& tape) {
    auto go = gout.data();
    auto xd = xv.data();
    const bool need_x = tape.requires_grad(xid), need_g = tape.requires_grad(gid);
    std::span<T> gx, gg;
    if (need_x) gx = tape.grad_buffer(xid);
    if (need_g) gg = tape.grad_buffer(gid);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t g = 0; g < G; ++g) {
        const auto taps = taps_for(n, g);
        const std::size_t gn = grid_broadcast ? 0 : n;
        for (std::size_t c = g * Cg; c < (g + 1) * Cg; ++c) {
          const T* ip = &xd[(n * C + c) * H * W];
          const T* gp = &go[(n * C + c) * P];
          for (std::size_t q = 0; q < P; ++q) {
            const auto& t = taps[q];
            const T w = gp[q];
            if (need_x) {
              T* gxp = &gx[(n * C + c) * H * W];
              const T wx0 = T(1) - t.wx1, wy0 = T(1) - t.wy1;
              gxp[t.i00] += w * wx0 * wy0;
              gxp[t.i01] += w * t.wx1 * wy0;
              gxp[t.i10] += w * wx0 * t.wy1;
              gxp[t.i11] += w * t.wx1 * t.wy1;
            }
            if (need_g) {
              const T top_dx = ip[t.i01] - ip[t.i00];
              const T bot_dx = ip[t.i11] - ip[t.i10];
              const T top = ip[t.i00] + t.wx1 * top_dx;
              const T bot = ip[t.i10] + t.wx1 * bot_dx;
              const T d_dx = top_dx + t.wy1 * (bot_dx - top_dx);
              const T d_dy = bot - top;
              T* ggx = &gg[((gn * 2 * G) + 2 * g) * P];
              ggx[q] += w * d_dx * t.dclamp_x;
              ggx[P + q] += w * d_dy * t.dclamp_y;
            }
          }
        }
      }
  });
}

/// Source grid (1, 2, s*H, s*W) of an s-fold half-pixel resize.
template <Scalar T>
Tensor<T> resize_grid(std::size_t H, std::size_t W, std::size_t s) {
  if (s < 1) throw ContractError("resize scale must be >= 1");
  const std::size_t Ho = H * s, Wo = W * s;
  Tensor<T> g(Shape(1, 2, Ho, Wo));
  auto d = g.mutable_data();
  for (std::size_t i = 0; i < Ho; ++i)
    for (std::size_t j = 0; j < Wo; ++j) {
      d[i * Wo + j] = static_cast<T>((static_cast<double>(j) + 0.5) / static_cast<double>(s) - 0.5);
      d[Ho * Wo + i * Wo + j] = static_cast<T>((static_cast<double>(i) + 0.5) / static_cast<double>(s) - 0.5);
    }
  return g;
}

template <Scalar T>
Var<T> bilinear_resize(const Var<T>& x, std::size_t s) {
  const Shape xs = x.shape();
  if (s == 1) return x;
  return grid_sample_bilinear(x, x.tape().constant(resize_grid<T>(xs.h(), xs.w(), s)));
}

}  // namespace cfmd
