#pragma once

// Dynamic upsampling with bounded learned offsets, and the multi-scale
// redistribution of the aggregated feature map into a pyramid.
//
// The upsampler predicts a sub-pixel offset for every output location and
// feature group, adds it to the half-pixel bilinear source grid and samples the
// input bilinearly. With a zero offset projection it reduces exactly to
// bilinear_resize.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cfmd/autodiff.hpp"
#include "cfmd/cflma.hpp"
#include "cfmd/nn_ops.hpp"

namespace cfmd {

enum class OffsetVariant {
  tanh_bounded,   // O = alpha * tanh(W_o F_mid)
  sigmoid_scope,  // O = 0.5 * sigmoid(W_1 F) * (W_2 F), F the raw input
};

enum class OffsetOrder {
  linear_then_shuffle,  // predict 2 s^2 G channels at low resolution, then pixel-shuffle
  shuffle_then_linear,  // pixel-shuffle features first, predict 2 G channels at high resolution
};

template <Scalar T>
struct DumParams {
  Conv1x1Params<T> conv;   // C -> C'
  DWConv3x3Params<T> dw;   // C'
  Var<T> offset_w;         // tanh variant: (2 s^2 G, C', 1, 1) or (2 G, C'/s^2, 1, 1)
  Var<T> scope_w1;         // sigmoid-scope: (2 s^2 G, C, 1, 1) or (2 G, C/s^2, 1, 1)
  Var<T> scope_w2;
  double alpha = 0.25;
  std::size_t scale = 2;
  std::size_t groups = 4;
  OffsetVariant variant = OffsetVariant::tanh_bounded;
  OffsetOrder order = OffsetOrder::linear_then_shuffle;
};

template <Scalar T>
struct OffsetField {
  Var<T> raw;            // (N, 2 s^2 G, H, W); equals `field` for shuffle_then_linear
  Var<T> reconstructed;  // (N, 2 G, s H, s W): channel 2g is x, 2g + 1 is y of group g
};

/// F_mid = DWConv3x3(GeLU(Conv1x1(F_in))).
template <Scalar T>
Var<T> dum_mid(const Var<T>& f_in, const DumParams<T>& p) {
  return dwconv3x3(gelu(conv1x1(f_in, p.conv)), p.dw);
}

namespace detail {

template <Scalar T>
Var<T> project(const Var<T>& x, const Var<T>& w) {
  return conv1x1(x, Conv1x1Params<T>{w, std::nullopt});
}

}  // namespace detail

/// Offsets from F_mid (tanh-bounded) or from the raw input (sigmoid-scope).
template <Scalar T>
OffsetField<T> gen_offsets(const Var<T>& source, const DumParams<T>& p) {
  const std::size_t s = p.scale;
  Var<T> feat = source;
  if (p.order == OffsetOrder::shuffle_then_linear && s > 1) {
    if (feat.shape().c() % (s * s) != 0) {
      throw ContractError("gen_offsets: shuffle_then_linear needs channels divisible by s^2 = " + std::to_string(s * s));
    }
    feat = pixel_shuffle(feat, s);
  }
  Var<T> o;
  if (p.variant == OffsetVariant::tanh_bounded) {
    o = scale(tanh(detail::project(feat, p.offset_w)), static_cast<T>(p.alpha));
  } else {
    const Var<T> gate = scale(sigmoid(detail::project(feat, p.scope_w1)), T(0.5));
    o = mul(gate, detail::project(feat, p.scope_w2));
  }
  OffsetField<T> f;
  f.raw = o;
  f.reconstructed = (p.order == OffsetOrder::linear_then_shuffle && s > 1) ? pixel_shuffle(o, s) : o;
  const Shape rs = f.reconstructed.shape(), ss = source.shape();
  if (rs.c() != 2 * p.groups || rs.h() != ss.h() * s || rs.w() != ss.w() * s) {
    throw ShapeError("gen_offsets: offset field " + rs.str() + " does not match " + std::to_string(p.groups) +
                     " groups at scale " + std::to_string(s));
  }
  return f;
}

/// Bilinear source grid tiled over G groups: (1, 2G, sH, sW).
template <Scalar T>
Tensor<T> group_grid(std::size_t H, std::size_t W, std::size_t s, std::size_t groups) {
  const Tensor<T> g = resize_grid<T>(H, W, s);
  const std::size_t plane = 2 * H * s * W * s;
  std::vector<T> v(plane * groups);
  for (std::size_t k = 0; k < groups; ++k) std::copy(g.data().begin(), g.data().end(), v.begin() + k * plane);
  return Tensor<T>(Shape(1, 2 * groups, H * s, W * s), std::move(v));
}

template <Scalar T>
Var<T> dum_upsample_with(const Var<T>& f_in, const DumParams<T>& p, const OffsetField<T>& offsets) {
  const Shape s = f_in.shape();
  if (s.c() % p.groups != 0) {
    throw ShapeError("dum_upsample: " + std::to_string(s.c()) + " channels not divisible into " +
                     std::to_string(p.groups) + " groups");
  }
  const Var<T> base = f_in.tape().constant(group_grid<T>(s.h(), s.w(), p.scale, p.groups));
  return grid_sample_bilinear(f_in, add(offsets.reconstructed, base));
}

template <Scalar T>
Var<T> dum_upsample(const Var<T>& f_in, const DumParams<T>& p) {
  if (p.scale < 1) throw ContractError("dum_upsample: scale must be >= 1");
  if (!(p.alpha > 0)) throw ContractError("dum_upsample: offset bound must be positive");
  const Var<T> source = p.variant == OffsetVariant::tanh_bounded ? dum_mid(f_in, p) : f_in;
  return dum_upsample_with(f_in, p, gen_offsets(source, p));
}

/// Pools F_agg by each ratio, upsamples every branch back with its own DUM,
/// and sums branches sharing a ratio. Levels come out in first-appearance
/// order of the ratios, all at F_agg's extent.
template <Scalar T>
FeaturePyramid<T> cflmd_distribute(const Var<T>& f_agg, const std::vector<DumParams<T>>& branches,
                                   const std::vector<std::size_t>& ratios) {
  if (branches.size() != ratios.size()) throw ContractError("cflmd_distribute: one DUM per pooling ratio required");
  const Shape s = f_agg.shape();
  std::size_t rmax = 1;
  for (std::size_t r : ratios) {
    if (r < 1) throw ContractError("cflmd_distribute: pooling ratio must be >= 1");
    rmax = std::max(rmax, r);
  }
  if (s.h() % rmax != 0 || s.w() % rmax != 0) {
    throw ContractError("cflmd_distribute: F_agg extent " + s.str() + " not divisible by " + std::to_string(rmax));
  }
  std::vector<std::size_t> level_ratio;
  FeaturePyramid<T> out;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const std::size_t r = ratios[i];
    if (branches[i].scale != r) throw ContractError("cflmd_distribute: branch scale must equal its pooling ratio");
    const Var<T> pooled = r == 1 ? f_agg : adaptive_avg_pool(f_agg, s.h() / r, s.w() / r);
    const Var<T> up = dum_upsample(pooled, branches[i]);
    std::size_t l = 0;
    while (l < level_ratio.size() && level_ratio[l] != r) ++l;
    if (l == level_ratio.size()) {
      level_ratio.push_back(r);
      out.levels.push_back(up);
    } else {
      out.levels[l] = add(out.levels[l], up);
    }
  }
  return out;
}

}  // namespace cfmd
