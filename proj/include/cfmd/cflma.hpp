#pragma once

// Cross-layer feature aggregation driven by a Mamba block.
//
// Each pyramid level is mapped to a common channel width, average-pooled to a
// g x g token grid and flattened; the four token grids are concatenated
// level-major (row-major within a level) and run through the gated Mamba
// block. The mean output token of each level passes through a per-level
// projection and a sigmoid to give a channel attention vector Psi_l, which
// rescales that level. The rescaled levels are resized to the finest stride and
// averaged into F_agg.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "cfmd/autodiff.hpp"
#include "cfmd/nn_ops.hpp"
#include "cfmd/ssm_scan.hpp"

namespace cfmd {

template <Scalar T>
struct FeaturePyramid {
  std::vector<Var<T>> levels;  // finest first; extents halve level to level
};

struct TokenIndex {
  std::size_t level, y, x;
  friend bool operator==(const TokenIndex&, const TokenIndex&) = default;
};

template <Scalar T>
struct SerializedPyramid {
  Var<T> tokens;                  // (N, 1, levels * g * g, C)
  std::vector<TokenIndex> index;  // one entry per token, in sequence order
};

enum class HeadActivation { sigmoid, linear };

template <Scalar T>
struct CflmaParams {
  std::vector<Conv1x1Params<T>> unify;  // one per level, C_l -> C_u
  std::size_t grid = 4;
  MambaBlockParams<T> mamba;
  std::vector<Var<T>> head_w;  // (1, 1, C_u, C_u) per level
  std::vector<Var<T>> head_b;  // (1, 1, 1, C_u) per level

  bool use_mamba = true;  // false: identity sequence op
  HeadActivation head_activation = HeadActivation::sigmoid;
  std::optional<double> psi_override;  // constant Psi, bypassing the head
  bool positional_encoding = false;    // additive sinusoidal encoding on tokens
};

template <Scalar T>
struct CflmaOutput {
  FeaturePyramid<T> recalibrated;
  std::vector<Var<T>> psi;  // (N, C_u, 1, 1) per level
  Var<T> aggregated;        // (N, C_u, H_0, W_0)
};

template <Scalar T>
FeaturePyramid<T> unify_channels(const FeaturePyramid<T>& pyr, const CflmaParams<T>& p) {
  if (pyr.levels.size() != p.unify.size()) {
    throw ShapeError("unify_channels: " + std::to_string(pyr.levels.size()) + " levels, " +
                     std::to_string(p.unify.size()) + " projections");
  }
  FeaturePyramid<T> out;
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) out.levels.push_back(conv1x1(pyr.levels[l], p.unify[l]));
  return out;
}

template <Scalar T>
SerializedPyramid<T> serialize_pyramid(const FeaturePyramid<T>& pyr, std::size_t g) {
  if (pyr.levels.empty()) throw ContractError("serialize_pyramid: empty pyramid");
  if (g < 1) throw ContractError("serialize_pyramid: token grid must be >= 1");
  SerializedPyramid<T> out;
  std::vector<Var<T>> parts;
  const std::size_t C = pyr.levels[0].shape().c();
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
    const Shape s = pyr.levels[l].shape();
    if (s.h() < g || s.w() < g) {
      throw ContractError("serialize_pyramid: level " + std::to_string(l) + " " + s.str() + " smaller than token grid " +
                          std::to_string(g));
    }
    if (s.c() != C) throw ShapeError("serialize_pyramid: levels disagree on channel count");
    parts.push_back(to_tokens(adaptive_avg_pool(pyr.levels[l], g, g)));
    for (std::size_t y = 0; y < g; ++y)
      for (std::size_t x = 0; x < g; ++x) out.index.push_back({l, y, x});
  }
  out.tokens = concat_rows(parts);
  return out;
}

/// Sinusoidal encoding (1, 1, L, C): even columns sin, odd columns cos.
template <Scalar T>
Tensor<T> sinusoidal_encoding(std::size_t L, std::size_t C) {
  Tensor<T> pe(Shape(1, 1, L, C));
  auto d = pe.mutable_data();
  for (std::size_t k = 0; k < L; ++k)
    for (std::size_t i = 0; i < C; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(C));
      d[k * C + i] = static_cast<T>(i % 2 == 0 ? std::sin(k * freq) : std::cos(k * freq));
    }
  return pe;
}

template <Scalar T>
std::vector<Var<T>> attention_weights(const Var<T>& seq_out, const std::vector<TokenIndex>& index,
                                      const CflmaParams<T>& p) {
  const Shape s = seq_out.shape();
  if (s.h() != index.size()) throw ShapeError("attention_weights: sequence length does not match index map");
  std::size_t levels = 0;
  for (const auto& t : index) levels = std::max(levels, t.level + 1);
  std::vector<Var<T>> psi;
  std::size_t start = 0;
  for (std::size_t l = 0; l < levels; ++l) {
    std::size_t len = 0;
    while (start + len < index.size() && index[start + len].level == l) ++len;
    if (len == 0) throw ContractError("attention_weights: level tokens are not contiguous");
    const std::size_t N = s.n(), C = s.w();
    if (p.psi_override) {
      psi.push_back(seq_out.tape().constant(Tensor<T>(Shape(N, C, 1, 1), static_cast<T>(*p.psi_override))));
    } else {
      const Var<T> pooled = mean_rows(slice_rows(seq_out, start, len));  // (N, 1, 1, C)
      Var<T> z = add(matmul_lastdim(pooled, p.head_w.at(l)), p.head_b.at(l));
      if (p.head_activation == HeadActivation::sigmoid) z = sigmoid(z);
      psi.push_back(reshape(z, Shape(N, C, 1, 1)));
    }
    start += len;
  }
  if (start != index.size()) throw ContractError("attention_weights: index map is not level-major");
  return psi;
}

template <Scalar T>
CflmaOutput<T> cflma_forward(const FeaturePyramid<T>& pyr, const CflmaParams<T>& p) {
  const FeaturePyramid<T> unified = unify_channels(pyr, p);
  const Shape base = unified.levels[0].shape();
  for (std::size_t l = 1; l < unified.levels.size(); ++l) {
    const Shape s = unified.levels[l].shape();
    if ((s.h() << l) != base.h() || (s.w() << l) != base.w() || s.n() != base.n()) {
      throw ShapeError("cflma_forward: level " + std::to_string(l) + " " + s.str() + " is not base " + base.str() +
                       " halved " + std::to_string(l) + " times");
    }
  }
  CflmaOutput<T> out;
  if (p.psi_override) {
    for (std::size_t l = 0; l < unified.levels.size(); ++l) {
      out.psi.push_back(unified.levels[0].tape().constant(
          Tensor<T>(Shape(base.n(), base.c(), 1, 1), static_cast<T>(*p.psi_override))));
    }
  } else {
    SerializedPyramid<T> ser = serialize_pyramid(unified, p.grid);
    Var<T> seq = ser.tokens;
    if (p.positional_encoding) {
      const Shape ts = seq.shape();
      seq = add(seq, seq.tape().constant(sinusoidal_encoding<T>(ts.h(), ts.w())));
    }
    if (p.use_mamba) seq = mamba_block(seq, p.mamba);
    out.psi = attention_weights(seq, ser.index, p);
    if (p.head_activation == HeadActivation::sigmoid) {
      for (const auto& v : out.psi) {
        for (T e : v.value().data()) {
          if (!(e >= T(0) && e <= T(1))) throw NumericError("cflma attention weight outside [0, 1]");
        }
      }
    }
  }
  Var<T> agg;
  for (std::size_t l = 0; l < unified.levels.size(); ++l) {
    const Var<T> rescaled = mul(unified.levels[l], out.psi[l]);
    out.recalibrated.levels.push_back(rescaled);
    const Var<T> up = bilinear_resize(rescaled, std::size_t{1} << l);
    agg = l == 0 ? up : add(agg, up);
  }
  out.aggregated = scale(agg, T(1) / static_cast<T>(unified.levels.size()));
  return out;
}

}  // namespace cfmd
