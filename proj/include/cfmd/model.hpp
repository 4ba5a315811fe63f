#pragma once

// The composed saliency network: backbone stub -> CFLMA -> CFLMD -> summed
// stride-4 levels -> 1-channel head -> x4 bilinear resize -> sigmoid.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "cfmd/autodiff.hpp"
#include "cfmd/cflma.hpp"
#include "cfmd/cflmd.hpp"
#include "cfmd/config.hpp"
#include "cfmd/nn_ops.hpp"
#include "cfmd/rng.hpp"
#include "cfmd/ssm_scan.hpp"

namespace cfmd {

/// Named parameter tensors, iterated in name order.
template <Scalar T>
using ParamSet = std::map<std::string, Tensor<T>>;

/// Parameters bound as leaves of one tape.
template <Scalar T>
class BoundParams {
 public:
  BoundParams(Tape<T>& tape, const ParamSet<T>& params, bool requires_grad) {
    for (const auto& [name, t] : params) vars_.emplace(name, tape.leaf(t, requires_grad));
  }
  /// Wraps already-bound variables.
  static BoundParams from(std::map<std::string, Var<T>> vars) {
    BoundParams b;
    b.vars_ = std::move(vars);
    return b;
  }
  const Var<T>& operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ContractError("missing parameter '" + name + "'");
    return it->second;
  }
  const std::map<std::string, Var<T>>& all() const { return vars_; }

 private:
  BoundParams() = default;
  std::map<std::string, Var<T>> vars_;
};

namespace model_detail {

inline std::vector<std::string> backbone_stages() { return {"s1a", "s1b", "s2", "s3", "s4"}; }

inline std::vector<std::size_t> distinct_ratios(const std::vector<std::size_t>& r) {
  std::vector<std::size_t> out;
  for (auto v : r)
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  return out;
}

inline OffsetVariant variant_of(const ModelConfig& c) {
  return c.dum_variant == "tanh" ? OffsetVariant::tanh_bounded : OffsetVariant::sigmoid_scope;
}

inline OffsetOrder order_of(const ModelConfig& c) {
  return c.dum_order == "linear_then_shuffle" ? OffsetOrder::linear_then_shuffle : OffsetOrder::shuffle_then_linear;
}

// Input/output channels of the offset projection for one branch.
inline std::pair<std::size_t, std::size_t> offset_proj_dims(const ModelConfig& c, std::size_t s) {
  const std::size_t src = c.dum_variant == "tanh" ? c.dum_mid_channels : c.unified_channels;
  if (c.dum_order == "linear_then_shuffle") return {2 * s * s * c.dum_groups, src};
  return {2 * c.dum_groups, src / (s * s)};
}

}  // namespace model_detail

/// Initializes every parameter of `cfg` deterministically from `seed`.
/// Offset projections start at zero, so each DUM starts as a bilinear resize.
template <Scalar T>
ParamSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamSet<T> ps;
  auto normal = [&](Shape s, double stddev) { return tensor_create<T>(s, Normal{0.0, stddev, &rng}); };
  auto zeros = [](Shape s) { return Tensor<T>(s, T(0)); };

  const auto stages = model_detail::backbone_stages();
  const auto& bc = cfg.backbone_channels;
  const std::vector<std::size_t> outs{bc[0], bc[0], bc[1], bc[2], bc[3]};
  std::size_t cin = 3;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    ps["backbone." + stages[i] + ".w"] = normal(Shape(outs[i], cin, 3, 3), std::sqrt(2.0 / (9.0 * cin)));
    ps["backbone." + stages[i] + ".b"] = zeros(Shape(1, outs[i], 1, 1));
    cin = outs[i];
  }

  const std::size_t Cu = cfg.unified_channels, E = cfg.expanded_width(), S = cfg.state_size;
  for (std::size_t l = 0; l < 4; ++l) {
    const std::string p = "cflma.unify" + std::to_string(l);
    ps[p + ".w"] = normal(Shape(Cu, bc[l], 1, 1), std::sqrt(1.0 / bc[l]));
    ps[p + ".b"] = zeros(Shape(1, Cu, 1, 1));
  }
  if (cfg.use_cflma) {
    ps["cflma.mamba.in_proj"] = normal(Shape(1, 1, Cu, 2 * E), std::sqrt(1.0 / Cu));
    Tensor<T> a_log(Shape(1, 1, E, S));
    for (std::size_t e = 0; e < E; ++e)
      for (std::size_t s = 0; s < S; ++s) a_log.mutable_data()[e * S + s] = static_cast<T>(std::log(double(s + 1)));
    ps["cflma.mamba.a_log"] = a_log;
    ps["cflma.mamba.w_delta"] = normal(Shape(1, 1, E, E), 0.1 / std::sqrt(double(E)));
    // softplus(bias) = 0.05
    ps["cflma.mamba.delta_bias"] = Tensor<T>(Shape(1, 1, 1, E), static_cast<T>(std::log(std::expm1(0.05))));
    ps["cflma.mamba.w_b"] = normal(Shape(1, 1, E, S), std::sqrt(1.0 / E));
    ps["cflma.mamba.w_c"] = normal(Shape(1, 1, E, S), std::sqrt(1.0 / E));
    ps["cflma.mamba.d_skip"] = Tensor<T>(Shape(1, 1, 1, E), T(1));
    ps["cflma.mamba.out_proj"] = normal(Shape(1, 1, E, Cu), 0.5 / std::sqrt(double(E)));
    for (std::size_t l = 0; l < 4; ++l) {
      const std::string p = "cflma.head" + std::to_string(l);
      ps[p + ".w"] = normal(Shape(1, 1, Cu, Cu), 0.5 / std::sqrt(double(Cu)));
      ps[p + ".b"] = zeros(Shape(1, 1, 1, Cu));
    }
  }
  if (cfg.use_cflmd) {
    const std::size_t Cm = cfg.dum_mid_channels;
    for (std::size_t i = 0; i < cfg.pool_ratios.size(); ++i) {
      const std::string p = "cflmd.b" + std::to_string(i);
      const auto [pout, pin] = model_detail::offset_proj_dims(cfg, cfg.pool_ratios[i]);
      if (cfg.dum_variant == "tanh") {
        ps[p + ".conv.w"] = normal(Shape(Cm, Cu, 1, 1), std::sqrt(2.0 / Cu));
        ps[p + ".conv.b"] = zeros(Shape(1, Cm, 1, 1));
        ps[p + ".dw.w"] = normal(Shape(Cm, 1, 3, 3), std::sqrt(2.0 / 9.0));
        ps[p + ".dw.b"] = zeros(Shape(1, Cm, 1, 1));
        ps[p + ".offset.w"] = zeros(Shape(pout, pin, 1, 1));
      } else {
        ps[p + ".scope.w1"] = normal(Shape(pout, pin, 1, 1), std::sqrt(1.0 / pin));
        ps[p + ".scope.w2"] = zeros(Shape(pout, pin, 1, 1));
      }
    }
  }
  ps["head.w"] = normal(Shape(1, Cu, 1, 1), 0.1 / std::sqrt(double(Cu)));
  ps["head.b"] = zeros(Shape(1, 1, 1, 1));
  return ps;
}

/// Perturbs every parameter, including zero-initialized ones, so all paths carry gradient.
template <Scalar T>
ParamSet<T> randomized_params(const ModelConfig& cfg, std::uint64_t seed, double stddev = 0.3) {
  ParamSet<T> ps = init_params<T>(cfg, seed);
  Rng rng(seed ^ 0x5eed);
  for (auto& [name, t] : ps) {
    if (name.ends_with("a_log") || name.ends_with("delta_bias")) continue;
    for (T& v : t.mutable_data()) v += static_cast<T>(stddev * rng.normal() / std::sqrt(double(t.shape().c() * t.shape().h() + 1)));
  }
  return ps;
}

template <Scalar T>
Conv3x3Params<T> backbone_conv(const BoundParams<T>& b, const std::string& stage) {
  return Conv3x3Params<T>{b["backbone." + stage + ".w"], b["backbone." + stage + ".b"], 2};
}

template <Scalar T>
CflmaParams<T> cflma_params(const BoundParams<T>& b, const ModelConfig& cfg) {
  CflmaParams<T> p;
  for (std::size_t l = 0; l < 4; ++l) {
    const std::string n = "cflma.unify" + std::to_string(l);
    p.unify.push_back(Conv1x1Params<T>{b[n + ".w"], b[n + ".b"]});
  }
  p.grid = cfg.token_grid;
  p.positional_encoding = cfg.positional_encoding;
  if (!cfg.use_cflma) {
    p.psi_override = 1.0;
    return p;
  }
  p.mamba = MambaBlockParams<T>{b["cflma.mamba.in_proj"], b["cflma.mamba.a_log"],    b["cflma.mamba.w_delta"],
                                b["cflma.mamba.delta_bias"], b["cflma.mamba.w_b"], b["cflma.mamba.w_c"],
                                b["cflma.mamba.d_skip"],  b["cflma.mamba.out_proj"], cfg.bidirectional};
  for (std::size_t l = 0; l < 4; ++l) {
    const std::string n = "cflma.head" + std::to_string(l);
    p.head_w.push_back(b[n + ".w"]);
    p.head_b.push_back(b[n + ".b"]);
  }
  return p;
}

template <Scalar T>
std::vector<DumParams<T>> cflmd_params(const BoundParams<T>& b, const ModelConfig& cfg) {
  std::vector<DumParams<T>> out;
  for (std::size_t i = 0; i < cfg.pool_ratios.size(); ++i) {
    const std::string n = "cflmd.b" + std::to_string(i);
    DumParams<T> p;
    p.alpha = cfg.offset_bound;
    p.scale = cfg.pool_ratios[i];
    p.groups = cfg.dum_groups;
    p.variant = model_detail::variant_of(cfg);
    p.order = model_detail::order_of(cfg);
    if (p.variant == OffsetVariant::tanh_bounded) {
      p.conv = Conv1x1Params<T>{b[n + ".conv.w"], b[n + ".conv.b"]};
      p.dw = DWConv3x3Params<T>{b[n + ".dw.w"], b[n + ".dw.b"]};
      p.offset_w = b[n + ".offset.w"];
    } else {
      p.scope_w1 = b[n + ".scope.w1"];
      p.scope_w2 = b[n + ".scope.w2"];
    }
    out.push_back(p);
  }
  return out;
}

/// Four levels at strides 4, 8, 16, 32. Every conv is 3x3, stride 2, followed by GeLU.
template <Scalar T>
FeaturePyramid<T> backbone_forward(const Var<T>& x, const BoundParams<T>& b) {
  const Shape s = x.shape();
  if (s.c() != 3) throw ShapeError("backbone expects 3 input channels, got " + s.str());
  if (s.h() == 0 || s.w() == 0 || s.h() % 32 != 0 || s.w() % 32 != 0) {
    throw ContractError("backbone input extents must be positive multiples of 32, got " + s.str());
  }
  FeaturePyramid<T> pyr;
  Var<T> h = gelu(conv3x3(x, backbone_conv(b, "s1a")));
  h = gelu(conv3x3(h, backbone_conv(b, "s1b")));
  pyr.levels.push_back(h);
  for (const char* stage : {"s2", "s3", "s4"}) {
    h = gelu(conv3x3(h, backbone_conv(b, stage)));
    pyr.levels.push_back(h);
  }
  return pyr;
}

template <Scalar T>
struct CfmdOutput {
  Var<T> saliency;  // (N, 1, H, W) in (0, 1)
  Var<T> logits;    // (N, 1, H, W)
  CflmaOutput<T> cflma;
};

template <Scalar T>
CfmdOutput<T> cfmd_forward_full(const Var<T>& x, const BoundParams<T>& b, const ModelConfig& cfg) {
  // [0, 1] pixels are centered to [-1, 1].
  const Var<T> centered = add(scale(x, T(2)), x.tape().constant(Tensor<T>(Shape(1, 1, 1, 1), T(-1))));
  const FeaturePyramid<T> pyr = backbone_forward(centered, b);
  CfmdOutput<T> out;
  out.cflma = cflma_forward(pyr, cflma_params(b, cfg));
  Var<T> fused = out.cflma.aggregated;
  if (cfg.use_cflmd) {
    const FeaturePyramid<T> dist = cflmd_distribute(fused, cflmd_params(b, cfg), cfg.pool_ratios);
    fused = dist.levels[0];
    for (std::size_t l = 1; l < dist.levels.size(); ++l) fused = add(fused, dist.levels[l]);
  }
  const Var<T> head = conv1x1(fused, Conv1x1Params<T>{b["head.w"], b["head.b"]});
  out.logits = bilinear_resize(head, 4);
  out.saliency = sigmoid(out.logits);
  return out;
}

template <Scalar T>
Var<T> cfmd_forward(const Var<T>& x, const BoundParams<T>& b, const ModelConfig& cfg) {
  return cfmd_forward_full(x, b, cfg).saliency;
}

/// Forward pass without gradient tracking.
template <Scalar T>
Tensor<T> predict(const Tensor<T>& x, const ParamSet<T>& params, const ModelConfig& cfg) {
  Tape<T> tape;
  BoundParams<T> b(tape, params, false);
  return cfmd_forward(tape.constant(x), b, cfg).value();
}

}  // namespace cfmd
