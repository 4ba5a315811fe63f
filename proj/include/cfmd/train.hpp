#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cfmd/autodiff.hpp"
#include "cfmd/config.hpp"
#include "cfmd/model.hpp"
#include "cfmd/npy.hpp"
#include "cfmd/rng.hpp"

namespace cfmd {

// ---------------------------------------------------------------------------
// Loss and metrics

inline constexpr double kBceEps = 1e-7;

/// Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]. The
/// gradient is zero where the clamp is active.
template <Scalar T>
Var<T> bce_loss(const Var<T>& pred, const Var<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("bce_loss " + pred.shape().str() + " vs " + target.shape().str());
  }
  const Tensor<T> pv = pred.value(), tv = target.value();
  const std::size_t n = pv.numel();
  const T lo = static_cast<T>(kBceEps), hi = T(1) - static_cast<T>(kBceEps);
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(pv[i], lo, hi), t = tv[i];
    acc -= t * std::log(p) + (1 - t) * std::log1p(-p);
  }
  const T loss = static_cast<T>(acc / static_cast<double>(n));
  const std::size_t pid = pred.id();
  return pred.tape().record(Tensor<T>(Shape(1, 1, 1, 1), loss), {pred, target},
                            [=](const Tensor<T>& g, Tape<T>& tape) {
                              if (!tape.requires_grad(pid)) return;
                              auto gp = tape.grad_buffer(pid);
                              const T scale = g[0] / static_cast<T>(n);
                              for (std::size_t i = 0; i < n; ++i) {
                                const T p = pv[i];
                                if (p < lo || p > hi) continue;
                                gp[i] += scale * (p - tv[i]) / (p * (T(1) - p));
                              }
                            });
}

template <Scalar T>
double pixel_accuracy(const Tensor<T>& pred, const Tensor<T>& target, double threshold = 0.5) {
  if (pred.shape() != target.shape()) throw ShapeError("pixel_accuracy " + pred.shape().str() + " vs " + target.shape().str());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    hits += ((pred[i] >= threshold) == (target[i] >= 0.5)) ? 1 : 0;
  }
  return pred.numel() ? static_cast<double>(hits) / static_cast<double>(pred.numel()) : 1.0;
}

template <Scalar T>
double mae_metric(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) throw ShapeError("mae_metric " + pred.shape().str() + " vs " + target.shape().str());
  double s = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) s += std::abs(static_cast<double>(pred[i]) - target[i]);
  return pred.numel() ? s / static_cast<double>(pred.numel()) : 0.0;
}

// ---------------------------------------------------------------------------
// Adam

template <Scalar T>
struct AdamState {
  std::map<std::string, Tensor<T>> m, v;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// One bias-corrected Adam update at step t >= 1. Moments are created lazily as zeros.
template <Scalar T>
void adam_step(ParamSet<T>& params, const std::map<std::string, Tensor<T>>& grads, AdamState<T>& state, long t,
               double lr) {
  if (t < 1) throw ContractError("adam_step: t must be >= 1");
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw TrainingError("non-finite gradient for parameter '" + name + "'", t);
  }
  const double bc1 = 1 - std::pow(state.beta1, static_cast<double>(t));
  const double bc2 = 1 - std::pow(state.beta2, static_cast<double>(t));
  for (const auto& [name, g] : grads) {
    auto pit = params.find(name);
    if (pit == params.end()) throw ContractError("adam_step: gradient for unknown parameter '" + name + "'");
    if (g.shape() != pit->second.shape()) throw ShapeError("adam_step: gradient shape mismatch for '" + name + "'");
    auto [mit, _m] = state.m.try_emplace(name, zeros_like(g));
    auto [vit, _v] = state.v.try_emplace(name, zeros_like(g));
    auto m = mit->second.mutable_data();
    auto v = vit->second.mutable_data();
    auto p = pit->second.mutable_data();
    auto gd = g.data();
    const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * gd[i];
      v[i] = b2 * v[i] + (T(1) - b2) * gd[i] * gd[i];
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      p[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic saliency data

template <Scalar T>
struct SynthSample {
  Tensor<T> image;  // (1, 3, H, W) in [0, 1]
  Tensor<T> mask;   // (1, 1, H, W) in {0, 1}
};

namespace synth_detail {

struct ShapeSpec {
  int kind;  // 0 rectangle, 1 circle, 2 triangle
  double cx, cy, r, aspect;
  double vx[3], vy[3];

  bool contains(double x, double y) const {
    switch (kind) {
      case 0: return std::abs(x - cx) <= r && std::abs(y - cy) <= r * aspect;
      case 1: return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
      default: {
        auto edge = [&](int a, int b) { return (vx[b] - vx[a]) * (y - vy[a]) - (vy[b] - vy[a]) * (x - vx[a]); };
        const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
        return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
      }
    }
  }
};

inline double color_distance(const double* a, const double* b) {
  return (std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2])) / 3.0;
}

}  // namespace synth_detail

/// Textured background plus 1-3 filled shapes whose colors differ from the
/// background; the mask is the union of the shapes rasterized at pixel centers.
template <Scalar T>
SynthSample<T> synth_sample(std::size_t H, std::size_t W, Rng& rng) {
  using synth_detail::ShapeSpec;
  double bg[3];
  for (double& c : bg) c = rng.uniform(0.2, 0.8);
  const double tex_fx = rng.uniform(0.05, 0.3), tex_fy = rng.uniform(0.05, 0.3), tex_phase = rng.uniform(0, 6.283);

  const int count = static_cast<int>(rng.uniform_int(1, 3));
  std::vector<ShapeSpec> shapes;
  std::vector<std::array<double, 3>> colors;
  const double side = static_cast<double>(std::min(H, W));
  for (int k = 0; k < count; ++k) {
    ShapeSpec s{};
    s.kind = static_cast<int>(rng.uniform_int(0, 2));
    s.r = rng.uniform(0.08, 0.2) * side;
    s.cx = rng.uniform(s.r, W - s.r);
    s.cy = rng.uniform(s.r, H - s.r);
    s.aspect = rng.uniform(0.6, 1.4);
    const double base_angle = rng.uniform(0, 6.283185307179586);
    for (int v = 0; v < 3; ++v) {
      const double ang = base_angle + v * 2.0943951023931953 + rng.uniform(-0.3, 0.3);
      const double rad = s.r * rng.uniform(0.9, 1.5);
      s.vx[v] = s.cx + rad * std::cos(ang);
      s.vy[v] = s.cy + rad * std::sin(ang);
    }
    std::array<double, 3> col{};
    do {
      for (double& c : col) c = rng.next_double();
    } while (synth_detail::color_distance(col.data(), bg) < 0.4);
    shapes.push_back(s);
    colors.push_back(col);
  }

  SynthSample<T> out{Tensor<T>(Shape(1, 3, H, W)), Tensor<T>(Shape(1, 1, H, W))};
  auto img = out.image.mutable_data();
  auto mask = out.mask.mutable_data();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double tex = 0.04 * std::sin(tex_fx * px + tex_fy * py + tex_phase);
      double c[3] = {bg[0] + tex, bg[1] + tex, bg[2] + tex};
      bool fg = false;
      for (std::size_t k = 0; k < shapes.size(); ++k) {
        if (shapes[k].contains(px, py)) {
          fg = true;
          for (int ch = 0; ch < 3; ++ch) c[ch] = colors[k][ch];
        }
      }
      mask[y * W + x] = fg ? T(1) : T(0);
      for (int ch = 0; ch < 3; ++ch) {
        const double v = c[ch] + 0.03 * rng.normal();
        img[(ch * H + y) * W + x] = static_cast<T>(std::clamp(v, 0.0, 1.0));
      }
    }
  return out;
}

template <Scalar T>
std::vector<SynthSample<T>> synth_dataset(std::size_t n, std::size_t H, std::size_t W, Rng& rng) {
  if (H == 0 || W == 0 || H % 32 != 0 || W % 32 != 0) {
    throw ContractError("synth_dataset extents must be positive multiples of 32");
  }
  std::vector<SynthSample<T>> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth_sample<T>(H, W, rng));
  return out;
}

/// Stacks samples [begin, begin + count) into (count, C, H, W) batches.
template <Scalar T>
std::pair<Tensor<T>, Tensor<T>> stack_batch(const std::vector<SynthSample<T>>& data, std::size_t begin,
                                            std::size_t count) {
  const Shape is = data.at(begin).image.shape(), ms = data.at(begin).mask.shape();
  std::vector<T> img, mask;
  img.reserve(count * is.numel());
  mask.reserve(count * ms.numel());
  for (std::size_t i = begin; i < begin + count; ++i) {
    img.insert(img.end(), data.at(i).image.data().begin(), data.at(i).image.data().end());
    mask.insert(mask.end(), data.at(i).mask.data().begin(), data.at(i).mask.data().end());
  }
  return {Tensor<T>(Shape(count, is.c(), is.h(), is.w()), std::move(img)),
          Tensor<T>(Shape(count, 1, ms.h(), ms.w()), std::move(mask))};
}

// ---------------------------------------------------------------------------
// Training

struct MetricsRecord {
  std::size_t step;
  double loss, pix_acc, mae;
  std::optional<double> seconds;
};

inline std::string metrics_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["loss"] = r.loss;
  j["pix_acc"] = r.pix_acc;
  j["mae"] = r.mae;
  j["seconds"] = r.seconds ? nlohmann::ordered_json(*r.seconds) : nlohmann::ordered_json(nullptr);
  return j.dump();
}

template <Scalar T>
struct TrainResult {
  ParamSet<T> params;
  std::vector<MetricsRecord> log;
};

struct EvalMetrics {
  double loss, pix_acc, mae;
};

template <Scalar T>
EvalMetrics evaluate(const ParamSet<T>& params, const ModelConfig& cfg, const std::vector<SynthSample<T>>& data) {
  double loss = 0, acc = 0, mae = 0;
  const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
  for (std::size_t i = 0; i < data.size(); i += bs) {
    const std::size_t count = std::min(bs, data.size() - i);
    const auto [img, mask] = stack_batch(data, i, count);
    Tape<T> tape;
    BoundParams<T> b(tape, params, false);
    const Var<T> pred = cfmd_forward(tape.constant(img), b, cfg);
    const double w = static_cast<double>(count) / static_cast<double>(data.size());
    loss += w * static_cast<double>(bce_loss(pred, tape.constant(mask)).value()[0]);
    acc += w * pixel_accuracy(pred.value(), mask);
    mae += w * mae_metric(pred.value(), mask);
  }
  return {loss, acc, mae};
}

/// Training-set and held-out streams derived from the config seed.
inline Rng train_stream(const ModelConfig& cfg) { return Rng(cfg.seed).derive(1); }
inline Rng heldout_stream(const ModelConfig& cfg) { return Rng(cfg.seed).derive(2); }
inline std::uint64_t init_seed(const ModelConfig& cfg) { return Rng(cfg.seed).derive(3).next_u64(); }

/// Adam on fresh synthetic batches; evaluates on a fixed held-out set at step
/// 0, every eval_every steps, and after the last step.
template <Scalar T>
TrainResult<T> train_toy(const ModelConfig& cfg, const std::function<void(const MetricsRecord&)>& on_record = {}) {
  cfg.validate();
  TrainResult<T> res;
  res.params = init_params<T>(cfg, init_seed(cfg));
  Rng data_rng = train_stream(cfg);
  Rng held_rng = heldout_stream(cfg);
  const auto heldout = synth_dataset<T>(cfg.eval_samples, cfg.input_size, cfg.input_size, held_rng);
  AdamState<T> adam;
  const auto start = std::chrono::steady_clock::now();
  auto record = [&](std::size_t step) {
    MetricsRecord r{step, 0, 0, 0, std::nullopt};
    if (!heldout.empty()) {
      const EvalMetrics m = evaluate(res.params, cfg, heldout);
      r.loss = m.loss;
      r.pix_acc = m.pix_acc;
      r.mae = m.mae;
    }
    if (cfg.log_wall_time) {
      r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    res.log.push_back(r);
    if (on_record) on_record(r);
  };
  record(0);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const auto batch = synth_dataset<T>(cfg.batch_size, cfg.input_size, cfg.input_size, data_rng);
    const auto [img, mask] = stack_batch(batch, 0, batch.size());
    std::map<std::string, Tensor<T>> grads;
    try {
      Tape<T> tape;
      BoundParams<T> b(tape, res.params, true);
      const Var<T> loss = bce_loss(cfmd_forward(tape.constant(img), b, cfg), tape.constant(mask));
      if (!std::isfinite(static_cast<double>(loss.value()[0]))) {
        throw TrainingError("loss diverged at step " + std::to_string(step), static_cast<long>(step));
      }
      auto gm = tape.backward(loss);
      for (const auto& [name, v] : b.all()) grads.emplace(name, gm.at(v.id()));
    } catch (const NumericError& e) {
      throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step), static_cast<long>(step));
    }
    adam_step(res.params, grads, adam, static_cast<long>(step), cfg.learning_rate);
    if (step % cfg.eval_every == 0 || step == cfg.steps) {
      try {
        record(step);
      } catch (const NumericError& e) {
        throw TrainingError(std::string(e.what()) + " while evaluating step " + std::to_string(step),
                            static_cast<long>(step));
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints: one NPY per parameter plus manifest.json {name: {shape, dtype, file}}
// and the config the parameters belong to.

template <Scalar T>
void save_checkpoint(const std::string& dir, const ParamSet<T>& params, const ModelConfig& cfg) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  nlohmann::ordered_json manifest = nlohmann::ordered_json::object();
  for (const auto& [name, t] : params) {
    const std::string file = name + ".npy";
    npy_write(t, (fs::path(dir) / file).string());
    const Shape& s = t.shape();
    manifest[name] = {{"shape", {s.n(), s.c(), s.h(), s.w()}}, {"dtype", dtype_name(dtype_of<T>())}, {"file", file}};
  }
  std::ofstream(fs::path(dir) / "manifest.json") << manifest.dump(2) << "\n";
  std::ofstream(fs::path(dir) / "config.json") << config_to_string(cfg);
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw FormatError("invalid JSON in " + path, 0);
  return j;
}

inline ModelConfig load_checkpoint_config(const std::string& dir) {
  return config_from_json(read_json_file((std::filesystem::path(dir) / "config.json").string()));
}

/// Loads parameters and checks them against the parameter set `cfg` implies.
template <Scalar T>
ParamSet<T> load_checkpoint(const std::string& dir, const ModelConfig& cfg) {
  namespace fs = std::filesystem;
  const nlohmann::json manifest = read_json_file((fs::path(dir) / "manifest.json").string());
  const ParamSet<T> expected = init_params<T>(cfg, 0);
  ParamSet<T> out;
  for (const auto& [name, ref] : expected) {
    if (!manifest.contains(name)) throw ContractError("checkpoint lacks parameter '" + name + "'");
    const auto& entry = manifest[name];
    const std::string path = (fs::path(dir) / entry.at("file").template get<std::string>()).string();
    Tensor<T> t;
    if (npy_file_dtype(path) == dtype_of<T>()) {
      t = npy_read<T>(path);
    } else if constexpr (std::is_same_v<T, float>) {
      t = npy_read<double>(path).template cast<float>();
    } else {
      t = npy_read<float>(path).template cast<double>();
    }
    if (t.shape() != ref.shape()) {
      throw ContractError("checkpoint parameter '" + name + "' has shape " + t.shape().str() + ", config expects " +
                          ref.shape().str());
    }
    out.emplace(name, std::move(t));
  }
  for (const auto& [name, _] : manifest.items()) {
    if (!expected.count(name)) throw ContractError("checkpoint has unexpected parameter '" + name + "'");
  }
  return out;
}

}  // namespace cfmd
