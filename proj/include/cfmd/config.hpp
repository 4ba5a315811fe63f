#pragma once

// All model and training hyperparameters in one JSON-serializable record.
// Unknown keys are rejected.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "cfmd/error.hpp"

namespace cfmd {

struct ModelConfig {
  std::size_t input_size = 64;
  std::vector<std::size_t> backbone_channels{32, 64, 128, 256};
  std::size_t unified_channels = 256;
  std::size_t state_size = 16;
  std::size_t expand = 2;
  std::size_t token_grid = 4;
  bool bidirectional = false;
  bool positional_encoding = false;
  std::string dum_variant = "tanh";                 // tanh | sigmoid_scope
  std::string dum_order = "linear_then_shuffle";    // linear_then_shuffle | shuffle_then_linear
  std::size_t dum_groups = 4;
  std::size_t dum_mid_channels = 64;
  double offset_bound = 0.25;
  std::vector<std::size_t> pool_ratios{1, 1, 2, 2, 4, 8};
  bool use_cflma = true;
  bool use_cflmd = true;
  std::uint64_t seed = 0;
  double learning_rate = 1e-3;
  std::size_t steps = 500;
  std::size_t batch_size = 4;
  std::size_t eval_every = 50;
  std::size_t eval_samples = 32;
  std::string dtype = "f32";
  bool log_wall_time = false;

  /// Named starting points: "default", "quick" (500 steps), "full" (5000 steps).
  static ModelConfig preset(const std::string& name) {
    ModelConfig c;
    if (name == "default") return c;
    if (name == "quick" || name == "full") {
      // The stride-32 level of a 64x64 input is 2x2, so the token grid is 2.
      c.token_grid = 2;
      c.steps = name == "quick" ? 500 : 5000;
      return c;
    }
    throw ConfigError("unknown preset '" + name + "'");
  }

  /// Smallest configuration that exercises every code path; used for gradient checks.
  static ModelConfig reduced() {
    ModelConfig c;
    c.input_size = 32;
    c.backbone_channels = {4, 8, 8, 8};
    c.unified_channels = 16;
    c.state_size = 4;
    c.token_grid = 1;
    c.dum_mid_channels = 8;
    c.batch_size = 1;
    c.dtype = "f64";
    return c;
  }

  std::size_t expanded_width() const { return expand * unified_channels; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (input_size == 0 || input_size % 32 != 0) fail("input_size must be a positive multiple of 32");
    if (backbone_channels.size() != 4) fail("backbone_channels must list 4 stages");
    for (auto c : backbone_channels)
      if (c == 0) fail("backbone_channels entries must be positive");
    if (unified_channels == 0 || state_size == 0 || expand == 0) fail("channel widths must be positive");
    if (token_grid == 0 || token_grid > input_size / 32) fail("token_grid must be in [1, input_size/32]");
    if (dum_variant != "tanh" && dum_variant != "sigmoid_scope") fail("dum_variant must be tanh or sigmoid_scope");
    if (dum_order != "linear_then_shuffle" && dum_order != "shuffle_then_linear")
      fail("dum_order must be linear_then_shuffle or shuffle_then_linear");
    if (dum_groups == 0 || unified_channels % dum_groups != 0) fail("dum_groups must divide unified_channels");
    if (dum_mid_channels == 0) fail("dum_mid_channels must be positive");
    if (!(offset_bound > 0)) fail("offset_bound must be positive");
    if (pool_ratios.empty()) fail("pool_ratios must not be empty");
    for (auto r : pool_ratios) {
      if (r == 0 || (input_size / 4) % r != 0) fail("pool ratios must divide the stride-4 extent");
      if (dum_order == "shuffle_then_linear") {
        const std::size_t src = dum_variant == "tanh" ? dum_mid_channels : unified_channels;
        if (src % (r * r) != 0) fail("shuffle_then_linear needs offset-source channels divisible by r^2");
      }
    }
    if (!(learning_rate >= 0)) fail("learning_rate must be >= 0");
    if (batch_size == 0) fail("batch_size must be positive");
    if (eval_every == 0) fail("eval_every must be positive");
    if (dtype != "f32" && dtype != "f64") fail("dtype must be f32 or f64");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"input_size", c.input_size},
      {"backbone_channels", c.backbone_channels},
      {"unified_channels", c.unified_channels},
      {"state_size", c.state_size},
      {"expand", c.expand},
      {"token_grid", c.token_grid},
      {"bidirectional", c.bidirectional},
      {"positional_encoding", c.positional_encoding},
      {"dum_variant", c.dum_variant},
      {"dum_order", c.dum_order},
      {"dum_groups", c.dum_groups},
      {"dum_mid_channels", c.dum_mid_channels},
      {"offset_bound", c.offset_bound},
      {"pool_ratios", c.pool_ratios},
      {"use_cflma", c.use_cflma},
      {"use_cflmd", c.use_cflmd},
      {"seed", c.seed},
      {"learning_rate", c.learning_rate},
      {"steps", c.steps},
      {"batch_size", c.batch_size},
      {"eval_every", c.eval_every},
      {"eval_samples", c.eval_samples},
      {"dtype", c.dtype},
      {"log_wall_time", c.log_wall_time},
  };
}

namespace config_detail {

template <typename V>
void read_key(const nlohmann::json& j, const std::string& key, V& out) {
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad value for '" + key + "': " + e.what());
  }
}

}  // namespace config_detail

/// Applies one key to the config; throws on unknown keys or ill-typed values.
inline void apply_config_key(ModelConfig& c, const std::string& key, const nlohmann::json& value) {
  using config_detail::read_key;
  const nlohmann::json j = {{key, value}};
  if (key == "input_size") read_key(j, key, c.input_size);
  else if (key == "backbone_channels") read_key(j, key, c.backbone_channels);
  else if (key == "unified_channels") read_key(j, key, c.unified_channels);
  else if (key == "state_size") read_key(j, key, c.state_size);
  else if (key == "expand") read_key(j, key, c.expand);
  else if (key == "token_grid") read_key(j, key, c.token_grid);
  else if (key == "bidirectional") read_key(j, key, c.bidirectional);
  else if (key == "positional_encoding") read_key(j, key, c.positional_encoding);
  else if (key == "dum_variant") read_key(j, key, c.dum_variant);
  else if (key == "dum_order") read_key(j, key, c.dum_order);
  else if (key == "dum_groups") read_key(j, key, c.dum_groups);
  else if (key == "dum_mid_channels") read_key(j, key, c.dum_mid_channels);
  else if (key == "offset_bound") read_key(j, key, c.offset_bound);
  else if (key == "pool_ratios") read_key(j, key, c.pool_ratios);
  else if (key == "use_cflma") read_key(j, key, c.use_cflma);
  else if (key == "use_cflmd") read_key(j, key, c.use_cflmd);
  else if (key == "seed") read_key(j, key, c.seed);
  else if (key == "learning_rate") read_key(j, key, c.learning_rate);
  else if (key == "steps") read_key(j, key, c.steps);
  else if (key == "batch_size") read_key(j, key, c.batch_size);
  else if (key == "eval_every") read_key(j, key, c.eval_every);
  else if (key == "eval_samples") read_key(j, key, c.eval_samples);
  else if (key == "dtype") read_key(j, key, c.dtype);
  else if (key == "log_wall_time") read_key(j, key, c.log_wall_time);
  else throw ConfigError("unknown key '" + key + "'");
}

/// Parses a config object. An optional "preset" key picks the starting point;
/// every other key overrides it.
inline ModelConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ModelConfig c;
  if (j.contains("preset")) {
    if (!j["preset"].is_string()) throw ConfigError("'preset' must be a string");
    c = ModelConfig::preset(j["preset"].get<std::string>());
  }
  for (const auto& [key, value] : j.items()) {
    if (key == "preset") continue;
    apply_config_key(c, key, value);
  }
  c.validate();
  return c;
}

/// "key=value" override; the value is parsed as JSON, falling back to a string.
inline void apply_override(ModelConfig& c, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + kv + "' is not key=value");
  const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  apply_config_key(c, key, value);
}

inline std::string config_to_string(const ModelConfig& c) { return nlohmann::json(c).dump(2) + "\n"; }

}  // namespace cfmd
