// cfmd: inference, toy training, gradient checks, scan benchmark and property
// self-test. Data goes to stdout, logs to stderr.
//
// Exit codes: 0 ok, 1 check failure, 2 bad arguments or config,
// 3 file/format error, 4 shape/contract error, 5 training divergence.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cfmd/image.hpp"
#include "cfmd/parallel.hpp"
#include "cfmd/scan_bench.hpp"
#include "cfmd/testing/gradient_suites.hpp"
#include "cfmd/testing/property_suites.hpp"
#include "cfmd/train.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kBadArgs = 2, kIo = 3, kContract = 4, kDiverged = 5 };

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string dtype;  // empty: the subcommand's default
  unsigned threads = 0;
  bool json = false;
};

int exit_code_for(const cfmd::Error& e) {
  switch (e.kind()) {
    case cfmd::ErrorKind::io:
    case cfmd::ErrorKind::format:
      return kIo;
    case cfmd::ErrorKind::config:
      return kBadArgs;
    case cfmd::ErrorKind::training:
      return kDiverged;
    case cfmd::ErrorKind::shape:
    case cfmd::ErrorKind::size:
    case cfmd::ErrorKind::contract:
    case cfmd::ErrorKind::numeric:
      return kContract;
    default:
      return kCheckFailed;
  }
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ------------------------------------------------------------------ infer

struct InferArgs {
  std::string model;
  std::vector<std::string> inputs, outputs;
  bool pad = false;
};

template <cfmd::Scalar T>
cfmd::Tensor<T> to_rgb(const cfmd::Tensor<T>& img) {
  if (img.shape().c() == 3) return img;
  const cfmd::Shape s = img.shape();
  std::vector<T> v;
  v.reserve(3 * img.numel());
  for (int c = 0; c < 3; ++c) v.insert(v.end(), img.data().begin(), img.data().end());
  return cfmd::Tensor<T>(cfmd::Shape(1, 3, s.h(), s.w()), std::move(v));
}

template <cfmd::Scalar T>
cfmd::Tensor<T> zero_pad(const cfmd::Tensor<T>& x, std::size_t H, std::size_t W) {
  const cfmd::Shape s = x.shape();
  cfmd::Tensor<T> out(cfmd::Shape(s.n(), s.c(), H, W));
  auto o = out.mutable_data();
  for (std::size_t c = 0; c < s.c(); ++c)
    for (std::size_t y = 0; y < s.h(); ++y)
      for (std::size_t x_ = 0; x_ < s.w(); ++x_) o[out.shape().offset(0, c, y, x_)] = x.at(0, c, y, x_);
  return out;
}

template <cfmd::Scalar T>
cfmd::Tensor<T> crop(const cfmd::Tensor<T>& x, std::size_t H, std::size_t W) {
  if (x.shape().h() == H && x.shape().w() == W) return x;
  cfmd::Tensor<T> out(cfmd::Shape(1, x.shape().c(), H, W));
  auto o = out.mutable_data();
  for (std::size_t c = 0; c < x.shape().c(); ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x_ = 0; x_ < W; ++x_) o[out.shape().offset(0, c, y, x_)] = x.at(0, c, y, x_);
  return out;
}

template <cfmd::Scalar T>
int run_infer(const InferArgs& a, const cfmd::ModelConfig& cfg, const Globals& g) {
  const auto params = cfmd::load_checkpoint<T>(a.model, cfg);
  for (std::size_t i = 0; i < a.inputs.size(); ++i) {
    const cfmd::Tensor<T> img = to_rgb(cfmd::image_read<T>(a.inputs[i]));
    const std::size_t H = img.shape().h(), W = img.shape().w();
    cfmd::Tensor<T> x = img;
    if (H % 32 != 0 || W % 32 != 0) {
      if (!a.pad) {
        throw cfmd::ContractError(a.inputs[i] + " is " + std::to_string(W) + "x" + std::to_string(H) +
                                  ", not a multiple of 32 (use --pad)");
      }
      x = zero_pad(img, (H + 31) / 32 * 32, (W + 31) / 32 * 32);
    }
    const cfmd::Tensor<T> sal = crop(cfmd::predict(x, params, cfg), H, W);
    cfmd::image_write(sal, a.outputs[i]);
    double lo = INFINITY, hi = -INFINITY, sum = 0;
    for (T v : sal.data()) {
      lo = std::min(lo, double(v));
      hi = std::max(hi, double(v));
      sum += v;
    }
    const double mean = sum / static_cast<double>(sal.numel());
    if (g.json) {
      std::cout << ordered_json{{"input", a.inputs[i]}, {"output", a.outputs[i]}, {"min", lo}, {"max", hi}, {"mean", mean}}.dump()
                << "\n";
    } else {
      std::cout << a.outputs[i] << " min=" << num(lo) << " max=" << num(hi) << " mean=" << num(mean) << "\n";
    }
    std::cerr << "wrote " << a.outputs[i] << "\n";
  }
  return kOk;
}

int cmd_infer(const InferArgs& a, const Globals& g) {
  if (a.inputs.size() != a.outputs.size()) {
    std::cerr << "error: " << a.inputs.size() << " --input paths but " << a.outputs.size() << " --output paths\n";
    return kBadArgs;
  }
  for (const auto& in : a.inputs) {
    if (!fs::exists(in)) {
      std::cerr << "error: input file not found: " << in << "\n";
      return kIo;
    }
  }
  if (!fs::is_directory(a.model)) {
    std::cerr << "error: checkpoint directory not found: " << a.model << "\n";
    return kIo;
  }
  cfmd::ModelConfig cfg = cfmd::load_checkpoint_config(a.model);
  if (!g.dtype.empty()) cfg.dtype = g.dtype;
  return cfg.dtype == "f64" ? run_infer<double>(a, cfg, g) : run_infer<float>(a, cfg, g);
}

// ------------------------------------------------------------------ train-toy

struct TrainArgs {
  std::string config, out, preset = "quick";
  std::vector<std::string> overrides;
};

template <cfmd::Scalar T>
int run_train(const cfmd::ModelConfig& cfg, const TrainArgs& a, const Globals& g) {
  const fs::path out(a.out);
  std::ofstream metrics(out / "metrics.jsonl");
  if (!metrics) throw cfmd::IoError("cannot write " + (out / "metrics.jsonl").string());
  const auto res = cfmd::train_toy<T>(cfg, [&](const cfmd::MetricsRecord& r) {
    const std::string line = cfmd::metrics_line(r);
    metrics << line << "\n" << std::flush;
    if (g.json) std::cout << line << "\n" << std::flush;
    std::cerr << "step " << r.step << " loss " << num(r.loss) << " pix_acc " << num(r.pix_acc) << " mae " << num(r.mae)
              << "\n";
  });
  if (!metrics) throw cfmd::IoError("failed writing " + (out / "metrics.jsonl").string());
  cfmd::save_checkpoint((out / "checkpoint").string(), res.params, cfg);
  const auto& last = res.log.back();
  if (!g.json) {
    std::cout << ordered_json{{"step", last.step}, {"loss", last.loss}, {"pix_acc", last.pix_acc}, {"mae", last.mae}}.dump()
              << "\n";
  }
  std::cerr << "checkpoint written to " << (out / "checkpoint").string() << "\n";
  return kOk;
}

int cmd_train(const TrainArgs& a, const Globals& g) {
  // Resolve the full configuration before any computation.
  cfmd::ModelConfig cfg;
  try {
    if (!a.config.empty()) {
      cfg = cfmd::config_from_json(cfmd::read_json_file(a.config));
    } else {
      cfg = cfmd::ModelConfig::preset(a.preset);
    }
    for (const auto& kv : a.overrides) cfmd::apply_override(cfg, kv);
    if (g.seed_given) cfg.seed = g.seed;
    if (!g.dtype.empty()) cfg.dtype = g.dtype;
    cfg.validate();
  } catch (const cfmd::ConfigError& e) {
    std::cerr << e.what() << "\n";
    return kBadArgs;
  }
  const fs::path out(a.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw cfmd::IoError("cannot create " + out.string() + ": " + ec.message());
  {
    std::ofstream f(out / "resolved-config.json");
    f << cfmd::config_to_string(cfg);
    if (!f) throw cfmd::IoError("cannot write " + (out / "resolved-config.json").string());
  }
  try {
    return cfg.dtype == "f64" ? run_train<double>(cfg, a, g) : run_train<float>(cfg, a, g);
  } catch (const cfmd::NumericError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kDiverged;
  }
}

// ------------------------------------------------------------------ checks

ordered_json result_json(const cfmd::checks::CheckResult& r) {
  return {{"name", r.name}, {"passed", r.passed}, {"value", r.value}, {"threshold", r.threshold}, {"detail", r.detail}};
}

int report_failures(const std::vector<cfmd::checks::CheckResult>& rs, const char* what) {
  std::string failed;
  for (const auto& r : rs)
    if (!r.passed) failed += (failed.empty() ? "" : ", ") + r.name;
  if (failed.empty()) {
    std::cerr << what << ": all " << rs.size() << " checks passed\n";
    return kOk;
  }
  std::cerr << what << " failed: " << failed << "\n";
  return kCheckFailed;
}

int cmd_gradcheck(const std::string& scope, const std::string& corrupt, const Globals& g) {
  if (scope != "ops" && scope != "modules" && scope != "model" && scope != "all") {
    std::cerr << "error: unknown scope '" << scope << "'\n";
    return kBadArgs;
  }
  const auto rs = cfmd::checks::run_gradient_checks(scope, g.seed, corrupt, [&](const cfmd::checks::CheckResult& r) {
    if (!g.json) {
      std::printf("%-52s max_rel_error=%.3e threshold=%.0e %s  %s\n", r.name.c_str(), r.value, r.threshold,
                  r.passed ? "PASS" : "FAIL", r.detail.c_str());
      std::fflush(stdout);
    }
  });
  if (g.json) {
    ordered_json arr = ordered_json::array();
    for (const auto& r : rs) arr.push_back(result_json(r));
    std::cout << ordered_json{{"scope", scope}, {"seed", g.seed}, {"checks", arr}}.dump(2) << "\n";
  }
  return report_failures(rs, "gradcheck");
}

struct SelftestArgs {
  std::string filter, output;
};

int cmd_selftest(const SelftestArgs& a, const Globals& g) {
  std::map<std::string, std::string> module_of;
  for (const auto& s : cfmd::checks::property_suites()) module_of[s.name] = s.module;
  const auto rs = cfmd::checks::run_property_suites(g.seed, a.filter, [&](const cfmd::checks::CheckResult& r) {
    std::cerr << (r.passed ? "pass " : "FAIL ") << r.name << "\n";
  });
  ordered_json arr = ordered_json::array();
  std::size_t passed = 0;
  for (const auto& r : rs) {
    ordered_json j = result_json(r);
    j["module"] = module_of[r.name];
    arr.push_back(j);
    passed += r.passed;
  }
  const ordered_json doc{{"seed", g.seed}, {"suites", arr}, {"passed", passed}, {"failed", rs.size() - passed}};
  if (!a.output.empty()) {
    std::ofstream f(a.output);
    f << doc.dump(2) << "\n";
    if (!f) throw cfmd::IoError("cannot write " + a.output);
  }
  if (g.json) {
    std::cout << doc.dump(2) << "\n";
  } else {
    std::printf("%-6s %-12s %-30s %-13s %-13s %s\n", "result", "module", "suite", "value", "threshold", "detail");
    for (const auto& r : rs) {
      std::printf("%-6s %-12s %-30s %-13.6g %-13.6g %s\n", r.passed ? "PASS" : "FAIL", module_of[r.name].c_str(),
                  r.name.c_str(), r.value, r.threshold, r.detail.c_str());
    }
    std::printf("%zu suites, %zu passed, %zu failed\n", rs.size(), passed, rs.size() - passed);
  }
  return report_failures(rs, "selftest");
}

struct BenchArgs {
  std::vector<std::size_t> lengths{256, 1024, 4096};
  std::size_t width = 64, state = 16;
  std::vector<std::size_t> blocks{32};
  int reps = 3;
};

int cmd_scan_bench(const BenchArgs& a, const Globals& g) {
  cfmd::BenchOptions opt;
  opt.lengths = a.lengths;
  opt.width = a.width;
  opt.state = a.state;
  opt.blocks = a.blocks;
  opt.reps = a.reps;
  opt.seed = g.seed;
  for (std::size_t b : opt.blocks) {
    if (b == 0) {
      std::cerr << "error: --block must be >= 1\n";
      return kBadArgs;
    }
  }
  const auto outcome = g.dtype == "f32" ? cfmd::run_scan_bench<float>(opt) : cfmd::run_scan_bench<double>(opt);
  if (!outcome.oracle_ok) {
    std::cerr << "oracle mismatch: " << outcome.failure << "\n";
    return kCheckFailed;
  }
  if (g.json) {
    ordered_json arr = ordered_json::array();
    for (const auto& r : outcome.rows) {
      arr.push_back({{"L", r.L}, {"D", r.D}, {"S", r.S}, {"variant", r.variant}, {"block", r.block},
                     {"seconds", r.seconds}, {"elements_per_second", r.elements_per_second}});
    }
    std::cout << arr.dump(2) << "\n";
  } else {
    std::cout << cfmd::bench_csv_header() << "\n";
    for (const auto& r : outcome.rows) std::cout << cfmd::bench_csv_row(r) << "\n";
  }
  const auto ratios = cfmd::doubling_ratios(outcome.rows);
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    std::cerr << "sequential time growth per doubling of L, step " << i + 1 << ": " << num(ratios[i])
              << (ratios[i] >= 1.5 && ratios[i] <= 3.0 ? " (within [1.5, 3])" : " (outside [1.5, 3])") << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CFMD salient-object-detection toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--dtype", g.dtype, "Scalar type")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--threads", g.threads, "Worker threads (default: hardware concurrency)");
  app.add_flag("--json", g.json, "Machine-readable output");

  InferArgs infer;
  auto* c_infer = app.add_subcommand("infer", "Run a checkpoint on PPM/PGM images, write PGM saliency maps");
  c_infer->add_option("--model", infer.model, "Checkpoint directory")->required();
  c_infer->add_option("--input", infer.inputs, "Input image(s)")->required();
  c_infer->add_option("--output", infer.outputs, "Output PGM path(s), one per input")->required();
  c_infer->add_flag("--pad", infer.pad, "Zero-pad inputs to a multiple of 32");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train-toy", "Train on the synthetic dataset");
  c_train->add_option("--config", train.config, "JSON config file");
  c_train->add_option("--preset", train.preset, "Preset used when no --config is given")
      ->check(CLI::IsMember({"default", "quick", "full"}));
  c_train->add_option("--out", train.out, "Output directory")->required();
  c_train->add_option("overrides", train.overrides, "key=value config overrides");

  std::string scope = "ops", corrupt;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  c_grad->add_option("--scope", scope, "ops | modules | model | all");
  c_grad->add_option("--corrupt", corrupt, "Test hook: scale the analytic gradient of this check by 1.5")
      ->group("");

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("scan-bench", "Time the sequential and blocked scans (CSV)");
  c_bench->add_option("--lengths", bench.lengths, "Sequence lengths")->delimiter(',');
  c_bench->add_option("--width", bench.width, "Channels D");
  c_bench->add_option("--state", bench.state, "State size S");
  c_bench->add_option("--block", bench.blocks, "Block size(s) of the blocked scan")->delimiter(',');
  c_bench->add_option("--reps", bench.reps, "Timing repetitions (best is reported)");

  SelftestArgs self;
  auto* c_self = app.add_subcommand("selftest", "Run every property suite");
  c_self->add_option("--filter", self.filter, "Only suites whose name contains this text");
  c_self->add_option("--output", self.output, "Also write the JSON results to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadArgs;
  }
  g.seed_given = app.count("--seed") > 0;

  if (g.threads > 0) cfmd::set_num_threads(g.threads);
  try {
    if (*c_infer) return cmd_infer(infer, g);
    if (*c_train) return cmd_train(train, g);
    if (*c_grad) return cmd_gradcheck(scope, corrupt, g);
    if (*c_bench) return cmd_scan_bench(bench, g);
    if (*c_self) return cmd_selftest(self, g);
  } catch (const cfmd::Error& e) {
    std::cerr << e.what() << "\n";
    return exit_code_for(e);
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kBadArgs;
}
