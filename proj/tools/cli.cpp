#include "cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fusereg/gradcheck_suite.hpp"
#include "fusereg/io.hpp"
#include "fusereg/metrics.hpp"
#include "fusereg/warp.hpp"

namespace fusereg::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Non-finite values become null.
json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

void print_rows(const std::vector<std::pair<std::string, std::string>>& rows) {
  std::size_t width = 0;
  for (const auto& [k, v] : rows) width = std::max(width, k.size());
  for (const auto& [k, v] : rows) std::cout << k << std::string(width - k.size() + 2, ' ') << v << "\n";
}

std::string fmt(double v) {
  if (std::isnan(v)) return "undefined";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

ModelConfig config_or_default(const std::string& path) {
  ModelConfig cfg = path.empty() ? ModelConfig::desk() : load_config(path);
  cfg.validate();
  return cfg;
}

Tensor<double> load_single(const std::string& path) {
  return as_single_channel(load_volume<double>(path), path.c_str());
}

struct SynthArgs {
  std::string out;
  std::size_t shape = 32;
  std::uint64_t seed = 0;
  double amplitude = 3.0;
  double smoothness = 5.0;
};

int cmd_synth(const SynthArgs& a, bool as_json) {
  SynthOptions o;
  o.seed = a.seed;
  o.shape = {a.shape, a.shape, a.shape};
  o.amplitude = a.amplitude;
  o.smoothness = a.smoothness;
  const auto pair = synth_pair(o);
  save_pair(a.out, pair);
  const double pre = ssim(pair.moving, pair.fixed);
  if (as_json) {
    print_json({{"out", a.out},
                {"shape", o.shape},
                {"seed", a.seed},
                {"amplitude", pair.amplitude},
                {"halvings", pair.halvings},
                {"ssim_pre", pre}});
  } else {
    print_rows({{"out", a.out},
                {"shape", std::to_string(a.shape) + "^3"},
                {"amplitude", fmt(pair.amplitude)},
                {"halvings", std::to_string(pair.halvings)},
                {"ssim(moving, fixed)", fmt(pre)}});
  }
  return kOk;
}

struct TrainArgs {
  std::string config, data, out, resume;
};

int cmd_train(const TrainArgs& a, bool as_json) {
  const ModelConfig cfg = config_or_default(a.config);
  const auto pairs = load_pairs(a.data);
  const auto [train_set, val_set] = split_pairs(pairs, cfg.seed);
  std::optional<Checkpoint> resume;
  TrainOptions opts;
  if (!a.resume.empty()) {
    resume = load_checkpoint(a.resume);
    opts.resume = &*resume;
  }
  const std::size_t epochs = cfg.optimizer.epochs;
  opts.on_epoch = [epochs](const TrainingRecord& r) {
    std::fprintf(stderr, "epoch %zu/%zu  train_loss %.6f  val_loss %.6f  train_ssim %.4f  val_ssim %.4f\n", r.epoch,
                 epochs, r.train_loss, r.val_loss, r.train_ssim, r.val_ssim);
  };
  const auto result = train_model(cfg, train_set, val_set, opts);
  fs::create_directories(a.out);
  const fs::path out(a.out);
  save_checkpoint((out / "last.cbor").string(), result.last);
  const bool has_best = !result.best.params.empty();
  if (has_best) save_checkpoint((out / "best.cbor").string(), result.best);
  export_curve_csv(result.curve, (out / "curve.csv").string());
  write_file_atomic((out / "config.json").string(), to_json(cfg).dump(2) + "\n");

  const auto& last = result.curve.back();
  if (as_json) {
    print_json({{"out", a.out},
                {"train_pairs", train_set.size()},
                {"val_pairs", val_set.size()},
                {"epochs", last.epoch},
                {"final_train_loss", num(last.train_loss)},
                {"final_val_ssim", num(last.val_ssim)},
                {"best_epoch", result.last.best_epoch},
                {"best_val_ssim", num(result.last.best_val_ssim)},
                {"config_hash", config_hash(cfg)}});
  } else {
    print_rows({{"pairs (train/val)", std::to_string(train_set.size()) + "/" + std::to_string(val_set.size())},
                {"epochs", std::to_string(last.epoch)},
                {"final train loss", fmt(last.train_loss)},
                {"final val SSIM", fmt(last.val_ssim)},
                {"best epoch", std::to_string(result.last.best_epoch)},
                {"best val SSIM", fmt(result.last.best_val_ssim)},
                {"checkpoints", (out / "last.cbor").string() + (has_best ? ", " + (out / "best.cbor").string() : "")}});
  }
  return kOk;
}

struct RegisterArgs {
  std::string checkpoint, moving, fixed, out_field, report, out_warped;
};

json report_json(const RegistrationReport& r, const std::string& hash) {
  json j = report_to_json(r, hash);
  for (auto& [k, v] : j.items()) {
    if (v.is_number_float() && !std::isfinite(v.get<double>())) v = nullptr;
  }
  return j;
}

void print_report(const RegistrationReport& r) {
  print_rows({{"SSIM", fmt(r.ssim)},
              {"HD95", fmt(r.hd95)},
              {"SDlogJ", fmt(r.sdlogj)},
              {"NCC", fmt(r.ncc)},
              {"loss (total)", fmt(r.loss_total)},
              {"loss (similarity)", fmt(r.loss_sim)},
              {"loss (smoothness)", fmt(r.loss_smooth)},
              {"det J <= 0 fraction", fmt(r.nonpositive_jacobian_fraction)}});
}

int cmd_register(const RegisterArgs& a, bool as_json) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const auto reg = register_pair(ckpt, load_single(a.moving), load_single(a.fixed));
  const std::string hash = config_hash(ckpt.config);
  save_volume(a.out_field, reg.field);
  save_report(a.report, reg.report, hash);
  if (!a.out_warped.empty()) save_volume(a.out_warped, reg.warped);
  if (as_json) {
    print_json(report_json(reg.report, hash));
  } else {
    print_report(reg.report);
  }
  return kOk;
}

struct MetricsArgs {
  std::string a, b, field;
};

int cmd_metrics(const MetricsArgs& m) {
  const auto a = load_single(m.a);
  const auto b = load_single(m.b);
  json j;
  j["ssim"] = num(ssim(a, b));
  try {
    j["hd95"] = num(hd95(mask_from_volume(a), mask_from_volume(b)));
  } catch (const MetricUndefinedError&) {
    j["hd95"] = nullptr;
  }
  j["sdlogj"] = nullptr;
  if (!m.field.empty()) {
    const auto field = load_volume<double>(m.field);
    try {
      const auto js = jacobian_stats(field);
      j["sdlogj"] = num(js.sdlogj);
      j["nonpositive_jacobian_fraction"] = num(js.folding_fraction);
    } catch (const MetricUndefinedError&) {
      j["nonpositive_jacobian_fraction"] = 1.0;
    }
  }
  print_json(j);
  return kOk;
}

int cmd_params(const std::string& config, bool as_json) {
  const ModelConfig cfg = config_or_default(config);
  const ParamTable t = count_params(cfg);
  if (as_json) {
    json rows = json::array();
    for (const auto& r : t.rows) rows.push_back({{"module", r.module}, {"params", r.count}});
    print_json({{"rows", rows}, {"total", t.total}, {"config_hash", config_hash(cfg)}});
    return kOk;
  }
  std::size_t width = 6;
  for (const auto& r : t.rows) width = std::max(width, r.module.size());
  std::printf("%-*s  %12s\n", static_cast<int>(width), "Module", "Params");
  for (const auto& r : t.rows) std::printf("%-*s  %12zu\n", static_cast<int>(width), r.module.c_str(), r.count);
  std::printf("%-*s  %12zu\n", static_cast<int>(width), "Total", t.total);
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& sabotage, bool as_json) {
  GradcheckSuiteOptions o;
  o.seed = seed;
  o.sabotage = sabotage;
  const auto cases = run_gradcheck_suite(o);
  bool ok = true;
  json rows = json::array();
  for (const auto& c : cases) {
    ok = ok && c.passed;
    rows.push_back({{"name", c.name},
                    {"max_rel_error", num(c.result.max_rel_error)},
                    {"coords", c.result.coords_checked},
                    {"seconds", c.seconds},
                    {"passed", c.passed}});
  }
  if (as_json) {
    print_json({{"tolerance", o.tolerance}, {"cases", rows}, {"passed", ok}});
  } else {
    for (const auto& c : cases) {
      std::printf("%-26s max_rel_err %.3e  coords %5zu  %s\n", c.name.c_str(), c.result.max_rel_error,
                  c.result.coords_checked, c.passed ? "ok" : "FAIL");
    }
    std::printf("%s (tolerance %.0e)\n", ok ? "all checks passed" : "gradient check FAILED", o.tolerance);
  }
  return ok ? kOk : kNumericFailure;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Deformable registration engine: synthetic data, training, registration and metrics."};
  app.name("fusereg");
  app.require_subcommand(1);
  bool as_json = false;
  app.add_flag("--json", as_json, "Print machine-readable JSON on stdout");
  app.set_version_flag("--version", engine_version());

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a seeded synthetic moving/fixed pair and its ground-truth field");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--shape", sa.shape, "Cubic extent")->check(CLI::Range(std::size_t{8}, std::size_t{512}));
  synth->add_option("--seed", sa.seed, "Random seed");
  synth->add_option("--amplitude", sa.amplitude, "Max displacement in voxels")->check(CLI::NonNegativeNumber);
  synth->add_option("--smoothness", sa.smoothness, "Width of the displacement bumps in voxels")
      ->check(CLI::PositiveNumber);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train on the pairs under --data");
  train_cmd->add_option("--config", ta.config, "Model config JSON (default: desk preset)");
  train_cmd->add_option("--data", ta.data, "Pair directory, or a directory of pair directories")->required();
  train_cmd->add_option("--out", ta.out, "Output directory for checkpoints and curve.csv")->required();
  train_cmd->add_option("--resume", ta.resume, "Checkpoint to resume from");

  RegisterArgs ra;
  auto* reg = app.add_subcommand("register", "Predict the field for one pair and report metrics");
  reg->add_option("--checkpoint", ra.checkpoint, "Checkpoint (.cbor)")->required();
  reg->add_option("--moving", ra.moving, "Moving volume (.nmv)")->required();
  reg->add_option("--fixed", ra.fixed, "Fixed volume (.nmv)")->required();
  reg->add_option("--out-field", ra.out_field, "Output displacement field (.nmv)")->required();
  reg->add_option("--report", ra.report, "Output report (.json)")->required();
  reg->add_option("--out-warped", ra.out_warped, "Also write the warped moving volume");

  MetricsArgs ma;
  auto* metrics = app.add_subcommand("metrics", "SSIM and HD95 of two volumes, SDlogJ of an optional field (JSON)");
  metrics->add_option("--a", ma.a, "First volume")->required();
  metrics->add_option("--b", ma.b, "Second volume")->required();
  metrics->add_option("--field", ma.field, "Displacement field for SDlogJ");

  std::string params_config;
  auto* params = app.add_subcommand("params", "Parameter counts per module");
  params->add_option("--config", params_config, "Model config JSON (default: desk preset)");

  std::uint64_t gc_seed = 0;
  std::string sabotage;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite; exit 3 on failure");
  gc->add_option("--seed", gc_seed, "Random seed");
  gc->add_option("--sabotage", sabotage, "Scale the backward of this op by 0.5")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*synth) return cmd_synth(sa, as_json);
    if (*train_cmd) return cmd_train(ta, as_json);
    if (*reg) return cmd_register(ra, as_json);
    if (*metrics) return cmd_metrics(ma);
    if (*params) return cmd_params(params_config, as_json);
    if (*gc) return cmd_gradcheck(gc_seed, sabotage, as_json);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const MetricUndefinedError& e) {
    std::cerr << "undefined metric: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kUsage;
}

}  // namespace fusereg::cli
