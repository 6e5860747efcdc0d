#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "CLI11.hpp"
#include "json.hpp"

#include "dsmstcn/harness.hpp"
#include "dsmstcn/oracles.hpp"
#include "dsmstcn/synthgen.hpp"

// Command-line front end. Exit codes: 0 success, 1 validation or configuration error,
// 2 runtime failure.
//
// The configuration file is JSON with optional top-level sections:
//   "scenario"  synthetic generator settings (see ScenarioSpec)
//   "model", "loss", "adam", "train"  training settings (see TrainConfig)
//   "data"      dataset directory
//   "protocol"  "lab_losocv" or "home_generalization"
// Flags override the file.

namespace dsmstcn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitRuntime = 2;

class config_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Invocation {
  std::string command;
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<double> eta;
  std::optional<double> micro_budget;
  std::optional<std::size_t> epochs;
  std::size_t jobs = 1;
  bool verbose = false;
  std::string data_dir;
  std::string checkpoint;
  std::string fold;
  std::string protocol;
  double gradient_fault = 0.0;  // selfcheck test hook
};

struct Context {
  Invocation inv;
  nlohmann::json config = nlohmann::json::object();
  std::ostream& out;
  std::ostream& err;
};

inline nlohmann::json load_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  if (!std::filesystem::exists(path)) throw config_error("config file not found: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw config_error("config " + path + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    static const std::set<std::string> known{"scenario", "model", "loss", "adam", "train", "data", "protocol"};
    if (!known.contains(key)) throw config_error("config " + path + ": unknown section '" + key + "'");
  }
  return j;
}

inline TrainConfig resolve_train_config(const Context& ctx) {
  TrainConfig c = train_config_from_json(ctx.config);
  if (ctx.inv.seed) c.seed = *ctx.inv.seed;
  if (ctx.inv.mode) c.model.mode = parse_mode(*ctx.inv.mode);
  if (ctx.inv.eta) c.loss.eta = *ctx.inv.eta;
  if (ctx.inv.micro_budget) c.micro_budget = *ctx.inv.micro_budget;
  if (ctx.inv.epochs) c.epochs = *ctx.inv.epochs;
  c.validate();
  return c;
}

inline std::string resolve_data_dir(const Context& ctx) {
  std::string dir = ctx.inv.data_dir;
  if (dir.empty() && ctx.config.contains("data")) dir = ctx.config.at("data").get<std::string>();
  if (dir.empty()) throw config_error("no dataset directory (use --data or the \"data\" config entry)");
  if (!std::filesystem::exists(std::filesystem::path(dir) / "manifest.json")) {
    throw config_error("no manifest.json in dataset directory " + dir);
  }
  return dir;
}

inline std::filesystem::path require_out_dir(const Context& ctx) {
  if (ctx.inv.out_dir.empty()) throw config_error(ctx.inv.command + ": --out is required");
  std::filesystem::create_directories(ctx.inv.out_dir);
  return ctx.inv.out_dir;
}

/// Written before any other artifact of a run.
inline void write_run_manifest(const std::filesystem::path& dir, const Context& ctx, const std::string& config_hash,
                               const nlohmann::ordered_json& resolved, const nlohmann::ordered_json& seeds) {
  nlohmann::ordered_json m;
  m["command"] = ctx.inv.command;
  m["config_hash"] = config_hash;
  m["config"] = resolved;
  m["seeds"] = seeds;
  m["versions"] = {{"dsmstcn", "0.1.0"},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                 std::to_string(EIGEN_MINOR_VERSION)},
                   {"compiler", __VERSION__}};
  write_file((dir / "run_manifest.json").string(), m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------

inline int cmd_synth(Context& ctx) {
  ScenarioSpec spec = ctx.config.contains("scenario") ? spec_from_json(ctx.config.at("scenario")) : ScenarioSpec{};
  if (ctx.inv.seed) spec.seed = *ctx.inv.seed;
  spec.validate();
  const auto dir = require_out_dir(ctx);
  const auto spec_json = spec_to_json(spec);
  nlohmann::ordered_json seeds = nlohmann::ordered_json::object();
  seeds["master"] = spec.seed;
  for (std::size_t i = 0; i < spec.subjects + spec.home_subjects; ++i) {
    const auto p = subject_profile(spec, i);
    seeds[p.subject] = p.seed;
  }
  write_run_manifest(dir, ctx, sha256_hex(spec_json.dump()), spec_json, seeds);
  const DatasetFiles files = generate_dataset(spec, dir.string());
  ctx.out << files.manifest_path << '\n';
  if (ctx.inv.verbose) {
    for (const auto& f : files.signal_files) ctx.err << "wrote " << f << '\n';
  }
  return kExitOk;
}

inline Fold select_fold(const Context& ctx, const Dataset& ds) {
  Fold all;
  all.test_subject = "all";
  for (const auto& r : ds.recordings) all.train_recordings.push_back(r.id);
  if (ctx.inv.fold.empty()) return all;
  const std::string p = ctx.inv.protocol.empty() ? ctx.config.value("protocol", std::string("lab_losocv")) : ctx.inv.protocol;
  const FoldPlan plan = build_folds(ds.infos(), parse_protocol(p));
  for (const auto& f : plan.folds) {
    if (f.test_subject == ctx.inv.fold) return f;
  }
  throw config_error("no fold for subject '" + ctx.inv.fold + "' under " + p);
}

inline int cmd_train(Context& ctx) {
  const TrainConfig config = resolve_train_config(ctx);
  const Dataset ds = load_dataset(resolve_data_dir(ctx));
  const Fold fold = select_fold(ctx, ds);
  const auto dir = require_out_dir(ctx);
  write_run_manifest(dir, ctx, config_hash(config), to_json(config),
                     {{"master", config.seed}, {fold.test_subject, fold_seed(config.seed, fold.test_subject)}});
  std::ofstream log(dir / "run.log", std::ios::app);
  const TrainedModel tm = train_fold(fold, ds, config, [&](const StepLog& s) {
    log << format_step(s) << '\n';
    if (ctx.inv.verbose) ctx.err << format_step(s) << '\n';
  });
  for (const auto& e : tm.log.epochs) log << format_epoch(e) << '\n';
  save_checkpoint((dir / "checkpoint.bin").string(), tm.checkpoint);
  ctx.out << (dir / "checkpoint.bin").string() << '\n';
  return kExitOk;
}

inline int cmd_eval(Context& ctx) {
  if (ctx.inv.checkpoint.empty()) throw config_error("eval: --checkpoint is required");
  const TrainConfig config = resolve_train_config(ctx);
  if (!std::filesystem::exists(ctx.inv.checkpoint)) throw config_error("checkpoint not found: " + ctx.inv.checkpoint);
  const Checkpoint ckpt = load_checkpoint(ctx.inv.checkpoint, &config.model);
  const Dataset ds = load_dataset(resolve_data_dir(ctx));
  Fold fold = select_fold(ctx, ds);
  if (ctx.inv.fold.empty()) fold.test_recordings = fold.train_recordings;
  const auto dir = require_out_dir(ctx);
  write_run_manifest(dir, ctx, config_hash(config), to_json(config), {{"master", config.seed}});
  const Evaluation ev = evaluate_fold(ckpt, fold, ds);
  const std::string text = evaluation_to_text(ev);
  write_file((dir / "report.tsv").string(), report_to_tsv(ev.macro));
  write_file((dir / "evaluation.txt").string(), text);
  ctx.out << text;
  return kExitOk;
}

inline int cmd_protocol(Context& ctx) {
  const TrainConfig config = resolve_train_config(ctx);
  const Dataset ds = load_dataset(resolve_data_dir(ctx));
  const std::string pname =
      ctx.inv.protocol.empty() ? ctx.config.value("protocol", std::string("lab_losocv")) : ctx.inv.protocol;
  const Protocol protocol = parse_protocol(pname);
  const FoldPlan plan = build_folds(ds.infos(), protocol);
  const auto dir = require_out_dir(ctx);
  nlohmann::ordered_json seeds;
  seeds["master"] = config.seed;
  for (const auto& f : plan.folds) seeds[f.test_subject] = fold_seed(config.seed, f.test_subject);
  auto resolved = to_json(config);
  resolved["protocol"] = pname;
  write_run_manifest(dir, ctx, config_hash(config), resolved, seeds);

  std::ofstream log(dir / "run.log", std::ios::app);
  std::mutex log_mutex;
  ProtocolOptions opt;
  opt.jobs = ctx.inv.jobs;
  opt.on_step = [&](const StepLog& s) {
    std::lock_guard lock(log_mutex);
    log << format_step(s) << '\n';
    if (ctx.inv.verbose) ctx.err << format_step(s) << '\n';
  };
  opt.on_fold = [&](const FoldResult& fr) {
    const auto fdir = dir / "folds" / fr.fold.test_subject;
    std::filesystem::create_directories(fdir);
    if (!fr.error.empty()) {
      write_file((fdir / "error.txt").string(), fr.error + "\n");
      ctx.err << fr.error << '\n';
      return;
    }
    save_checkpoint((fdir / "checkpoint.bin").string(), fr.model.checkpoint);
    write_file((fdir / "report.tsv").string(), report_to_tsv(fr.evaluation.macro));
    write_file((fdir / "evaluation.txt").string(), evaluation_to_text(fr.evaluation));
    std::lock_guard lock(log_mutex);
    for (const auto& e : fr.model.log.epochs) log << format_epoch(e) << '\n';
    if (ctx.inv.verbose) ctx.err << "fold " << fr.fold.test_subject << " done\n";
  };
  const ProtocolResult result = run_protocol(ds, protocol, config, opt);
  write_file((dir / "aggregate.tsv").string(), report_to_tsv(result.aggregate.macro));
  write_file((dir / "aggregate_evaluation.txt").string(), evaluation_to_text(result.aggregate));
  ctx.out << (dir / "aggregate.tsv").string() << '\n';
  return result.ok() ? kExitOk : kExitRuntime;
}

struct CheckLine {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// The four self-check families, each compared against its independent reference.
inline std::vector<CheckLine> run_selfcheck(double gradient_fault = 0.0) {
  std::vector<CheckLine> lines;
  {
    double worst = 0.0;
    std::size_t checked = 0, skipped = 0;
    for (bool detach : {true, false}) {
      oracles::GradientCheckOptions o;
      o.detach_previous = detach;
      o.fault = gradient_fault;
      const auto r = oracles::gradient_check(o);
      worst = std::max(worst, r.max_relative_error);
      checked += r.checked;
      skipped += r.skipped;
    }
    lines.push_back({"gradient_check", worst < 1e-4,
                     "max_rel_error=" + format_double(worst) + " checked=" + std::to_string(checked) +
                         " skipped=" + std::to_string(skipped)});
  }
  {
    const auto r = oracles::receptive_field_check();
    const bool ok = r.inside_window && r.last_changed + 1 - r.first_changed == r.expected_width;
    lines.push_back({"receptive_field", ok,
                     "changed=[" + std::to_string(r.first_changed) + ", " + std::to_string(r.last_changed) +
                         "] expected_width=" + std::to_string(r.expected_width)});
  }
  {
    const auto r = oracles::matcher_sweep(2000, 17);
    lines.push_back({"metrics_oracle", r.mismatches == 0,
                     "pairs=" + std::to_string(r.pairs) + " mismatches=" + std::to_string(r.mismatches)});
  }
  {
    const double tm = oracles::tmse_truncated_contribution();
    const double ce = oracles::uniform_cross_entropy(5);
    const bool ok = std::abs(tm - 16.0) < 1e-12 && std::abs(ce - std::log(5.0) / 5.0) < 1e-12;
    lines.push_back({"tmse_hand_values", ok, "truncated=" + format_double(tm) + " uniform_ce=" + format_double(ce)});
  }
  return lines;
}

inline int cmd_selfcheck(Context& ctx) {
  const auto lines = run_selfcheck(ctx.inv.gradient_fault);
  std::string text;
  bool ok = true;
  for (const auto& l : lines) {
    text += std::string(l.passed ? "PASS " : "FAIL ") + l.name + " " + l.detail + "\n";
    ok = ok && l.passed;
  }
  if (!ctx.inv.out_dir.empty()) {
    const auto dir = require_out_dir(ctx);
    write_run_manifest(dir, ctx, sha256_hex("selfcheck"), nlohmann::ordered_json::object(), nlohmann::ordered_json::object());
    write_file((dir / "selfcheck.txt").string(), text);
  }
  ctx.out << text;
  return ok ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Dual-scale multi-stage TCN for exercise recognition from IMU data"};
  app.require_subcommand(1);
  Invocation inv;
  std::uint64_t seed = 0;
  std::string mode;
  double eta = 0.0, budget = 0.0;
  std::size_t epochs = 0;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", inv.config_path, "JSON configuration file");
    sub->add_option("--out", inv.out_dir, "Output directory");
    sub->add_option("--seed", seed, "Seed override");
    sub->add_flag("--verbose", inv.verbose, "Print progress to stderr");
  };
  auto training = [&](CLI::App* sub) {
    sub->add_option("--data", inv.data_dir, "Dataset directory (with manifest.json)");
    sub->add_option("--mode", mode, "dual_scale | ablation_no_micro | dual_scale_two_micro");
    sub->add_option("--eta", eta, "Weight of the micro cross entropy");
    sub->add_option("--micro-budget", budget, "Fraction of micro segments used for training");
    sub->add_option("--epochs", epochs, "Epoch count override");
    sub->add_option("--fold", inv.fold, "Restrict to the fold holding out this subject");
    sub->add_option("--protocol", inv.protocol, "lab_losocv | home_generalization");
  };
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  common(synth);
  CLI::App* train = app.add_subcommand("train", "Train one model");
  common(train);
  training(train);
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on full recordings");
  common(eval);
  training(eval);
  eval->add_option("--checkpoint", inv.checkpoint, "Checkpoint file");
  CLI::App* protocol = app.add_subcommand("protocol", "Run a leave-one-subject-out protocol");
  common(protocol);
  training(protocol);
  protocol->add_option("--jobs", inv.jobs, "Folds trained concurrently")->check(CLI::PositiveNumber);
  CLI::App* selfcheck = app.add_subcommand("selfcheck", "Run the built-in reference checks");
  selfcheck->add_option("--out", inv.out_dir, "Output directory");
  selfcheck->add_flag("--verbose", inv.verbose, "Print progress to stderr");
  selfcheck->add_option("--inject-gradient-fault", inv.gradient_fault)->group("");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInvalid;
  }
  for (CLI::App* sub : app.get_subcommands()) {
    inv.command = sub->get_name();
    if (sub->get_option_no_throw("--seed") && sub->count("--seed")) inv.seed = seed;
    if (sub->get_option_no_throw("--mode") && sub->count("--mode")) inv.mode = mode;
    if (sub->get_option_no_throw("--eta") && sub->count("--eta")) inv.eta = eta;
    if (sub->get_option_no_throw("--micro-budget") && sub->count("--micro-budget")) inv.micro_budget = budget;
    if (sub->get_option_no_throw("--epochs") && sub->count("--epochs")) inv.epochs = epochs;
  }

  Context ctx{inv, {}, out, err};
  try {
    ctx.config = load_config(inv.config_path);
    if (inv.command == "synth") return cmd_synth(ctx);
    if (inv.command == "train") return cmd_train(ctx);
    if (inv.command == "eval") return cmd_eval(ctx);
    if (inv.command == "protocol") return cmd_protocol(ctx);
    return cmd_selfcheck(ctx);
  } catch (const std::invalid_argument& e) {  // validation, shape and configuration errors
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const validation_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace dsmstcn::cli
