// ctanet: analyze | train | eval | gradcheck | ablate
//
// Exit codes: 0 ok, 1 gradient check failed, 2 config error, 3 data error,
// 4 numerical failure.

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cta/ablate.hpp"
#include "cta/checkpoint.hpp"
#include "cta/config.hpp"
#include "cta/cost.hpp"
#include "cta/gradcheck_suite.hpp"
#include "cta/train.hpp"

namespace fs = std::filesystem;
using namespace cta;

namespace {

enum ExitCode { kOk = 0, kCheckFailed = 1, kConfigError = 2, kDataError = 3, kNumericalError = 4 };

struct CommonFlags {
  std::string config;
  std::string preset = "tiny";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> dtype, out_dir, attention, rrcv, scales, data_kind, data_root;
  std::optional<std::size_t> subset, epochs, batch_size, kv_reduction;
  bool augment = false;
  std::vector<std::string> sets;

  void attach(CLI::App& cmd) {
    // a repeated scalar flag keeps its last value
    cmd.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    cmd.add_option("--config", config, "key = value config file (flat dotted keys)");
    cmd.add_option("--preset", preset, "model preset applied before the config file")
        ->check(CLI::IsMember({"tiny", "paper"}));
    cmd.add_option("--seed", seed, "sets train.seed and data.seed");
    cmd.add_option("--dtype", dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    cmd.add_option("--out-dir", out_dir, "parent directory for run directories");
    cmd.add_option("--attention", attention, "mhsa or lmf_mhsa");
    cmd.add_option("--rrcv", rrcv, "none, cnn, dwconv or resnet");
    cmd.add_option("--scales", scales, "fusion kernel sizes, e.g. 1,3,5 or none");
    cmd.add_option("--kv-reduction", kv_reduction, "K/V token reduction ratio");
    cmd.add_option("--data", data_kind, "cifar10, cifar100 or synthetic");
    cmd.add_option("--data-root", data_root, "directory with the CIFAR binary batches");
    cmd.add_option("--subset", subset, "stratified training subset size");
    cmd.add_option("--epochs", epochs, "epoch budget");
    cmd.add_option("--batch-size", batch_size, "samples per step");
    cmd.add_flag("--augment", augment, "enable crop, flip, rotation and jitter");
    cmd.add_option("--set", sets, "override any key: --set model.depth=2 (repeatable)")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  }

  /// preset, then config file, then flags, then --set overrides.
  RunConfig resolve() const {
    RunConfig rc = cta::preset(preset);
    if (!config.empty()) apply_config_file(rc, config);
    auto set = [&rc](const char* key, const std::string& v) { set_config_value(rc, key, v); };
    if (seed) {
      set("train.seed", std::to_string(*seed));
      set("data.seed", std::to_string(*seed));
    }
    if (dtype) set("train.dtype", *dtype);
    if (out_dir) set("run.out_dir", *out_dir);
    if (attention) set("model.attention", *attention);
    if (rrcv) set("model.rrcv", *rrcv);
    if (scales) set("model.kernel_scales", *scales);
    if (kv_reduction) set("model.kv_reduction", std::to_string(*kv_reduction));
    if (data_kind) set("data.kind", *data_kind);
    if (data_root) set("data.root", *data_root);
    if (subset) set("data.subset", std::to_string(*subset));
    if (epochs) set("train.epochs", std::to_string(*epochs));
    if (batch_size) set("train.batch_size", std::to_string(*batch_size));
    if (augment) rc.data.augment = AugmentFlags::all();
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_config_value(rc, detail::trim(kv.substr(0, eq)), kv.substr(eq + 1));
    }
    rc.validate();
    return rc;
  }
};

/// <out_dir>/<command>-<config hash>-<UTC timestamp>[-n]
fs::path make_run_dir(const RunConfig& rc, const std::string& command) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
  const fs::path base = fs::path(rc.run.out_dir) / (command + "-" + config_hash(rc) + "-" + stamp);
  fs::path dir = base;
  for (int n = 1; fs::exists(dir); ++n) dir = base.string() + "-" + std::to_string(n);
  fs::create_directories(dir);
  std::ofstream(dir / "config.txt") << config_echo(rc, true);
  return dir;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  return os;
}

// --- analyze -----------------------------------------------------------------

int cmd_analyze(const RunConfig& rc, const std::string& format, const std::string& out, std::size_t batch) {
  const auto fmt = parse_table_format(format);
  const auto cmp = compare_attention_costs(rc.model, batch);
  std::cout << emit_table({cmp.baseline, cmp.candidate}, TableFormat::aligned_text) << '\n'
            << format_reductions(rc.model, batch);
  if (!out.empty()) {
    open_out(out) << emit_table({cmp.baseline, cmp.candidate}, fmt);
    std::cout << "wrote " << out << '\n';
  }
  return kOk;
}

// --- train / eval ----------------------------------------------------------------

template <typename T>
int run_train(const RunConfig& rc, const std::string& resume) {
  const auto train = load_dataset(rc.data, Split::train);
  const auto val = load_dataset(rc.data, Split::test);
  auto net = model_init<T>(rc.model, rc.train.seed);
  OptimizerState<T> state;
  std::size_t start = 0;
  if (!resume.empty()) {
    auto ck = load_checkpoint<T>(resume);
    if (!(ck.net.cfg == rc.model)) throw ConfigError("checkpoint " + resume + " was saved with a different model config");
    if (ck.rng.key() != rc.train.seed)
      throw ConfigError("checkpoint " + resume + " was trained with seed " + std::to_string(ck.rng.key()));
    net = ck.net;
    if (ck.optimizer) state = *ck.optimizer;
    start = ck.epoch;
  }
  const auto dir = make_run_dir(rc, "train");
  std::cout << "run directory: " << dir.string() << '\n'
            << "train " << train.size() << " images, val " << val.size() << ", params " << net.parameter_count()
            << ", dtype " << rc.train.dtype << '\n';
  auto csv = open_out(dir / "metrics.csv");
  csv << kMetricsHeader << '\n';
  fit(net, train, val, state, rc.train, start, rc.data.augment, [&](const MetricsRow& row) {
    csv << format_metrics_row(row) << '\n' << std::flush;
    std::cout << "epoch " << std::setw(3) << row.epoch << "  train loss " << std::fixed << std::setprecision(4)
              << row.train_loss << " top1 " << row.train_top1 << "  val loss " << row.val_loss << " top1 "
              << row.val_top1 << "  " << std::setprecision(1) << row.wall_seconds << "s" << std::defaultfloat << '\n';
    if (row.epoch % rc.run.checkpoint_every == 0 || row.epoch == rc.train.epochs) {
      char name[40];
      std::snprintf(name, sizeof name, "epoch%03zu.ckpt", row.epoch);
      save_checkpoint(dir / name, Checkpoint<T>(net, state, row.epoch, CounterRng(rc.train.seed, row.epoch)));
    }
  });
  return kOk;
}

template <typename T>
int run_eval(const RunConfig& rc, const std::string& checkpoint, const std::string& split) {
  const auto ck = load_checkpoint<T>(checkpoint);
  const auto ds = load_dataset(rc.data, parse_split(split));
  const auto r = evaluate(ck.net, ds);
  std::cout << std::setprecision(17) << "split " << split << " images " << ds.size() << " loss " << r.loss << " top1 "
            << r.top1 << '\n';
  return kOk;
}

// --- gradcheck -------------------------------------------------------------------

int cmd_gradcheck(const RunConfig& rc, bool no_model, bool inject_fault, std::size_t coords, const std::string& out) {
  SuiteOptions opt;
  opt.model = rc.model;
  opt.include_model = !no_model;
  opt.inject_fault = inject_fault;
  opt.model_coords = coords;
  opt.seed = rc.train.seed + 7;
  std::cout << "f64 central differences, eps 1e-5\n";
  const auto rows = run_gradcheck_suite(opt, [](const SuiteRow& r) { print_suite_row(std::cout, r); });
  std::size_t failed = 0;
  for (const auto& r : rows) failed += !r.passed();
  if (!out.empty()) {
    auto os = open_out(out);
    os << "op,kind,max_rel_error,tolerance,coords,passed,seconds\n";
    for (const auto& r : rows)
      os << r.op << ',' << to_string(r.kind) << ',' << std::setprecision(6) << r.result.max_rel_error << ','
         << r.tolerance << ',' << r.result.coords_checked << ',' << (r.passed() ? 1 : 0) << ',' << r.seconds << '\n';
  }
  std::cout << rows.size() - failed << "/" << rows.size() << " checks passed\n";
  return failed ? kCheckFailed : kOk;
}

// --- ablate ----------------------------------------------------------------------

template <typename T>
int run_ablate(const RunConfig& rc, std::optional<std::size_t> only_cell, const std::string& out) {
  const auto cells = ablation_cells(rc);
  if (only_cell && *only_cell >= cells.size())
    throw ConfigError("--cell " + std::to_string(*only_cell) + " out of range (grid has " +
                      std::to_string(cells.size()) + " cells)");
  const auto train = load_dataset(rc.data, Split::train);
  const auto val = load_dataset(rc.data, Split::test);
  const auto dir = make_run_dir(rc, "ablate");
  std::cout << "run directory: " << dir.string() << '\n' << cells.size() << " cells\n";
  auto summary = open_out(dir / "summary.csv");
  summary << kAblationHeader << '\n';
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (only_cell && i != *only_cell) continue;
    std::vector<MetricsRow> history;
    const auto row = run_ablation_cell<T>(cells[i], train, val, &history);
    auto metrics = open_out(dir / (cells[i].id + "_metrics.csv"));
    metrics << kMetricsHeader << '\n';
    for (const auto& m : history) metrics << format_metrics_row(m) << '\n';
    std::ofstream(dir / (cells[i].id + "_config.txt")) << config_echo(cells[i].cfg, true);
    summary << row.csv() << '\n' << std::flush;
    lines.push_back(row.csv());
    std::cout << row.cell << "  " << std::left << std::setw(9) << to_string(row.attention) << std::setw(7)
              << to_string(row.rrcv) << std::setw(8) << scales_to_string(row.scales) << std::right << " batch "
              << row.batch << " depth " << row.depth << " heads " << row.heads << "  top1 " << std::fixed
              << std::setprecision(4) << row.top1 << std::defaultfloat << "  params " << row.params << "  flops "
              << row.flops << '\n';
  }
  if (!out.empty()) {
    auto os = open_out(out);
    os << kAblationHeader << '\n';
    for (const auto& l : lines) os << l << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CNN-transformer image classifier: cost analysis, training, evaluation, gradient checks, ablations"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand all help");

  CommonFlags common;

  auto* analyze = app.add_subcommand("analyze", "parameter and FLOP tables for the model and its MHSA baseline");
  common.attach(*analyze);
  std::string format = "text", out;
  std::size_t batch = 1;
  analyze->add_option("--format", format, "text or csv (applies to --out)");
  analyze->add_option("--out", out, "write the tables to this file");
  analyze->add_option("--batch", batch, "batch size for MAC counts");

  auto* train = app.add_subcommand("train", "train and write metrics.csv plus checkpoints to a run directory");
  common.attach(*train);
  std::string resume;
  train->add_option("--resume", resume, "continue from a checkpoint written by train");

  auto* eval = app.add_subcommand("eval", "loss and top-1 of a checkpoint");
  common.attach(*eval);
  std::string checkpoint, split = "test";
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));

  auto* grad = app.add_subcommand("gradcheck", "f64 finite-difference check of every op, layer and the full model");
  common.attach(*grad);
  bool no_model = false, inject_fault = false;
  std::size_t coords = 6;
  grad->add_flag("--no-model", no_model, "skip the full-model check");
  grad->add_flag("--inject-fault", inject_fault, "add an op with a wrong backward (must fail)");
  grad->add_option("--model-coords", coords, "coordinates per parameter tensor in the model check");
  grad->add_option("--out", out, "write the report as CSV");

  auto* ablate = app.add_subcommand("ablate", "train every cell of a grid and write summary.csv");
  common.attach(*ablate);
  std::string ladder;
  std::vector<std::string> grid_sets;
  std::optional<std::size_t> only_cell;
  ablate->add_option("--ladder", ladder, "components, variants or scales");
  ablate->add_option("--grid", grid_sets, "axis list: --grid rrcv=cnn,resnet --grid scales='1;3' (repeatable)");
  ablate->add_option("--cell", only_cell, "run only this cell index");
  ablate->add_option("--out", out, "also write the summary CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (ablate->parsed()) {
      for (const auto& g : grid_sets) {
        const auto eq = g.find('=');
        if (eq == std::string::npos) throw ConfigError("--grid expects axis=values, got '" + g + "'");
        common.sets.push_back("grid." + g.substr(0, eq) + "=" + g.substr(eq + 1));
      }
      if (!ladder.empty()) common.sets.push_back("grid.ladder=" + ladder);
    }
    const RunConfig rc = common.resolve();
    const bool f64 = rc.train.dtype == "f64";
    if (analyze->parsed()) return cmd_analyze(rc, format, out, batch);
    if (train->parsed()) return f64 ? run_train<double>(rc, resume) : run_train<float>(rc, resume);
    if (eval->parsed())
      return checkpoint_dtype(checkpoint) == "f64" ? run_eval<double>(rc, checkpoint, split)
                                                   : run_eval<float>(rc, checkpoint, split);
    if (grad->parsed()) return cmd_gradcheck(rc, no_model, inject_fault, coords, out);
    if (ablate->parsed()) return f64 ? run_ablate<double>(rc, only_cell, out) : run_ablate<float>(rc, only_cell, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumericalError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kCheckFailed;
  }
  return kOk;
}
