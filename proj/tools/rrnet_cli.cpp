// SPDX-License-Identifier: Apache-2.0
//
// rrnet: generate synthetic basins, train/evaluate/compare the five
// architectures and run the gradient-check suite.
//
// Option precedence: command-line flags > --config file > --preset > built-in
// defaults. Outputs go under --output-root (default $RRNET_OUTPUT_ROOT, else
// ./rrnet_out) in checkpoints/, logs/, reports/ and predictions/.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "rrnet/rrnet.hpp"

namespace fs = std::filesystem;
using namespace rrnet;

namespace {

enum ExitCode { kOk = 0, kCheckFailed = 1, kConfigError = 2, kRuntimeError = 3 };

struct DataOpts {
  std::string path;
  std::string flow_name = "flow";
  int first_year = 0;  // 0: year of the first row
  int train_years = 9;
  int val_years = 2;
  int test_years = 2;
  bool sum_daily_precip = false;
};

struct ModelOpts {
  std::string arch = "cnnslstm";
  std::size_t nchf = 8;
  std::size_t hidden = 30;
  std::size_t long_len = 5040;
  bool align_padding = false;
};

struct TrainOpts {
  std::string preset = "full";
  std::size_t trials = 5;
  std::uint64_t seed = 0;
  std::size_t batch = 512;
  std::size_t patience = 30;
  std::size_t max_epochs = 500;
  double lr = 1e-3;
  std::size_t sample_stride = 1;
  std::size_t eval_stride = 1;
  std::size_t parallel = 1;
  bool quiet = false;
};

struct Layout {
  fs::path root;
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path logs() const { return root / "logs"; }
  fs::path reports() const { return root / "reports"; }
  fs::path predictions() const { return root / "predictions"; }

  void create() const {
    for (const auto& d : {checkpoints(), logs(), reports(), predictions()}) fs::create_directories(d);
  }
};

std::string default_root() {
  const char* env = std::getenv("RRNET_OUTPUT_ROOT");
  return env && *env ? env : "rrnet_out";
}

void add_data_options(CLI::App* cmd, DataOpts& d) {
  cmd->add_option("--data", d.path, "Hourly CSV (timestamp, inputs..., flow)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--flow-column", d.flow_name, "Name of the target column");
  cmd->add_option("--first-year", d.first_year, "First training year (default: year of the first row)");
  cmd->add_option("--train-years", d.train_years, "Training years")->check(CLI::PositiveNumber);
  cmd->add_option("--val-years", d.val_years, "Validation years")->check(CLI::NonNegativeNumber);
  cmd->add_option("--test-years", d.test_years, "Test years")->check(CLI::NonNegativeNumber);
  cmd->add_flag("--sum-daily-precip", d.sum_daily_precip, "Daily precipitation as totals instead of means");
}

void add_model_options(CLI::App* cmd, ModelOpts& m, bool arch_option = true) {
  if (arch_option) cmd->add_option("--arch", m.arch, "cnn | lstmwhour | lstmwdph | cnnplstm | cnnslstm");
  cmd->add_option("--nchf", m.nchf, "Channels of the first conv layer")->check(CLI::PositiveNumber);
  cmd->add_option("--hidden", m.hidden, "LSTM hidden size")->check(CLI::PositiveNumber);
  cmd->add_option("--long-len", m.long_len, "Long window in hours (default from preset)")->check(CLI::PositiveNumber);
  cmd->add_flag("--align-padding", m.align_padding, "Zero-pad mismatched LSTM input rows instead of failing");
}

void add_train_options(CLI::App* cmd, TrainOpts& t) {
  cmd->add_option("--preset", t.preset, "full | desk")->check(CLI::IsMember({"full", "desk"}));
  cmd->add_option("--trials", t.trials, "Independent trials")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", t.seed, "Base seed; trial k uses seed ^ k");
  cmd->add_option("--batch", t.batch, "Mini-batch size")->check(CLI::PositiveNumber);
  cmd->add_option("--patience", t.patience, "Early-stopping patience in epochs")->check(CLI::PositiveNumber);
  cmd->add_option("--max-epochs", t.max_epochs, "Epoch cap")->check(CLI::PositiveNumber);
  cmd->add_option("--lr", t.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  cmd->add_option("--sample-stride", t.sample_stride, "Keep every k-th target hour for training")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--eval-stride", t.eval_stride, "Keep every k-th target hour for metrics")->check(CLI::PositiveNumber);
  cmd->add_option("--parallel-trials", t.parallel, "Concurrent trials")->check(CLI::PositiveNumber);
  cmd->add_flag("--quiet", t.quiet, "No per-epoch progress");
}

/// Fills every option the user left unset from the preset.
void apply_preset(CLI::App* cmd, TrainOpts& t, ModelOpts& m) {
  const Preset p = preset_by_name(t.preset);
  auto unset = [&](const char* name) { return cmd->get_option(name)->count() == 0; };
  if (unset("--trials")) t.trials = p.n_trials;
  if (unset("--batch")) t.batch = p.batch_size;
  if (unset("--patience")) t.patience = p.patience;
  if (unset("--max-epochs")) t.max_epochs = p.max_epochs;
  if (unset("--lr")) t.lr = p.lr;
  if (unset("--sample-stride")) t.sample_stride = p.sample_stride;
  if (unset("--eval-stride")) t.eval_stride = p.eval_stride;
  if (unset("--long-len")) m.long_len = p.long_len;
}

TrainConfig train_config(const TrainOpts& t) {
  TrainConfig cfg;
  cfg.batch_size = t.batch;
  cfg.patience = t.patience;
  cfg.max_epochs = t.max_epochs;
  cfg.n_trials = t.trials;
  cfg.parallel_trials = t.parallel;
  cfg.adam.lr = t.lr;
  cfg.base_seed = t.seed;
  cfg.validate();
  return cfg;
}

ModelSpec model_spec(ModelKind kind, const ModelOpts& m, std::size_t n_vars) {
  ModelSpec spec = ModelSpec::defaults(kind, n_vars, m.nchf, m.long_len);
  spec.hidden_size = m.hidden;
  spec.align_padding = m.align_padding;
  spec.validate();
  return spec;
}

std::vector<ModelKind> parse_arch_list(const std::string& text) {
  std::vector<ModelKind> out;
  if (text == "all") return {std::begin(kAllKinds), std::end(kAllKinds)};
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_kind(item));
  }
  if (out.empty()) throw ConfigError("no architectures given");
  return out;
}

YearSplit year_split(const DataOpts& d, const SeriesTable& table) {
  const int first = d.first_year ? d.first_year : year_of(table.start);
  return YearSplit::from_counts(first, d.train_years, d.val_years, d.test_years);
}

PreparedData prepare(const DataOpts& d, SeriesTable table, const NormStats* hourly = nullptr,
                     const NormStats* daily = nullptr) {
  const YearSplit years = year_split(d, table);
  PreparedData data = prepare_data(std::move(table), years, {d.sum_daily_precip}, hourly, daily);
  for (const auto& w : data.warnings) std::cerr << "warning: " << w << "\n";
  return data;
}

PreparedData load_data(const DataOpts& d) { return prepare(d, ingest_csv(d.path, d.flow_name)); }

template <typename Fn>
void write_file(const fs::path& path, Fn&& body) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  body(out);
  if (!out) throw ConfigError("write failed for '" + path.string() + "'");
}

void print_median_table(const std::vector<MetricsReport>& reports) {
  std::printf("%-10s %-6s %10s %7s %7s %10s %10s %10s %10s\n", "arch", "period", "rmse", "r", "nse", "rmse_low",
              "rmse_mid", "rmse_high", "rmse_peak");
  auto cell = [](const std::optional<double>& v) {
    char buf[32];
    if (v) {
      std::snprintf(buf, sizeof buf, "%.4g", *v);
    } else {
      std::snprintf(buf, sizeof buf, "-");
    }
    return std::string(buf);
  };
  for (const auto& r : reports) {
    for (std::size_t p = 0; p < 3; ++p) {
      if (!r.median[p]) continue;
      const auto& m = *r.median[p];
      std::printf("%-10s %-6s %10.4g %7s %7s %10s %10s %10s %10s\n", r.arch.c_str(), kPeriodNames[p], m.rmse,
                  cell(m.r).c_str(), cell(m.nse).c_str(), cell(m.bands.low).c_str(), cell(m.bands.middle).c_str(),
                  cell(m.bands.high).c_str(), cell(m.bands.peak).c_str());
    }
  }
}

void write_predictions(const Layout& out, const std::string& stem, const std::vector<std::size_t>& trial_ids,
                       const std::vector<ModelEvaluation>& evals) {
  for (std::size_t p = 0; p < 3; ++p) {
    std::vector<PeriodPredictions> per_trial;
    for (std::size_t k = 0; k < evals.size(); ++k) {
      if (evals[k].predictions[p].time.empty()) continue;
      per_trial.push_back(evals[k].predictions[p]);
      const auto name = stem + "_trial" + std::to_string(trial_ids[k]) + "_" + kPeriodNames[p] + ".csv";
      write_file(out.predictions() / name, [&](std::ostream& os) { write_predictions_csv(evals[k].predictions[p], os); });
    }
    if (!per_trial.empty()) {
      const auto median = median_predictions(per_trial);
      write_file(out.predictions() / (stem + "_median_" + kPeriodNames[p] + ".csv"),
                 [&](std::ostream& os) { write_predictions_csv(median, os); });
    }
  }
}

void write_report(const Layout& out, const std::string& stem, const MetricsReport& report) {
  write_file(out.reports() / (stem + "_metrics.csv"), [&](std::ostream& os) { write_metrics_csv(report, os); });
  write_file(out.reports() / (stem + "_metrics.json"),
             [&](std::ostream& os) { os << metrics_json(report).dump(2) << "\n"; });
}

/// Trains one architecture and writes all of its outputs.
MetricsReport run_architecture(const ModelSpec& spec, const PreparedData& data, const TrainConfig& cfg,
                               const TrainOpts& t, const Layout& out) {
  const std::string arch = kind_id(spec.kind);
  std::ofstream loss_log(out.logs() / (arch + "_loss.csv"));
  if (!loss_log) throw ConfigError("cannot write loss log in '" + out.logs().string() + "'");
  loss_log << "trial,epoch,train_loss,val_loss\n";
  auto sink = [&](std::size_t k, const EpochLog& e) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.10g,%.10g", e.train_loss, e.val_loss);
    loss_log << k << "," << e.epoch << "," << buf << "\n" << std::flush;
    if (!t.quiet) std::fprintf(stderr, "[%s] trial %zu epoch %zu train %.5f val %.5f\n", arch.c_str(), k, e.epoch,
                               e.train_loss, e.val_loss);
  };
  ArchRun run = train_and_evaluate(spec, data, cfg, {t.sample_stride, t.eval_stride}, sink);
  for (const auto& rec : run.trials.trials) {
    if (rec.outcome) {
      save_checkpoint(rec.outcome->checkpoint, out.checkpoints() / (arch + "_trial" + std::to_string(rec.index) + ".ckpt"));
    } else {
      std::fprintf(stderr, "[%s] trial %zu aborted: %s\n", arch.c_str(), rec.index, rec.error.c_str());
    }
  }
  save_checkpoint(run.trials.best_checkpoint(), out.checkpoints() / (arch + "_best.ckpt"));
  write_report(out, arch, run.report);
  write_predictions(out, arch, run.report.trial_ids, run.evaluations);
  return run.report;
}

// ---------------------------------------------------------------------------

int cmd_generate(int years, std::uint64_t seed, int start_year, const std::string& params, const std::string& output,
                 CLI::App* cmd) {
  SyntheticConfig cfg;
  if (!params.empty()) {
    std::ifstream in(params);
    if (!in) throw ConfigError("cannot open parameter file '" + params + "'");
    cfg = SyntheticConfig::parse(in);
  }
  if (cmd->get_option("--years")->count() || params.empty()) cfg.years = years;
  if (cmd->get_option("--seed")->count() || params.empty()) cfg.seed = seed;
  if (cmd->get_option("--start-year")->count() || params.empty()) cfg.start_year = start_year;
  cfg.validate();
  const SeriesTable table = generate_synthetic(cfg);
  export_csv(table, output);
  std::printf("wrote %zu hours x %zu inputs to %s\n", table.n_hours(), table.n_vars(), output.c_str());
  return kOk;
}

int cmd_train(const DataOpts& d, const ModelOpts& m, const TrainOpts& t, const Layout& out) {
  const TrainConfig cfg = train_config(t);
  const ModelKind kind = parse_kind(m.arch);
  PreparedData data = load_data(d);
  const ModelSpec spec = model_spec(kind, m, data.raw.n_vars());
  out.create();
  const MetricsReport report = run_architecture(spec, data, cfg, t, out);
  print_median_table({report});
  return kOk;
}

int cmd_compare(const DataOpts& d, const ModelOpts& m, const std::string& archs, const TrainOpts& t, const Layout& out) {
  const TrainConfig cfg = train_config(t);
  const auto kinds = parse_arch_list(archs);
  PreparedData data = load_data(d);
  std::vector<ModelSpec> specs;
  for (ModelKind k : kinds) specs.push_back(model_spec(k, m, data.raw.n_vars()));
  out.create();
  std::vector<MetricsReport> reports;
  for (const auto& spec : specs) reports.push_back(run_architecture(spec, data, cfg, t, out));
  write_file(out.reports() / "compare.csv", [&](std::ostream& os) { write_compare_csv(reports, os); });
  print_median_table(reports);
  return kOk;
}

int cmd_evaluate(const DataOpts& d, const std::string& ckpt_path, std::size_t eval_stride, std::string tag,
                 const std::string& lag_name, std::size_t max_lag, const Layout& out) {
  if (ckpt_path.empty() && lag_name.empty()) throw ConfigError("evaluate needs --checkpoint and/or --lag-corr");
  std::optional<Checkpoint> ckpt;
  if (!ckpt_path.empty()) ckpt = load_checkpoint(ckpt_path);
  SeriesTable table = ingest_csv(d.path, d.flow_name);
  if (ckpt) {
    if (ckpt->spec.n_vars != table.n_vars()) {
      throw ShapeError("dimension mismatch: checkpoint expects " + std::to_string(ckpt->spec.n_vars) +
                       " input variables, dataset '" + d.path + "' has " + std::to_string(table.n_vars()));
    }
    if (ckpt->hourly_stats.mean.size() != table.values.size()) {
      throw ShapeError("dimension mismatch: checkpoint normalisation covers " +
                       std::to_string(ckpt->hourly_stats.mean.size()) + " columns, dataset has " +
                       std::to_string(table.values.size()));
    }
  }
  PreparedData data = ckpt ? prepare(d, std::move(table), &ckpt->hourly_stats, &ckpt->daily_stats)
                           : prepare(d, std::move(table));
  out.create();
  if (ckpt) {
    auto model = model_from_checkpoint(*ckpt);
    const ModelEvaluation ev = evaluate_model(*model, data, eval_stride);
    if (tag.empty()) tag = kind_id(ckpt->spec.kind) + "_eval";
    MetricsReport report;
    report.arch = kind_id(ckpt->spec.kind);
    report.spec = ckpt->spec;
    report.seeds = {ckpt->seed};
    report.data_hash = data_hash(data.raw);
    report.add_trial(0, ev);
    report.finalize();
    write_report(out, tag, report);
    write_predictions(out, tag, report.trial_ids, {ev});
    print_median_table({report});
  }
  if (!lag_name.empty()) {
    const std::size_t col = data.raw.index_of(lag_name);
    const auto curve = lag_correlation(data.raw.flow(), data.raw.values[col], max_lag);
    const fs::path path = out.reports() / ("lag_" + lag_name + ".csv");
    write_file(path, [&](std::ostream& os) { write_lag_csv(curve, os); });
    std::printf("lag correlation (%zu lags) written to %s\n", curve.size(), path.string().c_str());
  }
  return kOk;
}

int cmd_gradcheck(const std::string& arch, std::uint64_t seed, std::size_t trials, const std::string& corrupt) {
  std::vector<std::string> components = {"conv1d", "pool1d_max", "pool1d_avg", "dense", "relu", "sigmoid", "tanh",
                                         "lstm_cell"};
  for (ModelKind k : parse_arch_list(arch)) components.push_back(kind_id(k));
  GradcheckOptions opt;
  opt.seed = seed;
  opt.trials = trials;
  opt.corrupt = corrupt;
  std::string failed;
  std::printf("%-12s %7s %7s %8s %12s  %-6s %s\n", "component", "trials", "checks", "redraws", "max_rel_err", "status",
              "worst tensor");
  for (const auto& c : components) {
    const GradcheckResult r = gradcheck_component(c, opt);
    if (!r.pass()) failed += (failed.empty() ? "" : ", ") + c;
    std::printf("%-12s %7zu %7zu %8zu %12.3e  %-6s %s\n", c.c_str(), r.trials, r.checks, r.redraws, r.max_rel_err,
                r.pass() ? "PASS" : "FAIL", r.worst_tensor.c_str());
  }
  if (failed.empty()) return kOk;
  std::fprintf(stderr, "gradient check failed: %s\n", failed.c_str());
  return kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rrnet: CNN/LSTM rainfall-runoff models"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI file; keys of a subcommand go under [<subcommand>]");
  std::string root = default_root();
  app.add_option("--output-root", root, "Output directory (env RRNET_OUTPUT_ROOT)");

  auto* gen = app.add_subcommand("generate", "Write a synthetic snow-dominated basin as hourly CSV");
  int years = 13;
  std::uint64_t gen_seed = 7;
  int start_year = 2007;
  std::string params, output;
  gen->add_option("--years", years, "Calendar years to simulate")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--start-year", start_year, "First calendar year");
  gen->add_option("--params", params, "key=value file of generator parameters")->check(CLI::ExistingFile);
  gen->add_option("-o,--output", output, "Output CSV")->required();

  DataOpts data_opts;
  ModelOpts model_opts;
  TrainOpts train_opts;

  auto* train = app.add_subcommand("train", "Train one architecture over several trials");
  add_data_options(train, data_opts);
  add_model_options(train, model_opts);
  add_train_options(train, train_opts);

  auto* compare = app.add_subcommand("compare", "Train several architectures on shared data and seeds");
  std::string archs = "all";
  add_data_options(compare, data_opts);
  add_model_options(compare, model_opts, false);
  add_train_options(compare, train_opts);
  compare->add_option("--archs", archs, "Comma-separated architectures or 'all'");

  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint and/or compute a lag-correlation curve");
  std::string ckpt_path, tag, lag_name;
  std::size_t eval_stride = 1, max_lag = 24;
  add_data_options(eval, data_opts);
  eval->add_option("--checkpoint", ckpt_path, "Checkpoint file")->check(CLI::ExistingFile);
  eval->add_option("--eval-stride", eval_stride, "Keep every k-th target hour")->check(CLI::PositiveNumber);
  eval->add_option("--tag", tag, "Stem of the output files");
  eval->add_option("--lag-corr", lag_name, "Input column to correlate against lagged flow");
  eval->add_option("--max-lag", max_lag, "Largest lag in hours");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every backward pass");
  std::string grad_arch = "all", corrupt;
  std::uint64_t grad_seed = 1;
  std::size_t grad_trials = 100;
  grad->add_option("--arch", grad_arch, "Architectures to check besides the layers: 'all' or a list");
  grad->add_option("--seed", grad_seed, "Seed");
  grad->add_option("--trials", grad_trials, "Randomized instances per component")->check(CLI::PositiveNumber);
  grad->add_option("--inject-fault", corrupt, "Scale one component's analytic gradient (negative control)");

  CLI11_PARSE(app, argc, argv);

  try {
    const Layout out{root};
    if (*gen) return cmd_generate(years, gen_seed, start_year, params, output, gen);
    if (*train) {
      apply_preset(train, train_opts, model_opts);
      return cmd_train(data_opts, model_opts, train_opts, out);
    }
    if (*compare) {
      apply_preset(compare, train_opts, model_opts);
      return cmd_compare(data_opts, model_opts, archs, train_opts, out);
    }
    if (*eval) return cmd_evaluate(data_opts, ckpt_path, eval_stride, tag, lag_name, max_lag, out);
    if (*grad) return cmd_gradcheck(grad_arch, grad_seed, grad_trials, corrupt);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kOk;
}
