// SPDX-License-Identifier: Apache-2.0
//
// End-to-end run of one architecture: multi-trial training followed by
// evaluation of every surviving trial, plus the full and desk presets.

#pragma once

#include <string>
#include <vector>

#include "rrnet/architectures.hpp"
#include "rrnet/data.hpp"
#include "rrnet/evaluation.hpp"
#include "rrnet/training.hpp"

namespace rrnet {

/// Scale-dependent settings. "full" is the complete protocol; "desk" shrinks the
/// long window and subsamples targets so five architectures times several
/// trials finish on one core in well under an hour.
struct Preset {
  std::string name;
  std::size_t long_len = 5040;
  std::size_t sample_stride = 1;  // keep every k-th target hour for training/validation
  std::size_t eval_stride = 1;    // keep every k-th target hour for metrics
  std::size_t batch_size = 512;
  std::size_t patience = 30;
  std::size_t max_epochs = 500;
  std::size_t n_trials = 5;
  double lr = 1e-3;
};

inline Preset preset_full() { return {"full", 5040, 1, 1, 512, 30, 500, 5, 1e-3}; }

inline Preset preset_desk() { return {"desk", 720, 48, 24, 32, 6, 25, 3, 3e-3}; }

inline Preset preset_by_name(const std::string& name) {
  if (name == "full") return preset_full();
  if (name == "desk") return preset_desk();
  throw ConfigError("unknown preset '" + name + "' (expected full or desk)");
}

struct RunOptions {
  std::size_t sample_stride = 1;
  std::size_t eval_stride = 1;
};

struct ArchRun {
  TrialsResult trials;
  MetricsReport report;
  std::vector<ModelEvaluation> evaluations;  // parallel to report.trial_ids
};

inline ArchRun train_and_evaluate(const ModelSpec& spec, const PreparedData& data, const TrainConfig& cfg,
                                  const RunOptions& opt, const TrialLogSink& sink = {}) {
  spec.validate();
  cfg.validate();
  if (opt.sample_stride < 1 || opt.eval_stride < 1) throw ConfigError("strides must be >= 1");
  const WindowSet train(data.hourly, data.daily, spec, data.splits.train, {opt.sample_stride});
  const WindowSet val(data.hourly, data.daily, spec, data.splits.val, {opt.sample_stride});
  ArchRun run;
  run.trials = run_trials(spec, data, train, val, cfg, sink);
  MetricsReport& rep = run.report;
  rep.arch = kind_id(spec.kind);
  rep.spec = spec;
  rep.data_hash = data_hash(data.raw);
  for (const auto& t : run.trials.trials) {
    rep.seeds.push_back(t.seed);
    if (!t.outcome) {
      rep.notes.push_back("trial " + std::to_string(t.index) + " aborted: " + t.error);
      continue;
    }
    auto model = model_from_checkpoint(t.outcome->checkpoint);
    run.evaluations.push_back(evaluate_model(*model, data, opt.eval_stride));
    rep.add_trial(t.index, run.evaluations.back());
  }
  rep.finalize();
  return run;
}

}  // namespace rrnet
