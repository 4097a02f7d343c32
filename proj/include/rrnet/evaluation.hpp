// SPDX-License-Identifier: Apache-2.0
//
// Skill metrics, flow-band RMSE, cross-trial medians, lag correlation and the
// report/prediction writers.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rrnet/architectures.hpp"
#include "rrnet/data.hpp"
#include "rrnet/errors.hpp"
#include "rrnet/training.hpp"

namespace rrnet {

namespace detail {

inline void check_pair(std::span<const double> obs, std::span<const double> sim, std::size_t min_len, const char* what) {
  if (obs.size() != sim.size()) {
    throw ShapeError(std::string(what) + ": observed has " + std::to_string(obs.size()) + " values, simulated has " +
                     std::to_string(sim.size()));
  }
  if (obs.size() < min_len) {
    throw EmptyInputError(std::string(what) + " needs at least " + std::to_string(min_len) + " values");
  }
}

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

inline double rmse(std::span<const double> obs, std::span<const double> sim) {
  detail::check_pair(obs, sim, 1, "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < obs.size(); ++i) s += (obs[i] - sim[i]) * (obs[i] - sim[i]);
  return std::sqrt(s / static_cast<double>(obs.size()));
}

inline double nse(std::span<const double> obs, std::span<const double> sim) {
  detail::check_pair(obs, sim, 2, "nse");
  const double m = detail::mean_of(obs);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    num += (obs[i] - sim[i]) * (obs[i] - sim[i]);
    den += (obs[i] - m) * (obs[i] - m);
  }
  if (den == 0.0) throw UndefinedMetricError("nse: observed series is constant");
  return 1.0 - num / den;
}

inline double pearson_r(std::span<const double> obs, std::span<const double> sim) {
  detail::check_pair(obs, sim, 2, "pearson_r");
  const double mo = detail::mean_of(obs);
  const double ms = detail::mean_of(sim);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const double a = obs[i] - mo;
    const double b = sim[i] - ms;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedMetricError("pearson_r: constant series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct BandRmse {
  std::optional<double> low;
  std::optional<double> middle;
  std::optional<double> high;
  std::optional<double> peak;
  std::size_t n_low = 0, n_middle = 0, n_high = 0, n_peak = 0;
};

/// RMSE restricted to the timesteps whose observed value falls in each band.
inline BandRmse band_rmse(std::span<const double> obs, std::span<const double> sim, const FlowBands& bands) {
  detail::check_pair(obs, sim, 0, "band_rmse");
  double s[4] = {0, 0, 0, 0};
  std::size_t n[4] = {0, 0, 0, 0};
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const double e = (obs[i] - sim[i]) * (obs[i] - sim[i]);
    const BandClass c = bands.band_of(obs[i]);
    const auto b = static_cast<std::size_t>(c.band);
    s[b] += e;
    ++n[b];
    if (c.peak) {
      s[3] += e;
      ++n[3];
    }
  }
  auto finish = [&](std::size_t b) -> std::optional<double> {
    if (n[b] == 0) return std::nullopt;
    return std::sqrt(s[b] / static_cast<double>(n[b]));
  };
  return {finish(0), finish(1), finish(2), finish(3), n[0], n[1], n[2], n[3]};
}

/// Empirical median; even counts take the midpoint of the central pair.
inline double median(std::vector<double> v) {
  if (v.empty()) throw EmptyInputError("median of no values");
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size() / 2;
  return v.size() % 2 ? v[k] : 0.5 * (v[k - 1] + v[k]);
}

/// Pearson r between flow(t) and driver(t - lag) for lag = 0..max_lag; lags
/// whose overlap is constant are absent.
inline std::vector<std::optional<double>> lag_correlation(std::span<const double> flow, std::span<const double> driver,
                                                          std::size_t max_lag) {
  if (flow.size() != driver.size()) throw ShapeError("lag_correlation: series lengths differ");
  if (flow.size() <= max_lag + 1) throw EmptyInputError("lag_correlation: series shorter than max_lag + 2");
  std::vector<std::optional<double>> out;
  for (std::size_t lag = 0; lag <= max_lag; ++lag) {
    const std::size_t n = flow.size() - lag;
    try {
      out.emplace_back(pearson_r(flow.subspan(lag, n), driver.subspan(0, n)));
    } catch (const UndefinedMetricError&) {
      out.emplace_back(std::nullopt);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

/// Metrics of one period. r and nse are absent when undefined (constant series).
struct PeriodMetrics {
  std::size_t count = 0;
  double rmse = 0.0;
  std::optional<double> r;
  std::optional<double> nse;
  BandRmse bands;
};

inline PeriodMetrics compute_metrics(std::span<const double> obs, std::span<const double> sim, const FlowBands& bands) {
  PeriodMetrics m;
  m.count = obs.size();
  m.rmse = rmse(obs, sim);
  try {
    m.r = pearson_r(obs, sim);
  } catch (const Error&) {
  }
  try {
    m.nse = nse(obs, sim);
  } catch (const Error&) {
  }
  m.bands = band_rmse(obs, sim, bands);
  return m;
}

/// Per-metric median over the trials that define it.
inline PeriodMetrics median_over_trials(const std::vector<PeriodMetrics>& trials) {
  if (trials.empty()) throw EmptyInputError("median over zero trials");
  auto med = [&](auto get) -> std::optional<double> {
    std::vector<double> v;
    for (const auto& t : trials) {
      if (const std::optional<double> x = get(t)) v.push_back(*x);
    }
    if (v.empty()) return std::nullopt;
    return median(std::move(v));
  };
  PeriodMetrics m;
  m.count = trials.front().count;
  m.rmse = *med([](const PeriodMetrics& t) { return std::optional<double>(t.rmse); });
  m.r = med([](const PeriodMetrics& t) { return t.r; });
  m.nse = med([](const PeriodMetrics& t) { return t.nse; });
  m.bands.low = med([](const PeriodMetrics& t) { return t.bands.low; });
  m.bands.middle = med([](const PeriodMetrics& t) { return t.bands.middle; });
  m.bands.high = med([](const PeriodMetrics& t) { return t.bands.high; });
  m.bands.peak = med([](const PeriodMetrics& t) { return t.bands.peak; });
  const auto& b = trials.front().bands;
  m.bands.n_low = b.n_low;
  m.bands.n_middle = b.n_middle;
  m.bands.n_high = b.n_high;
  m.bands.n_peak = b.n_peak;
  return m;
}

inline constexpr const char* kPeriodNames[] = {"train", "val", "test"};

/// Simulated and observed flow (m3/s) at the evaluated target hours.
struct PeriodPredictions {
  std::vector<HourStamp> time;
  std::vector<double> observed;
  std::vector<double> simulated;
};

struct ModelEvaluation {
  std::optional<PeriodMetrics> period[3];  // absent when the period has no admissible targets
  PeriodPredictions predictions[3];
};

/// Inference over every admissible target (every `eval_stride`-th hour) of
/// each period, in physical units.
inline ModelEvaluation evaluate_model(Model& model, const PreparedData& data, std::size_t eval_stride = 1) {
  if (model.spec().n_vars != data.raw.n_vars()) {
    throw ShapeError("model expects " + std::to_string(model.spec().n_vars) + " input variables, dataset has " +
                     std::to_string(data.raw.n_vars()));
  }
  ModelEvaluation ev;
  const IndexRange ranges[3] = {data.splits.train, data.splits.val, data.splits.test};
  AssembledInput in;
  for (std::size_t p = 0; p < 3; ++p) {
    WindowSet windows(data.hourly, data.daily, model.spec(), ranges[p], {eval_stride});
    PeriodPredictions& pred = ev.predictions[p];
    for (std::size_t i = 0; i < windows.size(); ++i) {
      windows.assemble(i, in);
      const std::size_t t = windows.target_index(i);
      pred.time.push_back(windows.target_time(i));
      pred.observed.push_back(data.raw.flow()[t]);
      pred.simulated.push_back(denormalize_flow(model.forward(in), data.hourly_stats));
    }
    if (!pred.time.empty()) ev.period[p] = compute_metrics(pred.observed, pred.simulated, data.bands);
  }
  return ev;
}

/// Per-trial and median metrics for one architecture.
struct MetricsReport {
  std::string arch;
  ModelSpec spec;
  std::vector<std::uint64_t> seeds;
  std::uint64_t data_hash = 0;
  std::vector<std::size_t> trial_ids;                        // surviving trials
  std::vector<std::array<std::optional<PeriodMetrics>, 3>> trials;
  std::array<std::optional<PeriodMetrics>, 3> median;
  std::vector<std::string> notes;

  void add_trial(std::size_t id, const ModelEvaluation& ev) {
    trial_ids.push_back(id);
    trials.push_back({ev.period[0], ev.period[1], ev.period[2]});
  }

  void finalize() {
    for (std::size_t p = 0; p < 3; ++p) {
      std::vector<PeriodMetrics> v;
      for (const auto& t : trials) {
        if (t[p]) v.push_back(*t[p]);
      }
      median[p] = v.empty() ? std::nullopt : std::optional<PeriodMetrics>(median_over_trials(v));
    }
  }
};

namespace detail {

inline std::string fmt_real(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

inline std::string fmt_opt(const std::optional<double>& x) { return x ? fmt_real(*x) : std::string(); }

inline std::string metrics_cells(const PeriodMetrics& m) {
  return fmt_real(m.rmse) + "," + fmt_opt(m.r) + "," + fmt_opt(m.nse) + "," + fmt_opt(m.bands.low) + "," +
         fmt_opt(m.bands.middle) + "," + fmt_opt(m.bands.high) + "," + fmt_opt(m.bands.peak);
}

inline nlohmann::json opt_json(const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(); }

inline nlohmann::json metrics_json(const PeriodMetrics& m) {
  return {{"count", m.count},
          {"rmse", m.rmse},
          {"r", opt_json(m.r)},
          {"nse", opt_json(m.nse)},
          {"rmse_low", opt_json(m.bands.low)},
          {"rmse_middle", opt_json(m.bands.middle)},
          {"rmse_high", opt_json(m.bands.high)},
          {"rmse_peak", opt_json(m.bands.peak)}};
}

}  // namespace detail

inline constexpr const char* kMetricsHeader = "trial,period,rmse,r,nse,rmse_low,rmse_middle,rmse_high,rmse_peak";

/// Absent metrics are written as empty cells; absent periods are omitted.
inline void write_metrics_csv(const MetricsReport& report, std::ostream& out) {
  out << kMetricsHeader << "\n";
  for (std::size_t k = 0; k < report.trials.size(); ++k) {
    for (std::size_t p = 0; p < 3; ++p) {
      if (report.trials[k][p]) {
        out << report.trial_ids[k] << "," << kPeriodNames[p] << "," << detail::metrics_cells(*report.trials[k][p]) << "\n";
      }
    }
  }
  for (std::size_t p = 0; p < 3; ++p) {
    if (report.median[p]) out << "median," << kPeriodNames[p] << "," << detail::metrics_cells(*report.median[p]) << "\n";
  }
}

inline nlohmann::json metrics_json(const MetricsReport& report) {
  nlohmann::json j;
  j["arch"] = report.arch;
  j["spec"] = report.spec.to_text();
  j["seeds"] = report.seeds;
  char hash[20];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(report.data_hash));
  j["data_hash"] = hash;
  j["notes"] = report.notes;
  nlohmann::json trials = nlohmann::json::array();
  for (std::size_t k = 0; k < report.trials.size(); ++k) {
    nlohmann::json t;
    t["trial"] = report.trial_ids[k];
    for (std::size_t p = 0; p < 3; ++p) {
      t[kPeriodNames[p]] = report.trials[k][p] ? detail::metrics_json(*report.trials[k][p]) : nlohmann::json();
    }
    trials.push_back(t);
  }
  j["trials"] = trials;
  for (std::size_t p = 0; p < 3; ++p) {
    j["median"][kPeriodNames[p]] = report.median[p] ? detail::metrics_json(*report.median[p]) : nlohmann::json();
  }
  return j;
}

inline void write_predictions_csv(const PeriodPredictions& pred, std::ostream& out) {
  out << "timestamp,observed,simulated\n";
  char buf[96];
  for (std::size_t i = 0; i < pred.time.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.10g,%.10g", pred.observed[i], pred.simulated[i]);
    out << format_timestamp(pred.time[i]) << "," << buf << "\n";
  }
}

/// Median simulation across trials at each timestamp. All inputs must share
/// the same target hours.
inline PeriodPredictions median_predictions(const std::vector<PeriodPredictions>& trials) {
  if (trials.empty()) throw EmptyInputError("median predictions over zero trials");
  PeriodPredictions out;
  out.time = trials.front().time;
  out.observed = trials.front().observed;
  out.simulated.resize(out.time.size());
  std::vector<double> column(trials.size());
  for (std::size_t i = 0; i < out.time.size(); ++i) {
    for (std::size_t k = 0; k < trials.size(); ++k) {
      if (trials[k].time.size() != out.time.size() || trials[k].time[i] != out.time[i]) {
        throw ShapeError("trial predictions cover different timestamps");
      }
      column[k] = trials[k].simulated[i];
    }
    out.simulated[i] = median(column);
  }
  return out;
}

inline void write_lag_csv(const std::vector<std::optional<double>>& curve, std::ostream& out) {
  out << "lag,r\n";
  for (std::size_t l = 0; l < curve.size(); ++l) out << l << "," << detail::fmt_opt(curve[l]) << "\n";
}

/// One row per architecture with the median metrics of every period side by side.
inline void write_compare_csv(const std::vector<MetricsReport>& reports, std::ostream& out) {
  static constexpr const char* cols[] = {"rmse", "r", "nse", "rmse_low", "rmse_middle", "rmse_high", "rmse_peak"};
  out << "arch";
  for (const char* p : kPeriodNames) {
    for (const char* c : cols) out << "," << p << "_" << c;
  }
  out << "\n";
  for (const auto& r : reports) {
    out << r.arch;
    for (std::size_t p = 0; p < 3; ++p) out << "," << (r.median[p] ? detail::metrics_cells(*r.median[p]) : ",,,,,,");
    out << "\n";
  }
}

}  // namespace rrnet
