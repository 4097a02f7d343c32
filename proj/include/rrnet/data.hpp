// SPDX-License-Identifier: Apache-2.0
//
// Hourly series handling: the synthetic snow-dominated watershed, CSV
// ingestion/export, calendar-year splits, z-score normalisation, daily
// aggregation, sliding-window sample extraction and flow-band classification.

#pragma once

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rrnet/architectures.hpp"
#include "rrnet/errors.hpp"
#include "rrnet/numerics.hpp"

namespace rrnet {

// ---------------------------------------------------------------------------
// Calendar

/// Hours since 1970-01-01T00:00 (UTC, no DST).
using HourStamp = std::int64_t;

inline HourStamp hour_stamp(int year, unsigned month, unsigned day, unsigned hour) {
  using namespace std::chrono;
  const year_month_day ymd{std::chrono::year{year}, std::chrono::month{month}, std::chrono::day{day}};
  if (!ymd.ok()) throw ParseError("invalid calendar date");
  return static_cast<HourStamp>(sys_days{ymd}.time_since_epoch().count()) * 24 + hour;
}

inline HourStamp year_start(int year) { return hour_stamp(year, 1, 1, 0); }

inline int year_of(HourStamp h) {
  using namespace std::chrono;
  const auto days_since = static_cast<int>(h >= 0 ? h / 24 : (h - 23) / 24);
  const year_month_day ymd{sys_days{days{days_since}}};
  return static_cast<int>(ymd.year());
}

inline std::size_t hours_in_year(int year) {
  return static_cast<std::size_t>(year_start(year + 1) - year_start(year));
}

/// "YYYY-MM-DDTHH:00".
inline std::string format_timestamp(HourStamp h) {
  using namespace std::chrono;
  const auto days_since = h >= 0 ? h / 24 : (h - 23) / 24;
  const auto hour = static_cast<int>(h - days_since * 24);
  const year_month_day ymd{sys_days{days{days_since}}};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:00", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), hour);
  return buf;
}

inline HourStamp parse_timestamp(std::string_view text) {
  // YYYY-MM-DDTHH:00 (a trailing ":SS" is tolerated when it is zero)
  auto bad = [&]() { return ParseError("malformed timestamp '" + std::string(text) + "' (expected YYYY-MM-DDTHH:00)"); };
  if (text.size() != 16 && !(text.size() == 19 && text.substr(16) == ":00")) throw bad();
  if (text[4] != '-' || text[7] != '-' || (text[10] != 'T' && text[10] != ' ') || text[13] != ':') throw bad();
  auto field = [&](std::size_t pos, std::size_t len) {
    int v = 0;
    const auto* first = text.data() + pos;
    const auto [ptr, ec] = std::from_chars(first, first + len, v);
    if (ec != std::errc() || ptr != first + len) throw bad();
    return v;
  };
  const int y = field(0, 4);
  const int mo = field(5, 2);
  const int d = field(8, 2);
  const int hh = field(11, 2);
  const int mm = field(14, 2);
  if (mm != 0 || hh < 0 || hh > 23 || mo < 1 || mo > 12 || d < 1) throw bad();
  try {
    return hour_stamp(y, static_cast<unsigned>(mo), static_cast<unsigned>(d), static_cast<unsigned>(hh));
  } catch (const ParseError&) {
    throw bad();
  }
}

// ---------------------------------------------------------------------------
// Series table

/// N meteorological rows followed by one flow row (m3/s), hourly from start.
struct SeriesTable {
  HourStamp start = 0;
  std::vector<std::string> names;           // N + 1 labels, flow last
  std::vector<std::vector<double>> values;  // [N + 1][hours]

  std::size_t n_vars() const { return values.empty() ? 0 : values.size() - 1; }
  std::size_t n_hours() const { return values.empty() ? 0 : values.front().size(); }
  const std::vector<double>& flow() const { return values.back(); }
  HourStamp time_of(std::size_t index) const { return start + static_cast<HourStamp>(index); }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (names[i] == name) return i;
    }
    throw ConfigError("no variable named '" + name + "'");
  }

  void validate() const {
    if (values.size() < 2 || names.size() != values.size()) {
      throw ShapeError("series table needs at least one input row plus flow, with one name per row");
    }
    for (const auto& row : values) {
      if (row.size() != n_hours()) throw ShapeError("series table rows differ in length");
      for (double x : row) {
        if (!std::isfinite(x)) throw IngestError("series table contains a non-finite value");
      }
    }
    for (std::size_t i = 0; i < n_hours(); ++i) {
      if (flow()[i] < 0.0) throw IngestError("negative flow at " + format_timestamp(time_of(i)));
    }
  }
};

/// Stable FNV-1a hash over the raw bytes of every value and the start time.
inline std::uint64_t data_hash(const SeriesTable& table) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint64_t word) {
    for (int b = 0; b < 8; ++b) {
      h ^= (word >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  mix(static_cast<std::uint64_t>(table.start));
  for (const auto& row : table.values) {
    for (double x : row) mix(std::bit_cast<std::uint64_t>(x));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Synthetic watershed

/// Parameters of the synthetic generator. Units: mm, degC, W/m2, hours.
struct SyntheticConfig {
  int years = 13;
  std::uint64_t seed = 7;
  int start_year = 2007;
  int precip_regions = 2;  // N = precip_regions + 4

  // weather
  double wet_start_prob = 0.025;  // dry -> wet per hour
  double wet_stop_prob = 0.12;    // wet -> dry per hour
  double rain_mean = 1.2;         // mean hourly intensity while wet
  double region_spread = 0.4;     // per-region multiplicative noise
  double precip_scale = 1.0;      // 0 disables precipitation
  double temp_mean = 5.0;
  double temp_annual_amp = 14.0;
  double temp_diurnal_amp = 4.0;
  double temp_noise = 2.5;        // stationary std of the AR(1) anomaly
  double temp_noise_corr = 0.98;
  double wet_cooling = 1.0;       // degC subtracted while raining
  double sw_max = 800.0;
  double et_coef = 0.01;          // mm/h per degC at full sun

  // snow and routing
  double snow_threshold = 0.0;    // precipitation falls as snow below this
  double melt_threshold = 0.0;
  double degree_day = 0.12;       // mm/h per degC above melt_threshold
  double fast_fraction = 0.6;
  double fast_rate = 0.06;        // 1/h
  double slow_rate = 0.0015;      // 1/h
  double init_snow = 0.0;
  double init_fast = 5.0;
  double init_slow = 80.0;
  double area_km2 = 14330.0;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("synthetic config: " + m); };
    if (years < 1) fail("years must be >= 1");
    if (precip_regions < 1) fail("precip_regions must be >= 1");
    if (wet_start_prob < 0 || wet_start_prob > 1 || wet_stop_prob < 0 || wet_stop_prob > 1) {
      fail("wet/dry transition probabilities must lie in [0, 1]");
    }
    if (rain_mean < 0 || precip_scale < 0 || region_spread < 0) fail("precipitation parameters must be >= 0");
    if (temp_noise < 0 || temp_noise_corr < 0 || temp_noise_corr >= 1) fail("temperature noise parameters out of range");
    if (degree_day < 0 || et_coef < 0 || sw_max < 0) fail("rates must be >= 0");
    if (fast_fraction < 0 || fast_fraction > 1) fail("fast_fraction must lie in [0, 1]");
    if (fast_rate <= 0 || fast_rate > 1 || slow_rate <= 0 || slow_rate > 1) fail("reservoir rates must lie in (0, 1]");
    if (init_snow < 0 || init_fast < 0 || init_slow < 0) fail("initial storages must be >= 0");
    if (area_km2 <= 0) fail("area_km2 must be positive");
  }

  /// key=value lines; '#' starts a comment. Unknown keys are an error.
  static SyntheticConfig parse(std::istream& in) {
    SyntheticConfig c;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError("synthetic config line " + std::to_string(lineno) + ": expected key=value");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    auto as_double = [&]() {
      double v = 0;
      const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
      if (ec != std::errc() || p != value.data() + value.size()) {
        throw ParseError("synthetic config: '" + key + "' is not a number: '" + value + "'");
      }
      return v;
    };
    auto as_int = [&]() {
      long long v = 0;
      const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
      if (ec != std::errc() || p != value.data() + value.size()) {
        throw ParseError("synthetic config: '" + key + "' is not an integer: '" + value + "'");
      }
      return v;
    };
    const std::map<std::string, double*> reals{
        {"wet_start_prob", &wet_start_prob}, {"wet_stop_prob", &wet_stop_prob},
        {"rain_mean", &rain_mean},           {"region_spread", &region_spread},
        {"precip_scale", &precip_scale},     {"temp_mean", &temp_mean},
        {"temp_annual_amp", &temp_annual_amp}, {"temp_diurnal_amp", &temp_diurnal_amp},
        {"temp_noise", &temp_noise},         {"temp_noise_corr", &temp_noise_corr}, {"wet_cooling", &wet_cooling},
        {"sw_max", &sw_max},                 {"et_coef", &et_coef},
        {"snow_threshold", &snow_threshold}, {"melt_threshold", &melt_threshold},
        {"degree_day", &degree_day},         {"fast_fraction", &fast_fraction},
        {"fast_rate", &fast_rate},           {"slow_rate", &slow_rate},
        {"init_snow", &init_snow},           {"init_fast", &init_fast},
        {"init_slow", &init_slow},           {"area_km2", &area_km2}};
    if (key == "years") {
      years = static_cast<int>(as_int());
    } else if (key == "seed") {
      seed = static_cast<std::uint64_t>(as_int());
    } else if (key == "start_year") {
      start_year = static_cast<int>(as_int());
    } else if (key == "precip_regions") {
      precip_regions = static_cast<int>(as_int());
    } else if (auto it = reals.find(key); it != reals.end()) {
      *it->second = as_double();
    } else {
      throw ParseError("synthetic config: unknown key '" + key + "'");
    }
  }
};

/// Generator output plus the state traces used to check its bookkeeping.
struct SyntheticRun {
  SeriesTable table;
  std::vector<double> snowpack;    // mm, end of each hour
  std::vector<double> outflow_mm;  // basin-average runoff per hour
  double total_precip = 0.0;
  double total_et = 0.0;           // actual ET removed from storage
  double total_outflow = 0.0;
  double initial_storage = 0.0;
  double final_storage = 0.0;
};

/// Hourly weather from a wet/dry Markov chain and seasonal cycles, routed
/// through a degree-day snowpack and two linear reservoirs.
inline SyntheticRun generate_synthetic_run(const SyntheticConfig& cfg) {
  cfg.validate();
  const HourStamp start = year_start(cfg.start_year);
  const auto hours = static_cast<std::size_t>(year_start(cfg.start_year + cfg.years) - start);
  const auto regions = static_cast<std::size_t>(cfg.precip_regions);
  const std::size_t n_vars = regions + 4;

  SyntheticRun run;
  SeriesTable& t = run.table;
  t.start = start;
  for (std::size_t r = 0; r < regions; ++r) t.names.push_back("precip_r" + std::to_string(r + 1));
  t.names.insert(t.names.end(), {"temperature", "evapotranspiration", "shortwave", "longwave", "flow"});
  t.values.assign(n_vars + 1, std::vector<double>(hours, 0.0));
  run.snowpack.resize(hours);
  run.outflow_mm.resize(hours);

  Rng rng(cfg.seed);
  Rng weather = rng.derive(1);
  Rng temp_rng = rng.derive(2);
  Rng rad_rng = rng.derive(3);

  double snow = cfg.init_snow;
  double fast = cfg.init_fast;
  double slow = cfg.init_slow;
  run.initial_storage = snow + fast + slow;
  bool wet = false;
  double anomaly = 0.0;
  const double innovation = cfg.temp_noise * std::sqrt(1.0 - cfg.temp_noise_corr * cfg.temp_noise_corr);
  const double to_cms = cfg.area_km2 / 3.6;  // mm/h over the basin -> m3/s
  std::vector<double> region_bias(regions);
  for (std::size_t r = 0; r < regions; ++r) region_bias[r] = 0.8 + 0.4 * static_cast<double>(r) / std::max<double>(1, regions - 1);

  for (std::size_t i = 0; i < hours; ++i) {
    const HourStamp now = start + static_cast<HourStamp>(i);
    const double day_of_year = static_cast<double>(now - year_start(year_of(now))) / 24.0;
    const double annual = 2.0 * M_PI * (day_of_year - 15.0) / 365.25;  // coldest mid-January
    const double hour_of_day = static_cast<double>(((now % 24) + 24) % 24);
    const double diurnal = 2.0 * M_PI * (hour_of_day - 9.0) / 24.0;   // warmest mid-afternoon

    // precipitation: shared storm state, per-region intensity
    const double season_wet = 1.0 + 0.3 * std::sin(annual);
    const double p_start = std::min(1.0, cfg.wet_start_prob * season_wet);
    wet = wet ? (weather.uniform() >= cfg.wet_stop_prob) : (weather.uniform() < p_start);
    double basin_precip = 0.0;
    const double storm = wet ? weather.exponential(cfg.rain_mean) : 0.0;
    for (std::size_t r = 0; r < regions; ++r) {
      double p = 0.0;
      if (wet) {
        const double noise = std::exp(cfg.region_spread * weather.normal() - 0.5 * cfg.region_spread * cfg.region_spread);
        p = cfg.precip_scale * storm * region_bias[r] * noise;
      }
      t.values[r][i] = p;
      basin_precip += p;
    }
    basin_precip /= static_cast<double>(regions);

    // temperature
    anomaly = cfg.temp_noise_corr * anomaly + innovation * temp_rng.normal();
    const double temp = cfg.temp_mean - cfg.temp_annual_amp * std::cos(annual) +
                        cfg.temp_diurnal_amp * std::sin(diurnal) + anomaly - (wet ? cfg.wet_cooling : 0.0);

    // radiation and potential ET
    const double daylight = std::max(0.0, std::sin(2.0 * M_PI * (hour_of_day - 6.0) / 24.0));
    const double season_sun = 0.55 - 0.45 * std::cos(annual);
    const double cloud = wet ? 0.3 : 0.9 + 0.1 * rad_rng.uniform();
    const double sw = cfg.sw_max * daylight * season_sun * cloud;
    const double lw = 300.0 + 4.5 * temp + (wet ? 25.0 : 0.0) + 5.0 * rad_rng.normal();
    const double pet = cfg.et_coef * std::max(temp, 0.0) * (cfg.sw_max > 0 ? sw / cfg.sw_max : 0.0);

    // snowpack
    double rain = basin_precip;
    if (temp < cfg.snow_threshold) {
      snow += basin_precip;
      rain = 0.0;
    }
    const double melt = std::min(snow, cfg.degree_day * std::max(temp - cfg.melt_threshold, 0.0));
    snow -= melt;

    // reservoirs
    const double liquid = rain + melt;
    fast += cfg.fast_fraction * liquid;
    slow += (1.0 - cfg.fast_fraction) * liquid;
    const double aet = std::min(pet, fast);
    fast -= aet;
    const double q_fast = cfg.fast_rate * fast;
    const double q_slow = cfg.slow_rate * slow;
    fast -= q_fast;
    slow -= q_slow;
    const double q = q_fast + q_slow;

    t.values[regions + 0][i] = temp;
    t.values[regions + 1][i] = aet;
    t.values[regions + 2][i] = sw;
    t.values[regions + 3][i] = lw;
    t.values[n_vars][i] = q * to_cms;
    run.snowpack[i] = snow;
    run.outflow_mm[i] = q;
    run.total_precip += basin_precip;
    run.total_et += aet;
    run.total_outflow += q;
  }
  run.final_storage = snow + fast + slow;
  return run;
}

inline SeriesTable generate_synthetic(const SyntheticConfig& cfg) { return generate_synthetic_run(cfg).table; }

// ---------------------------------------------------------------------------
// CSV

/// Header `timestamp,<vars...>,flow`, values at full round-trip precision.
inline void export_csv(const SeriesTable& table, std::ostream& out) {
  out << "timestamp";
  for (const auto& n : table.names) out << ',' << n;
  out << '\n';
  char buf[40];
  for (std::size_t i = 0; i < table.n_hours(); ++i) {
    out << format_timestamp(table.time_of(i));
    for (const auto& row : table.values) {
      std::snprintf(buf, sizeof buf, "%.17g", row[i]);
      out << ',' << buf;
    }
    out << '\n';
  }
}

inline void export_csv(const SeriesTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  export_csv(table, out);
  if (!out) throw ConfigError("write failed for '" + path + "'");
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t pos = 0;
  while (true) {
    const auto comma = line.find(',', pos);
    cells.push_back(line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return cells;
}

/// Parses an hourly CSV. The column named `flow_name` becomes the flow row
/// (moved last); rows must be consecutive hours with no blank cells.
inline SeriesTable ingest_csv(std::istream& in, const std::string& flow_name = "flow") {
  std::string line;
  if (!std::getline(in, line)) throw IngestError("empty CSV");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "timestamp") {
    throw IngestError("CSV header must be 'timestamp,<var1>,...,<varN>,flow'");
  }
  std::size_t flow_col = 0;
  for (std::size_t c = 1; c < header.size(); ++c) {
    if (header[c] == flow_name) flow_col = c;
  }
  if (flow_col == 0) throw IngestError("CSV has no flow column named '" + flow_name + "'");
  std::vector<std::size_t> order;
  for (std::size_t c = 1; c < header.size(); ++c) {
    if (c != flow_col) order.push_back(c);
  }
  order.push_back(flow_col);

  SeriesTable t;
  for (auto c : order) t.names.emplace_back(header[c]);
  t.values.assign(order.size(), {});
  std::size_t row = 1;
  std::optional<HourStamp> prev;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw IngestError("row " + std::to_string(row) + ": expected " + std::to_string(header.size()) + " cells, got " +
                        std::to_string(cells.size()));
    }
    HourStamp ts;
    try {
      ts = parse_timestamp(cells[0]);
    } catch (const ParseError& e) {
      throw ParseError("row " + std::to_string(row) + ": " + e.what());
    }
    if (prev) {
      if (ts <= *prev) {
        throw IngestError("row " + std::to_string(row) + ": duplicate or out-of-order timestamp " + format_timestamp(ts));
      }
      if (ts != *prev + 1) {
        throw IngestError("row " + std::to_string(row) + ": missing timestamp " + format_timestamp(*prev + 1));
      }
    } else {
      t.start = ts;
    }
    prev = ts;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const auto cell = cells[order[k]];
      if (cell.empty()) {
        throw IngestError("row " + std::to_string(row) + ": missing value for '" + t.names[k] + "'");
      }
      double v = 0;
      const auto [p, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || p != cell.data() + cell.size() || !std::isfinite(v)) {
        throw ParseError("row " + std::to_string(row) + ", column '" + t.names[k] + "': not a number: '" +
                         std::string(cell) + "'");
      }
      t.values[k].push_back(v);
    }
  }
  if (t.n_hours() == 0) throw IngestError("CSV has no data rows");
  t.validate();
  return t;
}

inline SeriesTable ingest_csv(const std::string& path, const std::string& flow_name = "flow") {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open '" + path + "'");
  return ingest_csv(in, flow_name);
}

// ---------------------------------------------------------------------------
// Splits

/// Half-open index range [begin, end).
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end > begin ? end - begin : 0; }
  bool empty() const { return size() == 0; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool operator==(const IndexRange&) const = default;
};

/// Inclusive calendar-year span; count() == 0 marks an unused period.
struct YearSpan {
  int first = 0;
  int last = -1;
  int count() const { return last >= first ? last - first + 1 : 0; }
};

struct SplitRanges {
  IndexRange train;
  IndexRange val;
  IndexRange test;
};

struct YearSplit {
  YearSpan train;
  YearSpan val;
  YearSpan test;

  /// Consecutive spans starting at first_year.
  static YearSplit from_counts(int first_year, int train_years, int val_years, int test_years) {
    YearSplit s;
    s.train = {first_year, first_year + train_years - 1};
    s.val = {s.train.last + 1, s.train.last + val_years};
    s.test = {s.val.last + 1, s.val.last + test_years};
    return s;
  }
};

/// Index ranges of whole calendar years. Spans must be ordered, disjoint and
/// fully covered by the table.
inline SplitRanges split_chronological(const SeriesTable& table, const YearSplit& years) {
  const HourStamp table_end = table.start + static_cast<HourStamp>(table.n_hours());
  auto range = [&](const YearSpan& span, const char* what) -> IndexRange {
    if (span.count() == 0) return {};
    const HourStamp b = year_start(span.first);
    const HourStamp e = year_start(span.last + 1);
    if (b < table.start || e > table_end) {
      throw ConfigError(std::string(what) + " years " + std::to_string(span.first) + "-" + std::to_string(span.last) +
                        " fall outside the table span " + format_timestamp(table.start) + " .. " +
                        format_timestamp(table_end - 1));
    }
    return {static_cast<std::size_t>(b - table.start), static_cast<std::size_t>(e - table.start)};
  };
  if (years.train.count() == 0) throw ConfigError("training span is empty");
  if (years.val.count() > 0 && years.val.first <= years.train.last) throw ConfigError("validation years overlap or precede training years");
  const YearSpan& before_test = years.val.count() > 0 ? years.val : years.train;
  if (years.test.count() > 0 && years.test.first <= before_test.last) throw ConfigError("test years overlap or precede earlier periods");
  return {range(years.train, "training"), range(years.val, "validation"), range(years.test, "test")};
}

// ---------------------------------------------------------------------------
// Normalisation

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;

  bool operator==(const NormStats&) const = default;
};

/// Per-row mean and population standard deviation over `range`.
inline NormStats fit_norm_stats(const SeriesTable& table, IndexRange range) {
  if (range.empty() || range.end > table.n_hours()) throw ConfigError("normalisation range is empty or out of bounds");
  NormStats s;
  const auto n = static_cast<double>(range.size());
  for (std::size_t r = 0; r < table.values.size(); ++r) {
    const auto& row = table.values[r];
    double sum = 0.0;
    for (std::size_t i = range.begin; i < range.end; ++i) sum += row[i];
    const double mean = sum / n;
    double ss = 0.0;
    for (std::size_t i = range.begin; i < range.end; ++i) ss += (row[i] - mean) * (row[i] - mean);
    const double sd = std::sqrt(ss / n);
    if (!(sd > 0.0)) throw ConfigError("variable '" + table.names[r] + "' is constant over the fitting span");
    s.mean.push_back(mean);
    s.std.push_back(sd);
  }
  return s;
}

inline SeriesTable normalize(const SeriesTable& table, const NormStats& stats) {
  if (stats.mean.size() != table.values.size()) throw ShapeError("normalisation stats do not match the table width");
  SeriesTable out = table;
  for (std::size_t r = 0; r < out.values.size(); ++r) {
    if (!(stats.std[r] > 0.0)) throw ConfigError("zero standard deviation for '" + table.names[r] + "'");
    for (double& x : out.values[r]) x = (x - stats.mean[r]) / stats.std[r];
  }
  return out;
}

inline double denormalize_flow(double value, const NormStats& stats) {
  return value * stats.std.back() + stats.mean.back();
}

inline std::vector<double> denormalize_flow(std::span<const double> values, const NormStats& stats) {
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = denormalize_flow(values[i], stats);
  return out;
}

// ---------------------------------------------------------------------------
// Daily aggregation

struct DailyOptions {
  bool sum_precipitation = false;  // rows whose name starts with "precip"
};

struct DailyTable {
  SeriesTable table;              // one column per calendar day
  std::size_t hour_offset = 0;    // hourly index of the first day's 00:00
  std::vector<std::string> warnings;

  /// Daily column containing hourly index t, if aggregated.
  std::optional<std::size_t> day_of(std::size_t hour_index) const {
    if (hour_index < hour_offset) return std::nullopt;
    const std::size_t d = (hour_index - hour_offset) / 24;
    if (d >= table.n_hours()) return std::nullopt;
    return d;
  }
};

/// Per-variable daily mean over complete calendar days. Leading and trailing
/// partial days are dropped with a warning.
inline DailyTable aggregate_daily(const SeriesTable& table, const DailyOptions& opt = {}) {
  DailyTable d;
  const HourStamp phase = ((table.start % 24) + 24) % 24;
  d.hour_offset = phase == 0 ? 0 : static_cast<std::size_t>(24 - phase);
  if (d.hour_offset > 0) {
    d.warnings.push_back("leading partial day of " + std::to_string(d.hour_offset) + " hours trimmed");
  }
  const std::size_t usable = table.n_hours() > d.hour_offset ? table.n_hours() - d.hour_offset : 0;
  const std::size_t days = usable / 24;
  if (usable % 24 != 0) {
    d.warnings.push_back("trailing partial day of " + std::to_string(usable % 24) + " hours trimmed");
  }
  d.table.start = table.start + static_cast<HourStamp>(d.hour_offset);
  d.table.names = table.names;
  d.table.values.assign(table.values.size(), std::vector<double>(days, 0.0));
  for (std::size_t r = 0; r < table.values.size(); ++r) {
    const bool sum = opt.sum_precipitation && table.names[r].rfind("precip", 0) == 0;
    for (std::size_t day = 0; day < days; ++day) {
      double acc = 0.0;
      const std::size_t base = d.hour_offset + day * 24;
      for (std::size_t h = 0; h < 24; ++h) acc += table.values[r][base + h];
      d.table.values[r][day] = sum ? acc : acc / 24.0;
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Flow bands

/// Empirical percentile with linear interpolation between order statistics.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw EmptyInputError("percentile of an empty series");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

enum class FlowBand { Low, Middle, High };

struct BandClass {
  FlowBand band = FlowBand::Low;
  bool peak = false;
};

/// Low < q25 <= middle < q75 <= high; peak additionally when >= q95.
struct FlowBands {
  double q25 = 0.0;
  double q75 = 0.0;
  double q95 = 0.0;

  BandClass band_of(double v) const {
    BandClass c;
    if (v < q25) {
      c.band = FlowBand::Low;
    } else if (v < q75) {
      c.band = FlowBand::Middle;
    } else {
      c.band = FlowBand::High;
    }
    c.peak = v >= q95;
    return c;
  }
};

inline FlowBands flow_bands(std::span<const double> observed) {
  std::vector<double> v(observed.begin(), observed.end());
  return {percentile(v, 0.25), percentile(v, 0.75), percentile(v, 0.95)};
}

// ---------------------------------------------------------------------------
// Samples

/// Indexed collection of training examples.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  /// Target in model units (normalised flow).
  virtual double target(std::size_t i) const = 0;
  /// Fills the windows of sample i; `out` buffers are reused across calls.
  virtual void assemble(std::size_t i, AssembledInput& out) const = 0;
};

struct WindowOptions {
  std::size_t target_stride = 1;  // keep every k-th admissible target hour
};

/// Windows over normalised hourly/daily tables for every admissible target
/// hour of a range. Windows are copied out on demand, never materialised.
class WindowSet final : public SampleSource {
 public:
  WindowSet(std::shared_ptr<const SeriesTable> hourly, std::shared_ptr<const DailyTable> daily, const ModelSpec& spec,
            IndexRange range, WindowOptions opt = {})
      : hourly_(std::move(hourly)), daily_(std::move(daily)), needs_(window_needs(spec.kind)),
        n_vars_(spec.n_vars), long_len_(spec.long_len), short_len_(spec.short_len), daily_len_(spec.daily_len) {
    if (!hourly_) throw ConfigError("window set needs an hourly table");
    if (hourly_->n_vars() != spec.n_vars) {
      throw ShapeError("dataset has " + std::to_string(hourly_->n_vars()) + " input variables, model expects " +
                       std::to_string(spec.n_vars));
    }
    if (needs_.daily_window && !daily_) throw ConfigError("this architecture needs a daily table");
    if (opt.target_stride < 1) throw ConfigError("target_stride must be >= 1");
    const std::size_t end = std::min(range.end, hourly_->n_hours());
    for (std::size_t t = range.begin; t < end; t += opt.target_stride) {
      if (admissible(t)) targets_.push_back(t);
    }
  }

  std::size_t size() const override { return targets_.size(); }
  double target(std::size_t i) const override { return hourly_->flow()[targets_[i]]; }
  std::size_t target_index(std::size_t i) const { return targets_[i]; }
  HourStamp target_time(std::size_t i) const { return hourly_->time_of(targets_[i]); }
  const std::vector<std::size_t>& targets() const { return targets_; }

  void assemble(std::size_t i, AssembledInput& out) const override {
    const std::size_t t = targets_[i];
    if (needs_.long_window) copy_hours(t, long_len_, out.long_window);
    if (needs_.short_window) copy_hours(t, short_len_, out.short_window);
    if (needs_.daily_window) {
      const std::size_t d = *daily_->day_of(t);
      resize(out.daily_window, daily_len_);
      for (std::size_t n = 0; n < n_vars_; ++n) {
        const double* src = daily_->table.values[n].data() + (d + 1 - daily_len_);
        std::copy(src, src + daily_len_, out.daily_window.row(n).begin());
      }
    }
  }

 private:
  bool admissible(std::size_t t) const {
    if (needs_.long_window && t + 1 < long_len_) return false;
    if (needs_.short_window && t + 1 < short_len_) return false;
    if (needs_.daily_window) {
      const auto d = daily_->day_of(t);
      if (!d || *d + 1 < daily_len_) return false;
    }
    return true;
  }

  void resize(FeatureMap& m, std::size_t len) const {
    if (m.channels != n_vars_ || m.length != len) m = FeatureMap(n_vars_, len);
  }

  void copy_hours(std::size_t t, std::size_t len, FeatureMap& out) const {
    resize(out, len);
    for (std::size_t n = 0; n < n_vars_; ++n) {
      const double* src = hourly_->values[n].data() + (t + 1 - len);
      std::copy(src, src + len, out.row(n).begin());
    }
  }

  std::shared_ptr<const SeriesTable> hourly_;
  std::shared_ptr<const DailyTable> daily_;
  WindowNeeds needs_;
  std::size_t n_vars_;
  std::size_t long_len_;
  std::size_t short_len_;
  std::size_t daily_len_;
  std::vector<std::size_t> targets_;
};

/// Window stream over `range`; an empty result is reported through `warnings`.
inline WindowSet make_windows(std::shared_ptr<const SeriesTable> hourly, std::shared_ptr<const DailyTable> daily,
                              const ModelSpec& spec, IndexRange range, WindowOptions opt = {},
                              std::vector<std::string>* warnings = nullptr) {
  WindowSet set(std::move(hourly), std::move(daily), spec, range, opt);
  if (set.size() == 0 && warnings) {
    warnings->push_back("no admissible target hours in range [" + std::to_string(range.begin) + ", " +
                        std::to_string(range.end) + ")");
  }
  return set;
}

// ---------------------------------------------------------------------------
// Prepared dataset

/// Raw table plus everything derived from it for one train/val/test split.
struct PreparedData {
  SeriesTable raw;
  SplitRanges splits;
  NormStats hourly_stats;
  NormStats daily_stats;
  std::shared_ptr<const SeriesTable> hourly;  // normalised
  std::shared_ptr<const DailyTable> daily;    // normalised daily means
  FlowBands bands;                            // from the full observed record
  std::vector<std::string> warnings;
};

/// Splits by calendar year, fits normalisation on the training span only and
/// builds the daily table. Stats may be supplied (e.g. from a checkpoint).
inline PreparedData prepare_data(SeriesTable raw, const YearSplit& years, const DailyOptions& daily_opt = {},
                                 const NormStats* hourly_stats = nullptr, const NormStats* daily_stats = nullptr) {
  raw.validate();
  PreparedData p;
  p.splits = split_chronological(raw, years);
  p.hourly_stats = hourly_stats ? *hourly_stats : fit_norm_stats(raw, p.splits.train);
  DailyTable daily_raw = aggregate_daily(raw, daily_opt);
  p.warnings = daily_raw.warnings;
  if (daily_stats) {
    p.daily_stats = *daily_stats;
  } else {
    // training days: those whose block starts inside the training span
    const std::size_t first = p.splits.train.begin > daily_raw.hour_offset
                                  ? (p.splits.train.begin - daily_raw.hour_offset + 23) / 24
                                  : 0;
    const std::size_t last = std::min(daily_raw.table.n_hours(),
                                      p.splits.train.end > daily_raw.hour_offset ? (p.splits.train.end - daily_raw.hour_offset) / 24 : 0);
    p.daily_stats = fit_norm_stats(daily_raw.table, {first, last});
  }
  p.hourly = std::make_shared<const SeriesTable>(normalize(raw, p.hourly_stats));
  DailyTable daily_norm = daily_raw;
  daily_norm.table = normalize(daily_raw.table, p.daily_stats);
  p.daily = std::make_shared<const DailyTable>(std::move(daily_norm));
  p.bands = flow_bands(raw.flow());
  p.raw = std::move(raw);
  return p;
}

}  // namespace rrnet
