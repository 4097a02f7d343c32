// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "rrnet/data.hpp"

using namespace rrnet;

namespace {

SyntheticConfig small_config(int years = 2) {
  SyntheticConfig c;
  c.years = years;
  c.seed = 3;
  return c;
}

SeriesTable ramp_table(std::size_t hours, HourStamp start = 0) {
  SeriesTable t;
  t.start = start;
  t.names = {"a", "b", "flow"};
  t.values.assign(3, std::vector<double>(hours));
  for (std::size_t i = 0; i < hours; ++i) {
    t.values[0][i] = static_cast<double>(i);
    t.values[1][i] = std::sin(0.1 * static_cast<double>(i));
    t.values[2][i] = 10.0 + static_cast<double>(i % 7);
  }
  return t;
}

}  // namespace

TEST(Timestamps, FormatParseRoundTrip) {
  const HourStamp h = hour_stamp(2016, 2, 29, 23);
  EXPECT_EQ(format_timestamp(h), "2016-02-29T23:00");
  EXPECT_EQ(parse_timestamp("2016-02-29T23:00"), h);
  EXPECT_EQ(year_of(h), 2016);
  EXPECT_EQ(hours_in_year(2016), 8784u);
  EXPECT_EQ(hours_in_year(2015), 8760u);
  EXPECT_THROW(parse_timestamp("2016-02-30T01:00"), ParseError);
  EXPECT_THROW(parse_timestamp("yesterday"), ParseError);
}

TEST(Synthetic, FixedSeedIsBitwiseReproducible) {
  const auto a = generate_synthetic(small_config());
  const auto b = generate_synthetic(small_config());
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(data_hash(a), data_hash(b));
  auto c = small_config();
  c.seed = 4;
  EXPECT_NE(data_hash(generate_synthetic(c)), data_hash(a));
}

TEST(Synthetic, ShapeAndRanges) {
  const auto run = generate_synthetic_run(small_config());
  const auto& t = run.table;
  EXPECT_EQ(t.n_hours(), 8760u + 8784u);
  EXPECT_EQ(t.n_vars(), 6u);
  EXPECT_EQ(t.names.back(), "flow");
  for (std::size_t r = 0; r < 2; ++r) {
    for (double p : t.values[r]) ASSERT_GE(p, 0.0);
  }
  for (double s : run.snowpack) ASSERT_GE(s, 0.0);
  for (double q : t.flow()) ASSERT_GE(q, 0.0);
}

TEST(Synthetic, NoPrecipitationDrainsMonotonically) {
  auto c = small_config(1);
  c.precip_scale = 0.0;
  const auto t = generate_synthetic(c);
  const auto& q = t.flow();
  for (std::size_t i = 1; i < q.size(); ++i) ASSERT_LE(q[i], q[i - 1]);
  EXPECT_LT(q.back(), 0.5 * q.front());
}

TEST(Synthetic, ColdBasinStoresAllPrecipitationAsSnow) {
  auto cold = small_config(1);
  cold.temp_mean = -5.0;
  cold.temp_annual_amp = 0.0;
  cold.temp_diurnal_amp = 0.0;
  cold.temp_noise = 0.0;
  cold.wet_cooling = 0.0;
  auto dry = cold;
  dry.precip_scale = 0.0;
  const auto run = generate_synthetic_run(cold);
  for (std::size_t i = 1; i < run.snowpack.size(); ++i) ASSERT_GE(run.snowpack[i], run.snowpack[i - 1]);
  EXPECT_GT(run.snowpack.back(), 0.0);
  EXPECT_EQ(run.table.flow(), generate_synthetic(dry).flow());
}

TEST(Synthetic, MassBalanceCloses) {
  const auto run = generate_synthetic_run(small_config(3));
  const double storage_change = run.final_storage - run.initial_storage;
  EXPECT_NEAR(run.total_precip - run.total_et - run.total_outflow - storage_change, 0.0, 1e-6 * run.total_precip);
  EXPECT_LE(run.total_outflow, run.total_precip - run.total_et + run.initial_storage + 1e-6 * run.total_precip);
}

TEST(Synthetic, InvalidConfigRejected) {
  auto c = small_config();
  c.years = 0;
  EXPECT_THROW(generate_synthetic(c), ConfigError);
  c = small_config();
  c.fast_fraction = 1.5;
  EXPECT_THROW(generate_synthetic(c), ConfigError);
}

TEST(Csv, ThreeRows) {
  std::istringstream in("timestamp,p,t,flow\n2010-01-01T00:00,1,2,3\n2010-01-01T01:00,1,2,3\n2010-01-01T02:00,0,0,4\n");
  const auto t = ingest_csv(in);
  EXPECT_EQ(t.n_hours(), 3u);
  EXPECT_EQ(t.n_vars(), 2u);
  EXPECT_EQ(t.flow()[2], 4.0);
  EXPECT_EQ(t.start, hour_stamp(2010, 1, 1, 0));
}

TEST(Csv, FlowColumnMovedLast) {
  std::istringstream in("timestamp,q,p\n2010-01-01T00:00,5,1\n");
  const auto t = ingest_csv(in, "q");
  EXPECT_EQ(t.names, (std::vector<std::string>{"p", "q"}));
  EXPECT_EQ(t.flow()[0], 5.0);
}

TEST(Csv, RoundTrip) {
  const auto t = generate_synthetic(small_config(1));
  std::stringstream buf;
  export_csv(t, buf);
  const auto back = ingest_csv(buf);
  EXPECT_EQ(back.start, t.start);
  EXPECT_EQ(back.names, t.names);
  ASSERT_EQ(back.n_hours(), t.n_hours());
  for (std::size_t r = 0; r < t.values.size(); ++r) {
    for (std::size_t i = 0; i < t.n_hours(); ++i) ASSERT_NEAR(back.values[r][i], t.values[r][i], 1e-12);
  }
}

TEST(Csv, SkippedHourNamesMissingTimestamp) {
  std::istringstream in("timestamp,p,flow\n2010-01-01T00:00,1,3\n2010-01-01T02:00,1,3\n");
  try {
    ingest_csv(in);
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2010-01-01T01:00"), std::string::npos) << msg;
    EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
  }
}

TEST(Csv, DuplicateTimestamp) {
  std::istringstream in("timestamp,p,flow\n2010-01-01T00:00,1,3\n2010-01-01T00:00,1,3\n");
  EXPECT_THROW(ingest_csv(in), IngestError);
}

TEST(Csv, NonNumericCellIsParseError) {
  std::istringstream in("timestamp,p,flow\n2010-01-01T00:00,abc,3\n");
  EXPECT_THROW(ingest_csv(in), ParseError);
}

TEST(Csv, MissingFlowColumn) {
  std::istringstream in("timestamp,p,q\n2010-01-01T00:00,1,3\n");
  EXPECT_THROW(ingest_csv(in), IngestError);
}

TEST(Split, ThirteenYearsNineTwoTwo) {
  const auto t = generate_synthetic(SyntheticConfig{});
  const auto s = split_chronological(t, YearSplit::from_counts(2007, 9, 2, 2));
  std::size_t train_hours = 0;
  for (int y = 2007; y <= 2015; ++y) train_hours += hours_in_year(y);
  EXPECT_EQ(s.train.begin, 0u);
  EXPECT_EQ(s.train.size(), train_hours);
  EXPECT_EQ(s.val.size(), 8784u + 8760u);
  EXPECT_EQ(s.test.size(), 8760u + 8760u);
  EXPECT_EQ(s.val.begin, s.train.end);
  EXPECT_EQ(s.test.begin, s.val.end);
  EXPECT_EQ(s.test.end, t.n_hours());
}

TEST(Split, Errors) {
  const auto t = generate_synthetic(small_config(3));
  EXPECT_THROW(split_chronological(t, YearSplit::from_counts(2007, 3, 1, 0)), ConfigError);
  YearSplit overlap = YearSplit::from_counts(2007, 2, 1, 0);
  overlap.val = {2008, 2008};
  EXPECT_THROW(split_chronological(t, overlap), ConfigError);
  EXPECT_THROW(split_chronological(t, YearSplit::from_counts(2006, 1, 1, 1)), ConfigError);
}

TEST(Normalize, TrainingSpanZeroMeanUnitStd) {
  const auto t = generate_synthetic(small_config(2));
  const IndexRange train{0, 8760};
  const auto stats = fit_norm_stats(t, train);
  const auto n = normalize(t, stats);
  for (const auto& row : n.values) {
    double s = 0, s2 = 0;
    for (std::size_t i = train.begin; i < train.end; ++i) s += row[i];
    const double mean = s / 8760.0;
    for (std::size_t i = train.begin; i < train.end; ++i) s2 += (row[i] - mean) * (row[i] - mean);
    EXPECT_NEAR(mean, 0.0, 1e-10);
    EXPECT_NEAR(std::sqrt(s2 / 8760.0), 1.0, 1e-10);
  }
  const auto back = denormalize_flow(n.flow(), stats);
  for (std::size_t i = 0; i < back.size(); ++i) ASSERT_NEAR(back[i], t.flow()[i], 1e-12 * std::max(1.0, t.flow()[i]));
}

TEST(Normalize, ConstantVariableRejected) {
  auto t = ramp_table(48);
  std::fill(t.values[1].begin(), t.values[1].end(), 3.0);
  EXPECT_THROW(fit_norm_stats(t, {0, 48}), ConfigError);
  NormStats bad{{0, 0, 0}, {1, 0, 1}};
  EXPECT_THROW(normalize(t, bad), ConfigError);
}

TEST(Daily, MeanOfConstantDay) {
  SeriesTable t;
  t.names = {"x", "flow"};
  t.values = {std::vector<double>(24, 2.0), std::vector<double>(24, 1.0)};
  const auto d = aggregate_daily(t);
  ASSERT_EQ(d.table.n_hours(), 1u);
  EXPECT_EQ(d.table.values[0][0], 2.0);
  EXPECT_TRUE(d.warnings.empty());
}

TEST(Daily, MeanOfOneToTwentyFour) {
  SeriesTable t;
  t.names = {"x", "flow"};
  t.values = {std::vector<double>(24), std::vector<double>(24, 1.0)};
  for (int i = 0; i < 24; ++i) t.values[0][i] = i + 1;
  EXPECT_EQ(aggregate_daily(t).table.values[0][0], 12.5);
}

TEST(Daily, PartialDayTrimmedWithWarning) {
  const auto d = aggregate_daily(ramp_table(50));
  EXPECT_EQ(d.table.n_hours(), 2u);
  ASSERT_EQ(d.warnings.size(), 1u);
  EXPECT_NE(d.warnings[0].find("trailing"), std::string::npos);
}

TEST(Daily, SumSwitchAppliesToPrecipitationOnly) {
  SeriesTable t;
  t.names = {"precip_r1", "temperature", "flow"};
  t.values = {std::vector<double>(24, 0.5), std::vector<double>(24, 4.0), std::vector<double>(24, 1.0)};
  const auto d = aggregate_daily(t, {.sum_precipitation = true});
  EXPECT_EQ(d.table.values[0][0], 12.0);
  EXPECT_EQ(d.table.values[1][0], 4.0);
}

TEST(Daily, DayOfHour) {
  const auto d = aggregate_daily(ramp_table(72, hour_stamp(2010, 1, 1, 20)));
  EXPECT_EQ(d.hour_offset, 4u);
  EXPECT_FALSE(d.day_of(3).has_value());
  EXPECT_EQ(d.day_of(4), 0u);
  EXPECT_EQ(d.day_of(27), 0u);
  EXPECT_EQ(d.day_of(28), 1u);
}

TEST(Windows, CountAndAlignment) {
  auto hourly = std::make_shared<const SeriesTable>(ramp_table(6000));
  auto spec = ModelSpec::defaults(ModelKind::LstmWHour, 2);
  WindowSet w(hourly, nullptr, spec, {0, 6000});
  EXPECT_EQ(w.size(), 961u);
  EXPECT_EQ(w.target_index(0), 5039u);
  AssembledInput in;
  w.assemble(0, in);
  ASSERT_EQ(in.long_window.length, 5040u);
  EXPECT_EQ(in.long_window.at(0, 0), 0.0);
  EXPECT_EQ(in.long_window.at(0, 5039), 5039.0);
  EXPECT_EQ(w.target(0), hourly->flow()[5039]);
}

TEST(Windows, AllWindowsEndAtTarget) {
  auto hourly = std::make_shared<const SeriesTable>(ramp_table(24 * 40));
  auto daily = std::make_shared<const DailyTable>(aggregate_daily(*hourly));
  const auto spec = ModelSpec::defaults(ModelKind::CnnPLstm, 2, 2, 240);
  WindowSet w(hourly, daily, spec, {0, hourly->n_hours()}, {.target_stride = 7});
  ASSERT_GT(w.size(), 0u);
  AssembledInput in;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w.assemble(i, in);
    const double t = static_cast<double>(w.target_index(i));
    ASSERT_EQ(in.long_window.at(0, spec.long_len - 1), t);
    ASSERT_EQ(in.short_window.at(0, spec.short_len - 1), t);
  }
}

TEST(Windows, DailyWindowEndsAtDayOfTarget) {
  auto hourly = std::make_shared<const SeriesTable>(ramp_table(24 * 260));
  auto daily = std::make_shared<const DailyTable>(aggregate_daily(*hourly));
  const auto spec = ModelSpec::defaults(ModelKind::LstmWDpH, 2);
  WindowSet w(hourly, daily, spec, {0, hourly->n_hours()});
  const std::size_t d = 230;
  const std::size_t t = d * 24 + 23;
  std::size_t i = 0;
  while (w.target_index(i) != t) ++i;
  AssembledInput in;
  w.assemble(i, in);
  ASSERT_EQ(in.daily_window.length, 210u);
  // ramp row: day k has mean 24k + 11.5
  EXPECT_EQ(in.daily_window.at(0, 0), 24.0 * (d - 209) + 11.5);
  EXPECT_EQ(in.daily_window.at(0, 209), 24.0 * d + 11.5);
  EXPECT_EQ(in.short_window.at(0, 209), static_cast<double>(t));
}

TEST(Windows, TargetsStayInsideRange) {
  auto hourly = std::make_shared<const SeriesTable>(ramp_table(3000));
  const auto spec = ModelSpec::defaults(ModelKind::CnnSLstm, 2, 2, 240);
  const IndexRange val{2000, 2600};
  WindowSet w(hourly, nullptr, spec, val);
  EXPECT_EQ(w.size(), 600u);
  for (auto t : w.targets()) ASSERT_TRUE(val.contains(t));
}

TEST(Windows, EmptyRangeWarns) {
  auto hourly = std::make_shared<const SeriesTable>(ramp_table(100));
  const auto spec = ModelSpec::defaults(ModelKind::LstmWHour, 2, 2, 240);
  std::vector<std::string> warnings;
  const auto w = make_windows(hourly, nullptr, spec, {0, 100}, {}, &warnings);
  EXPECT_EQ(w.size(), 0u);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Windows, VariableCountMismatch) {
  auto hourly = std::make_shared<const SeriesTable>(ramp_table(300));
  const auto spec = ModelSpec::defaults(ModelKind::LstmWHour, 5, 2, 240);
  EXPECT_THROW(WindowSet(hourly, nullptr, spec, {0, 300}), ShapeError);
}

TEST(Bands, PublishedThresholds) {
  const FlowBands b{257.8, 598.3, 1293.4};
  EXPECT_EQ(b.band_of(100).band, FlowBand::Low);
  EXPECT_FALSE(b.band_of(100).peak);
  EXPECT_EQ(b.band_of(257.8).band, FlowBand::Middle);
  EXPECT_EQ(b.band_of(598.3).band, FlowBand::High);
  EXPECT_FALSE(b.band_of(598.3).peak);
  EXPECT_EQ(b.band_of(2000).band, FlowBand::High);
  EXPECT_TRUE(b.band_of(2000).peak);
}

TEST(Bands, PercentilesInterpolate) {
  std::vector<double> v(101);
  for (int i = 0; i <= 100; ++i) v[i] = i;
  const auto b = flow_bands(v);
  EXPECT_DOUBLE_EQ(b.q25, 25.0);
  EXPECT_DOUBLE_EQ(b.q75, 75.0);
  EXPECT_DOUBLE_EQ(b.q95, 95.0);
  EXPECT_DOUBLE_EQ(percentile({1, 2}, 0.5), 1.5);
  EXPECT_THROW(percentile({}, 0.5), EmptyInputError);
}

TEST(Bands, PeakImpliesHighAndBandsPartition) {
  Rng r(5);
  std::vector<double> v(500);
  for (double& x : v) x = std::exp(r.normal());
  const auto b = flow_bands(v);
  for (double x : v) {
    const auto c = b.band_of(x);
    if (c.peak) ASSERT_EQ(c.band, FlowBand::High);
  }
}

TEST(Prepare, StatsFromTrainingSpanOnly) {
  const auto raw = generate_synthetic(small_config(3));
  const auto p = prepare_data(raw, YearSplit::from_counts(2007, 1, 1, 1));
  EXPECT_EQ(p.hourly_stats, fit_norm_stats(raw, p.splits.train));
  EXPECT_EQ(p.daily->table.n_hours(), 365u + 366u + 365u);
  const auto again = prepare_data(raw, YearSplit::from_counts(2007, 1, 1, 1), {}, &p.hourly_stats, &p.daily_stats);
  EXPECT_EQ(again.hourly->values, p.hourly->values);
}
