// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "rrnet/evaluation.hpp"

using namespace rrnet;

namespace {

const FlowBands kReferenceBands{257.8, 598.3, 1293.4};

std::vector<double> noise(std::size_t n, std::uint64_t seed, double scale = 1.0, double offset = 0.0) {
  Rng r(seed);
  std::vector<double> v(n);
  for (double& x : v) x = offset + scale * r.normal();
  return v;
}

PreparedData tiny_data(int test_years) {
  SyntheticConfig c;
  c.years = 2 + test_years;
  c.seed = 13;
  return prepare_data(generate_synthetic(c), YearSplit::from_counts(2007, 1, 1, test_years));
}

}  // namespace

TEST(Nse, Examples) {
  const std::vector<double> obs{1, 2, 3};
  EXPECT_DOUBLE_EQ(nse(obs, obs), 1.0);
  EXPECT_DOUBLE_EQ(nse(obs, std::vector<double>{2, 2, 2}), 0.0);
  EXPECT_DOUBLE_EQ(nse(obs, std::vector<double>{1, 2, 4}), 0.5);
}

TEST(Nse, Errors) {
  EXPECT_THROW(nse(std::vector<double>{3, 3, 3}, std::vector<double>{1, 2, 3}), UndefinedMetricError);
  EXPECT_THROW(nse(std::vector<double>{1}, std::vector<double>{1}), EmptyInputError);
  EXPECT_THROW(nse(std::vector<double>{1, 2}, std::vector<double>{1}), ShapeError);
}

TEST(Rmse, Examples) {
  EXPECT_NEAR(rmse(std::vector<double>{0, 0}, std::vector<double>{3, 4}), std::sqrt(12.5), 1e-15);
  const std::vector<double> v{5, 1, 7};
  EXPECT_EQ(rmse(v, v), 0.0);
}

TEST(Pearson, AffineAndErrors) {
  const auto obs = noise(200, 1);
  std::vector<double> sim(obs.size());
  for (std::size_t i = 0; i < obs.size(); ++i) sim[i] = 2 * obs[i] + 1;
  EXPECT_NEAR(pearson_r(obs, sim), 1.0, 1e-12);
  for (double& x : sim) x = -x;
  EXPECT_NEAR(pearson_r(obs, sim), -1.0, 1e-12);
  EXPECT_THROW(pearson_r(obs, std::vector<double>(obs.size(), 4.0)), UndefinedMetricError);
}

TEST(Pearson, InvariantUnderPositiveAffineMaps) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto a = noise(50, 2 * s + 1);
    const auto b = noise(50, 2 * s + 2);
    std::vector<double> a2(a.size()), b2(b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      a2[i] = 3.5 * a[i] - 7.0;
      b2[i] = 0.01 * b[i] + 100.0;
    }
    EXPECT_NEAR(pearson_r(a, b), pearson_r(a2, b2), 1e-10);
  }
}

TEST(Metrics, NseRmseIdentity) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto obs = noise(30 + s, 100 + s, 50.0, 300.0);
    const auto sim = noise(30 + s, 200 + s, 50.0, 310.0);
    const double m = detail::mean_of(obs);
    double ss = 0;
    for (double x : obs) ss += (x - m) * (x - m);
    const double r = rmse(obs, sim);
    EXPECT_NEAR(nse(obs, sim), 1.0 - r * r * static_cast<double>(obs.size()) / ss, 1e-10);
  }
}

TEST(BandRmse, ReferenceThresholdExample) {
  const auto b = band_rmse(std::vector<double>{100, 2000}, std::vector<double>{100, 1000}, kReferenceBands);
  ASSERT_TRUE(b.low && b.high && b.peak);
  EXPECT_EQ(*b.low, 0.0);
  EXPECT_EQ(*b.high, 1000.0);
  EXPECT_EQ(*b.peak, 1000.0);
  EXPECT_FALSE(b.middle.has_value());
  EXPECT_EQ(b.n_middle, 0u);
}

TEST(BandRmse, AllLowLeavesOtherBandsAbsent) {
  const std::vector<double> obs{10, 20, 30};
  const auto b = band_rmse(obs, obs, kReferenceBands);
  EXPECT_EQ(*b.low, 0.0);
  EXPECT_FALSE(b.middle);
  EXPECT_FALSE(b.high);
  EXPECT_FALSE(b.peak);
}

TEST(BandRmse, MembershipFollowsObservedOnly) {
  const auto b = band_rmse(std::vector<double>{100, 100}, std::vector<double>{5000, 700}, kReferenceBands);
  EXPECT_EQ(b.n_low, 2u);
  EXPECT_EQ(b.n_high, 0u);
}

TEST(BandRmse, BandsRecombineToTotal) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    auto obs = noise(400, 300 + s);
    for (double& x : obs) x = 600.0 * std::exp(0.8 * x);
    auto sim = obs;
    const auto e = noise(400, 400 + s, 80.0);
    for (std::size_t i = 0; i < sim.size(); ++i) sim[i] += e[i];
    const auto bands = flow_bands(obs);
    const auto b = band_rmse(obs, sim, bands);
    const double total = rmse(obs, sim);
    auto part = [](const std::optional<double>& r, std::size_t n) { return r ? static_cast<double>(n) * *r * *r : 0.0; };
    const double sum = part(b.low, b.n_low) + part(b.middle, b.n_middle) + part(b.high, b.n_high);
    EXPECT_NEAR(sum, 400.0 * total * total, 1e-8 * 400.0 * total * total);
    EXPECT_EQ(b.n_low + b.n_middle + b.n_high, 400u);
  }
}

TEST(Median, OddEvenAndSingle) {
  EXPECT_EQ(median({0.1, 0.5, 0.9}), 0.5);
  EXPECT_DOUBLE_EQ(median({0.4, 0.2}), 0.3);
  EXPECT_EQ(median({7.0}), 7.0);
  EXPECT_THROW(median({}), EmptyInputError);
}

TEST(Median, OverTrials) {
  PeriodMetrics a, b, c;
  a.rmse = 3;
  b.rmse = 1;
  c.rmse = 2;
  a.nse = 0.1;
  b.nse = 0.9;
  c.nse = 0.5;
  const auto m = median_over_trials({a, b, c});
  EXPECT_EQ(m.rmse, 2.0);
  EXPECT_EQ(*m.nse, 0.5);
  EXPECT_FALSE(m.r.has_value());
  const auto single = median_over_trials({a});
  EXPECT_EQ(single.rmse, 3.0);
  EXPECT_EQ(*single.nse, 0.1);
}

TEST(LagCorrelation, RecoversShift) {
  const auto driver = noise(2000, 5);
  std::vector<double> flow(driver.size(), 0.0);
  for (std::size_t t = 3; t < flow.size(); ++t) flow[t] = driver[t - 3];
  flow[0] = driver[1997];
  flow[1] = driver[1998];
  flow[2] = driver[1999];
  const auto curve = lag_correlation(flow, driver, 24);
  ASSERT_EQ(curve.size(), 25u);
  std::size_t best = 0;
  for (std::size_t l = 1; l < curve.size(); ++l) {
    if (*curve[l] > *curve[best]) best = l;
  }
  EXPECT_EQ(best, 3u);
  EXPECT_NEAR(*curve[3], 1.0, 1e-12);
  EXPECT_NEAR(*curve[0], pearson_r(flow, driver), 1e-15);
}

TEST(LagCorrelation, WhiteNoiseIsUncorrelated) {
  const auto a = noise(10000, 6);
  const auto b = noise(10000, 7);
  for (const auto& r : lag_correlation(a, b, 24)) EXPECT_LT(std::abs(*r), 0.1);
}

TEST(LagCorrelation, ConstantOverlapIsAbsentAndErrors) {
  std::vector<double> flow(50, 1.0), driver = noise(50, 8);
  flow[0] = 2.0;
  const auto curve = lag_correlation(flow, driver, 4);
  EXPECT_TRUE(curve[0].has_value());
  EXPECT_FALSE(curve[1].has_value());
  EXPECT_THROW(lag_correlation(flow, driver, 60), EmptyInputError);
  EXPECT_THROW(lag_correlation(flow, std::vector<double>(49, 0.0), 4), ShapeError);
}

TEST(EvaluateModel, PureAndInPhysicalUnits) {
  const auto data = tiny_data(1);
  auto spec = ModelSpec::defaults(ModelKind::LstmWDpH, data.raw.n_vars(), 2, 240);
  spec.hidden_size = 3;
  Rng r(1);
  auto m = build_model(spec, r);
  const auto a = evaluate_model(*m, data, 97);
  const auto b = evaluate_model(*m, data, 97);
  for (std::size_t p = 0; p < 3; ++p) {
    ASSERT_TRUE(a.period[p].has_value()) << kPeriodNames[p];
    EXPECT_EQ(a.predictions[p].simulated, b.predictions[p].simulated);
    EXPECT_EQ(a.period[p]->rmse, b.period[p]->rmse);
    EXPECT_EQ(a.period[p]->count, a.predictions[p].observed.size());
  }
  const auto& pred = a.predictions[2];
  EXPECT_EQ(pred.observed[0], data.raw.flow()[data.splits.test.begin]);
  EXPECT_EQ(pred.time[0], data.raw.time_of(data.splits.test.begin));
  EXPECT_GT(pred.simulated[0], 1.0);  // m3/s, not z-scores
}

TEST(EvaluateModel, EmptyTestPeriodIsAbsent) {
  const auto data = tiny_data(0);
  auto spec = ModelSpec::defaults(ModelKind::CnnOnly, data.raw.n_vars(), 2, 240);
  Rng r(1);
  auto m = build_model(spec, r);
  const auto ev = evaluate_model(*m, data, 211);
  EXPECT_TRUE(ev.period[0].has_value());
  EXPECT_FALSE(ev.period[2].has_value());
  MetricsReport rep;
  rep.arch = "cnn";
  rep.add_trial(0, ev);
  rep.finalize();
  EXPECT_FALSE(rep.median[2].has_value());
  std::ostringstream csv;
  write_metrics_csv(rep, csv);
  EXPECT_EQ(csv.str().find("test"), std::string::npos);
}

TEST(EvaluateModel, DimensionMismatch) {
  const auto data = tiny_data(1);
  const auto spec = ModelSpec::defaults(ModelKind::CnnOnly, data.raw.n_vars() + 1, 2, 240);
  Rng r(1);
  auto m = build_model(spec, r);
  EXPECT_THROW(evaluate_model(*m, data), ShapeError);
}

TEST(Reports, CsvLayouts) {
  PeriodMetrics pm;
  pm.count = 2;
  pm.rmse = 1.5;
  pm.nse = 0.25;
  pm.bands.low = 0.0;
  ModelEvaluation ev;
  ev.period[2] = pm;
  MetricsReport rep;
  rep.arch = "cnnslstm";
  rep.add_trial(4, ev);
  rep.finalize();
  std::ostringstream csv;
  write_metrics_csv(rep, csv);
  std::istringstream lines(csv.str());
  std::string header, row;
  std::getline(lines, header);
  std::getline(lines, row);
  EXPECT_EQ(header, "trial,period,rmse,r,nse,rmse_low,rmse_middle,rmse_high,rmse_peak");
  EXPECT_EQ(row, "4,test,1.5,,0.25,0,,,");

  std::ostringstream lag;
  write_lag_csv({0.5, std::nullopt, -0.25}, lag);
  EXPECT_EQ(lag.str(), "lag,r\n0,0.5\n1,\n2,-0.25\n");

  const auto j = metrics_json(rep);
  EXPECT_EQ(j["arch"], "cnnslstm");
  EXPECT_TRUE(j["median"]["test"]["r"].is_null());
  EXPECT_DOUBLE_EQ(j["median"]["test"]["nse"].get<double>(), 0.25);
}

TEST(Reports, MedianPredictions) {
  PeriodPredictions a, b, c;
  for (auto* p : {&a, &b, &c}) {
    p->time = {10, 11};
    p->observed = {1, 2};
  }
  a.simulated = {1, 5};
  b.simulated = {3, 4};
  c.simulated = {2, 6};
  const auto m = median_predictions({a, b, c});
  EXPECT_EQ(m.simulated, (std::vector<double>{2, 5}));
  std::ostringstream out;
  write_predictions_csv(m, out);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "timestamp,observed,simulated");
}
