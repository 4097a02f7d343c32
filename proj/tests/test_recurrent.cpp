// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "rrnet/gradcheck.hpp"
#include "rrnet/recurrent.hpp"

using namespace rrnet;

namespace {

void randomize(LstmCellParams& p, Rng& r, double scale = 0.7) {
  for (Param* t : p.parameters()) {
    for (double& v : t->values) v = scale * r.normal();
  }
}

oracle::LstmWeights to_oracle(const LstmCellParams& p) {
  const std::size_t in = p.input_size(), hid = p.hidden_size();
  oracle::LstmWeights w;
  w.w_x.assign(4, oracle::Matrix(hid, std::vector<double>(in)));
  w.w_h.assign(4, oracle::Matrix(hid, std::vector<double>(hid)));
  w.b_x.assign(4, std::vector<double>(hid));
  w.b_h.assign(4, std::vector<double>(hid));
  for (int g = 0; g < 4; ++g) {
    for (std::size_t r = 0; r < hid; ++r) {
      for (std::size_t k = 0; k < in; ++k) w.w_x[g][r][k] = p.w_input[g].values[r * in + k];
      for (std::size_t k = 0; k < hid; ++k) w.w_h[g][r][k] = p.w_hidden[g].values[r * hid + k];
      w.b_x[g][r] = p.b_input[g].values[r];
      w.b_h[g][r] = p.b_hidden[g].values[r];
    }
  }
  return w;
}

}  // namespace

TEST(LstmStep, ZeroParametersGiveZeroState) {
  const auto p = LstmCellParams::zeros(3, 4);
  LstmStepCache cache;
  const auto s = lstm_step(std::vector<double>{1, -2, 3}, LstmState::zeros(4), p, &cache);
  for (double v : s.h) EXPECT_EQ(v, 0.0);
  for (double v : s.c) EXPECT_EQ(v, 0.0);
  for (double v : cache.gates[kInputGate]) EXPECT_EQ(v, 0.5);
  for (double v : cache.gates[kCellInput]) EXPECT_EQ(v, 0.0);
}

TEST(LstmStep, SaturatedForgetGatePreservesMemory) {
  auto p = LstmCellParams::zeros(1, 1);
  p.b_input[kForgetGate].values[0] = 20.0;
  p.b_hidden[kForgetGate].values[0] = 20.0;
  LstmState prev = LstmState::zeros(1);
  prev.c[0] = 1.0;
  const auto s = lstm_step(std::vector<double>{0.3}, prev, p);
  EXPECT_NEAR(s.c[0], 1.0, 1e-12);
}

TEST(LstmStep, MatchesDirectTranscription) {
  Rng r(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t in = 1 + r.below(4), hid = 1 + r.below(4);
    auto p = LstmCellParams::zeros(in, hid);
    randomize(p, r);
    std::vector<double> x(in);
    for (double& v : x) v = r.normal();
    LstmState prev = LstmState::zeros(hid);
    for (std::size_t k = 0; k < hid; ++k) {
      prev.h[k] = 0.9 * std::tanh(r.normal());
      prev.c[k] = r.normal();
    }
    const auto s = lstm_step(x, prev, p);
    std::vector<double> h = prev.h, c = prev.c;
    oracle::lstm_step(x, h, c, to_oracle(p));
    for (std::size_t k = 0; k < hid; ++k) {
      ASSERT_NEAR(s.h[k], h[k], 1e-12);
      ASSERT_NEAR(s.c[k], c[k], 1e-12);
    }
  }
}

TEST(LstmStep, ShapeMismatch) {
  const auto p = LstmCellParams::zeros(3, 2);
  EXPECT_THROW(lstm_step(std::vector<double>{1, 2}, LstmState::zeros(2), p), ShapeError);
  EXPECT_THROW(lstm_step(std::vector<double>{1, 2, 3}, LstmState::zeros(3), p), ShapeError);
}

TEST(Lstm, SingleStepEqualsLstmStep) {
  Rng r(4);
  Lstm lstm(3, 2, r);
  randomize(lstm.cell(), r);
  FeatureMap x(3, 1);
  x.data = {0.1, -0.4, 0.8};
  const auto h = lstm.forward(x);
  const auto s = lstm_step(x.data, LstmState::zeros(2), lstm.cell());
  EXPECT_EQ(h, s.h);
}

TEST(Lstm, ZeroParametersAnyLength) {
  Lstm lstm(LstmCellParams::zeros(2, 3));
  FeatureMap x(2, 37);
  for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] = std::sin(static_cast<double>(i));
  for (double v : lstm.forward(x)) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, RangesOfCachedQuantities) {
  Rng r(8);
  Lstm lstm(3, 5, r);
  randomize(lstm.cell(), r, 2.0);
  FeatureMap x(3, 40);
  std::fill(x.data.begin(), x.data.end(), 1.5);
  for (double v : lstm.forward(x)) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
  for (std::size_t s = 0; s < lstm.cached_steps(); ++s) {
    for (std::size_t u = 0; u < 5; ++u) {
      for (std::size_t g = 0; g < 3; ++g) {
        EXPECT_GE(lstm.cached_gate(s, g, u), 0.0);
        EXPECT_LE(lstm.cached_gate(s, g, u), 1.0);
      }
      EXPECT_LE(std::abs(lstm.cached_gate(s, kCellInput, u)), 1.0);
      EXPECT_LE(std::abs(lstm.cached_tanh_c(s, u)), 1.0);
    }
  }
}

TEST(Lstm, ConsumesWindowInOrder) {
  // reversing the window changes h(T)
  Rng r(6);
  Lstm lstm(1, 2, r);
  randomize(lstm.cell(), r);
  FeatureMap a(1, 4), b(1, 4);
  a.data = {0.1, 0.2, 0.3, 0.9};
  b.data = {0.9, 0.3, 0.2, 0.1};
  EXPECT_NE(lstm.forward(a), lstm.forward(b));
}

TEST(Lstm, ZeroUpstreamGradientGivesZeroGradients) {
  Rng r(9);
  Lstm lstm(2, 3, r);
  randomize(lstm.cell(), r);
  FeatureMap x(2, 6);
  for (double& v : x.data) v = r.normal();
  lstm.forward(x);
  const auto dx = lstm.backward(std::vector<double>(3, 0.0));
  for (double v : dx.data) EXPECT_EQ(v, 0.0);
  for (Param* p : lstm.parameters()) {
    for (double g : p->grad) EXPECT_EQ(g, 0.0);
  }
}

TEST(Lstm, BackwardWithoutForwardIsStateError) {
  Rng r(1);
  Lstm lstm(2, 2, r);
  EXPECT_THROW(lstm.backward(std::vector<double>{1, 1}), StateError);
}

TEST(Lstm, SingleStepHandDerivedChainRule) {
  // T = 1, hidden 1, input 1, loss = h.
  auto p = LstmCellParams::zeros(1, 1);
  const double wi = 0.3, wf = -0.2, wo = 0.5, wc = 0.8, x = 0.7;
  p.w_input[kInputGate].values[0] = wi;
  p.w_input[kForgetGate].values[0] = wf;
  p.w_input[kOutputGate].values[0] = wo;
  p.w_input[kCellInput].values[0] = wc;
  p.b_input[kInputGate].values[0] = 0.1;
  Lstm lstm(p);
  FeatureMap in(1, 1);
  in.data = {x};
  lstm.forward(in);
  const auto dx = lstm.backward(std::vector<double>{1.0});
  const double zi = wi * x + 0.1, zo = wo * x, zc = wc * x;
  const double gi = 1 / (1 + std::exp(-zi)), go = 1 / (1 + std::exp(-zo)), gc = std::tanh(zc);
  const double c = gi * gc, tc = std::tanh(c);
  const double dc = go * (1 - tc * tc);
  const double d_wo = tc * go * (1 - go) * x;
  const double d_wi = dc * gc * gi * (1 - gi) * x;
  const double d_wc = dc * gi * (1 - gc * gc) * x;
  const double d_x = tc * go * (1 - go) * wo + dc * gc * gi * (1 - gi) * wi + dc * gi * (1 - gc * gc) * wc;
  EXPECT_NEAR(lstm.cell().w_input[kOutputGate].grad[0], d_wo, 1e-10);
  EXPECT_NEAR(lstm.cell().w_input[kInputGate].grad[0], d_wi, 1e-10);
  EXPECT_NEAR(lstm.cell().w_input[kCellInput].grad[0], d_wc, 1e-10);
  EXPECT_NEAR(lstm.cell().w_input[kForgetGate].grad[0], 0.0, 1e-15);  // c_prev = 0
  EXPECT_NEAR(dx.data[0], d_x, 1e-10);
}

TEST(Lstm, BpttMatchesFiniteDifferencesAllSixteenTensors) {
  GradcheckOptions opt;
  opt.trials = 100;
  const auto r = gradcheck_component("lstm_cell", opt);
  EXPECT_TRUE(r.pass()) << r.max_rel_err << " at " << r.worst_tensor;
  EXPECT_EQ(r.checks, 100u * 17u);
}

TEST(OutputHead, Examples) {
  Param w("w", {1, 2}), b("b", {1});
  w.values = {3, 4};
  b.values = {5};
  EXPECT_EQ(output_head(std::vector<double>{1, 2}, w, b), 16.0);
  w.values = {1, 0};
  b.values = {0};
  EXPECT_EQ(output_head(std::vector<double>{0.25, 9}, w, b), 0.25);
  EXPECT_THROW(output_head(std::vector<double>{1, 2, 3}, w, b), ShapeError);
}
