// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rrnet/rrnet.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string output;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("rrnet_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  RunResult run(const std::string& args) const {
    const auto log = dir_ / "cli.log";
    const std::string cmd = std::string("\"") + RRNET_CLI + "\" --output-root \"" + (dir_ / "out").string() + "\" " +
                            args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    return r;
  }

  std::string slurp(const fs::path& p) const {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  std::size_t line_count(const fs::path& p) const {
    std::ifstream in(p);
    std::size_t n = 0;
    std::string line;
    while (std::getline(in, line)) ++n;
    return n;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenerateWritesHourlyTableDeterministically) {
  const auto a = dir_ / "a.csv", b = dir_ / "b.csv";
  ASSERT_EQ(run("generate --years 2 --seed 5 -o " + a.string()).code, 0);
  ASSERT_EQ(run("generate --years 2 --seed 5 -o " + b.string()).code, 0);
  EXPECT_EQ(line_count(a), 1u + 8760u + 8784u);
  EXPECT_EQ(slurp(a), slurp(b));
  const auto t = rrnet::ingest_csv(a.string());
  EXPECT_EQ(t.n_vars(), 6u);
}

TEST_F(Cli, GenerateRejectsZeroYears) {
  const auto r = run("generate --years 0 -o " + (dir_ / "z.csv").string());
  EXPECT_NE(r.code, 0);
  EXPECT_FALSE(fs::exists(dir_ / "z.csv"));
}

TEST_F(Cli, GradcheckPassesAndFaultIsNamed) {
  auto r = run("gradcheck --arch cnnslstm --trials 10");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(r.output.find("FAIL"), std::string::npos) << r.output;
  r = run("gradcheck --arch cnnslstm --trials 10 --inject-fault conv1d");
  EXPECT_EQ(r.code, 1) << r.output;
  EXPECT_NE(r.output.find("gradient check failed: conv1d"), std::string::npos) << r.output;
}

TEST_F(Cli, LagCorrelationCurve) {
  const auto csv = dir_ / "d.csv";
  ASSERT_EQ(run("generate --years 1 -o " + csv.string()).code, 0);
  const auto r = run("evaluate --data " + csv.string() + " --train-years 1 --val-years 0 --test-years 0 --lag-corr precip_r1");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto out = dir_ / "out" / "reports" / "lag_precip_r1.csv";
  EXPECT_EQ(line_count(out), 26u);
  EXPECT_EQ(slurp(out).substr(0, 6), "lag,r\n");
}

TEST_F(Cli, TrainEvaluateRoundTripAndDimensionMismatch) {
  const auto csv = dir_ / "d.csv";
  ASSERT_EQ(run("generate --years 3 -o " + csv.string()).code, 0);
  auto r = run("train --data " + csv.string() +
               " --train-years 1 --val-years 1 --test-years 1 --arch lstmwdph --long-len 240 --nchf 2 --hidden 4"
               " --trials 2 --batch 32 --max-epochs 2 --sample-stride 97 --eval-stride 211 --quiet");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto out = dir_ / "out";
  for (const char* f : {"checkpoints/lstmwdph_trial0.ckpt", "checkpoints/lstmwdph_trial1.ckpt",
                        "checkpoints/lstmwdph_best.ckpt", "logs/lstmwdph_loss.csv", "reports/lstmwdph_metrics.csv",
                        "reports/lstmwdph_metrics.json", "predictions/lstmwdph_median_test.csv"}) {
    EXPECT_TRUE(fs::exists(out / f)) << f;
  }
  EXPECT_EQ(line_count(out / "logs/lstmwdph_loss.csv"), 1u + 2u * 2u);

  const std::string ckpt = (out / "checkpoints/lstmwdph_best.ckpt").string();
  r = run("evaluate --data " + csv.string() + " --train-years 1 --val-years 1 --test-years 1 --checkpoint " + ckpt +
          " --eval-stride 211 --tag again");
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(out / "reports/again_metrics.csv"));

  // drop one input column
  std::ifstream in(csv);
  std::ofstream narrow(dir_ / "narrow.csv");
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find(',');
    const auto second = line.find(',', first + 1);
    narrow << line.substr(0, first) << line.substr(second) << "\n";
  }
  narrow.close();
  r = run("evaluate --data " + (dir_ / "narrow.csv").string() +
          " --train-years 1 --val-years 1 --test-years 1 --checkpoint " + ckpt);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("dimension mismatch"), std::string::npos) << r.output;
}

TEST_F(Cli, UnfittableLongWindowIsConfigError) {
  const auto csv = dir_ / "d.csv";
  ASSERT_EQ(run("generate --years 3 -o " + csv.string()).code, 0);
  const auto r = run("train --data " + csv.string() + " --train-years 1 --val-years 1 --test-years 1 --long-len 10");
  EXPECT_EQ(r.code, 2) << r.output;
  EXPECT_NE(r.output.find("does not fit"), std::string::npos) << r.output;
}
