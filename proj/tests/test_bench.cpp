#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "difflab/bench.hpp"
#include "difflab/errors.hpp"
#include "difflab/rng.hpp"
#include "support/fakes.hpp"

using namespace difflab;

namespace fs = std::filesystem;

namespace {

// Runs the body but reports a fixed duration.
Timer fixed_timer(double seconds, int* calls = nullptr) {
  return [seconds, calls](const std::function<void()>& body) {
    body();
    if (calls) ++*calls;
    return seconds;
  };
}

std::vector<std::pair<double, double>> power_law(double exponent, double scale) {
  std::vector<std::pair<double, double>> pts;
  for (double L : {512.0, 1024.0, 2048.0, 4096.0, 8192.0}) pts.emplace_back(L, scale * std::pow(L, exponent));
  return pts;
}

ModelConfig tiny_bench_model() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_state = 2;
  c.vocab = 7;
  c.context_len = 8;
  return c;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

}  // namespace

TEST(MeasureDecode, ThroughputFromFakeTimer) {
  difflab::testing::ConstantDenoiser<float> model(5, 1024);
  int calls = 0;
  const LatencyStats s = measure_decode(model, 1024, 2, 5, 20, 1, 0, fixed_timer(2.0, &calls));
  EXPECT_EQ(calls, 20);
  ASSERT_EQ(s.durations.size(), 20u);
  EXPECT_DOUBLE_EQ(s.mean_s, 2.0);
  EXPECT_DOUBLE_EQ(s.median_s, 2.0);
  EXPECT_DOUBLE_EQ(s.std_s, 0.0);
  EXPECT_DOUBLE_EQ(s.tokens_per_s, 512.0);
}

TEST(MeasureDecode, StatisticsOverVaryingDurations) {
  difflab::testing::ConstantDenoiser<float> model(3, 16);
  int k = 0;
  const Timer timer = [&k](const std::function<void()>& body) {
    body();
    return static_cast<double>(++k);  // 1, 2, 3, 4
  };
  const LatencyStats s = measure_decode(model, 16, 1, 1, 4, 2, 0, timer);
  EXPECT_DOUBLE_EQ(s.mean_s, 2.5);
  EXPECT_DOUBLE_EQ(s.median_s, 2.5);
  EXPECT_NEAR(s.std_s, std::sqrt(5.0 / 3.0), 1e-12);
  EXPECT_DOUBLE_EQ(s.tokens_per_s, 32.0 / 2.5);
}

TEST(MeasureDecode, RejectsLengthBeyondContext) {
  difflab::testing::ConstantDenoiser<float> model(3, 16);
  EXPECT_THROW(measure_decode(model, 17, 1, 1, 2, 1, 0, fixed_timer(1.0)), ConfigError);
}

TEST(ExponentFit, RecoversExactPowerLaws) {
  for (double e : {1.0, 2.0}) {
    const auto pts = power_law(e, 3e-6);
    const ExponentFit fit = fit_scaling_exponent(pts);
    EXPECT_NEAR(fit.exponent, e, 1e-6);
    EXPECT_NEAR(fit.intercept, std::log(3e-6), 1e-6);
    EXPECT_LT(fit.residual, 1e-9);
  }
}

TEST(ExponentFit, NoisyPowerLawWithinTolerance) {
  RngStream rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    auto pts = power_law(1.5, 1e-5);
    for (auto& [L, y] : pts) y *= std::exp(0.05 * rng.normal());
    EXPECT_NEAR(fit_scaling_exponent(pts).exponent, 1.5, 0.1);
  }
}

TEST(ExponentFit, RejectsDegenerateInputs) {
  auto pts = power_law(1.0, 1.0);
  pts[2].second = 0.0;
  EXPECT_THROW(fit_scaling_exponent(pts), DomainError);
  pts = power_law(1.0, 1.0);
  pts[0].first = -1.0;
  EXPECT_THROW(fit_scaling_exponent(pts), DomainError);
  pts = power_law(1.0, 1.0);
  pts.resize(3);
  EXPECT_THROW(fit_scaling_exponent(pts), DomainError);
  const std::vector<std::pair<double, double>> same(4, {8.0, 1.0});
  EXPECT_THROW(fit_scaling_exponent(same), DomainError);
}

TEST(FitWindow, TopFractionWithFloorOfFour) {
  const std::vector<std::size_t> grid{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  EXPECT_EQ(fit_window(grid, 0.5), (std::vector<std::size_t>{6, 7, 8, 9, 10}));
  EXPECT_EQ(fit_window(grid, 0.1), (std::vector<std::size_t>{7, 8, 9, 10}));
  EXPECT_EQ(fit_window(grid, 1.0), grid);
  const std::vector<std::size_t> small{1, 2, 3};
  EXPECT_EQ(fit_window(small, 0.5), small);
}

TEST(BenchConfig, Validation) {
  BenchConfig c;
  c.backbones = matched_backbones(tiny_bench_model(), {"ssm_only"});
  EXPECT_NO_THROW(c.validate());
  auto broken = c;
  broken.lengths = {4, 4};
  EXPECT_THROW(broken.validate(), ConfigError);
  broken = c;
  broken.runs = 1;
  EXPECT_THROW(broken.validate(), ConfigError);
  broken = c;
  broken.backbones.clear();
  EXPECT_THROW(broken.validate(), ConfigError);
  EXPECT_THROW(matched_backbones(tiny_bench_model(), {"transformer"}), ConfigError);
}

TEST(RunSweep, CellsFitsAndArtifacts) {
  BenchConfig c;
  c.lengths = {4, 8, 16, 32};
  c.steps = 2;
  c.warmup = 1;
  c.runs = 3;
  c.backbones = matched_backbones(tiny_bench_model(), {"ssm_only", "attention_only"});
  // Latency proportional to L^2 regardless of backbone: pull L from the call count.
  int calls = 0;
  const Timer timer = [&calls](const std::function<void()>& body) {
    body();
    const double L = 4.0 * std::pow(2.0, (calls++ / 3) % 4);
    return 1e-6 * L * L;
  };
  const ScalingReport r = run_sweep(c, timer);
  ASSERT_EQ(r.cells.size(), 8u);
  EXPECT_EQ(r.cells.front().backbone, "attention_only");
  EXPECT_EQ(r.cells_for("ssm_only").size(), 4u);
  ASSERT_EQ(r.fits.size(), 2u);
  EXPECT_NEAR(r.fits.at("ssm_only").exponent, 2.0, 1e-9);
  EXPECT_NEAR(r.fits.at("attention_only").exponent, 2.0, 1e-9);

  const fs::path dir = fs::temp_directory_path() / "difflab_bench_test";
  fs::remove_all(dir);
  const fs::path csv = write_artifacts(r, dir);
  const fs::path second = write_artifacts(r, dir);
  EXPECT_NE(csv, second);
  EXPECT_TRUE(fs::exists(fs::path(csv).replace_extension(".svg")));

  std::size_t rows = 0;
  bool header = false;
  for (const auto& line : read_lines(csv)) {
    if (line.starts_with("#")) continue;
    if (line.starts_with("backbone,")) {
      EXPECT_EQ(line, "backbone,L,S,batch,runs,mean_s,median_s,std_s,tokens_per_s");
      header = true;
      continue;
    }
    ++rows;
    std::stringstream ss(line);
    std::vector<std::string> fields;
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    ASSERT_EQ(fields.size(), 9u);
    EXPECT_EQ(fields[2], "2");
    EXPECT_EQ(fields[4], "3");
  }
  EXPECT_TRUE(header);
  EXPECT_EQ(rows, 8u);

  std::ifstream svg(fs::path(csv).replace_extension(".svg"));
  const std::string text((std::istreambuf_iterator<char>(svg)), {});
  EXPECT_TRUE(text.starts_with("<svg"));
  EXPECT_NE(text.find("ssm_only"), std::string::npos);
  EXPECT_NE(text.find("attention_only"), std::string::npos);
  EXPECT_NE(text.find("<polyline"), std::string::npos);
  fs::remove_all(dir);
}
