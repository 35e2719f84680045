#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "difflab/denoiser.hpp"
#include "difflab/model.hpp"

namespace difflab {

// Returns the seconds spent running the callable.
using Timer = std::function<double(const std::function<void()>&)>;

// steady_clock around the callable.
double wall_clock_timer(const std::function<void()>& body);

struct Backbone {
  std::string name;
  ModelConfig config;
};

struct BenchConfig {
  std::vector<std::size_t> lengths{256, 512, 1024, 2048};
  std::size_t steps = 128;
  std::size_t warmup = 5;
  std::size_t runs = 20;
  std::size_t batch = 1;
  std::uint64_t seed = 0;
  std::vector<Backbone> backbones;
  // Share of the length grid, counted from the top, used for the fit.
  double fit_fraction = 0.5;

  void validate() const;
};

/// Backbones named after their pattern kind, all with `base`'s dimensions.
std::vector<Backbone> matched_backbones(const ModelConfig& base,
                                        const std::vector<std::string>& names);

struct LatencyStats {
  std::vector<double> durations;  // one per timed run
  double mean_s = 0.0;
  double median_s = 0.0;
  double std_s = 0.0;  // sample standard deviation
  double tokens_per_s = 0.0;
};

/// `warmup` untimed then `runs` timed decodes of `batch` sequences of length
/// L with S reverse steps each. Throughput is batch * L / mean latency.
LatencyStats measure_decode(const Denoiser<float>& model, std::size_t length, std::size_t steps,
                            std::size_t warmup, std::size_t runs, std::size_t batch,
                            std::uint64_t seed, const Timer& timer = wall_clock_timer);

struct ExponentFit {
  double exponent = 0.0;
  double intercept = 0.0;
  double residual = 0.0;  // max absolute log-space deviation from the line
};

/// Least-squares slope of log(latency) against log(L). Needs at least four
/// points; nonpositive values throw DomainError.
ExponentFit fit_scaling_exponent(std::span<const std::pair<double, double>> points);

struct BenchCell {
  std::string backbone;
  std::size_t length = 0;
  LatencyStats stats;
};

struct ScalingReport {
  std::vector<BenchCell> cells;  // sorted by (backbone, length)
  std::vector<std::string> skipped;  // "backbone,L: reason"
  std::map<std::string, ExponentFit> fits;
  std::size_t steps = 0;
  std::size_t batch = 0;
  std::size_t runs = 0;

  std::vector<const BenchCell*> cells_for(const std::string& backbone) const;
};

/// Lengths used for the exponent fit: the top fit_fraction of the grid, but
/// never fewer than four points.
std::vector<std::size_t> fit_window(const std::vector<std::size_t>& lengths, double fraction);

/// Measures every (backbone, L) cell with freshly initialized models. A cell
/// that runs out of memory is recorded in `skipped` instead of aborting.
ScalingReport run_sweep(const BenchConfig& config, const Timer& timer = wall_clock_timer);

void write_csv(const ScalingReport& report, const std::filesystem::path& path);
void write_svg(const ScalingReport& report, const std::filesystem::path& path);

/// Writes bench-<UTC timestamp>.csv and .svg under `dir` (created if needed)
/// and returns the CSV path. An existing name gets a numeric suffix.
std::filesystem::path write_artifacts(const ScalingReport& report, const std::filesystem::path& dir);

}  // namespace difflab
