#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "difflab/bench.hpp"
#include "difflab/model.hpp"
#include "difflab/sampler.hpp"
#include "difflab/trainer.hpp"

namespace difflab {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

// Every recognized key, grouped by section, with its default.
const std::vector<ConfigKey>& config_keys();

/// Flat key/value configuration. Files hold one `key = value` per line;
/// blank lines and lines starting with '#' are ignored. Every key can also
/// be given on the command line as `--key value`.
class RunConfig {
 public:
  RunConfig();

  // Throws ConfigError naming the key when it is not recognized.
  void set(const std::string& key, const std::string& value);
  void merge_text(std::string_view text, const std::string& origin);
  void merge_file(const std::filesystem::path& path);

  const std::string& get(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  // Comma-separated values; empty items are dropped.
  std::vector<std::string> get_list(const std::string& key) const;
  std::vector<std::size_t> get_sizes(const std::string& key) const;

  // All keys in registry order as `key = value` lines.
  std::string dump() const;

  ModelConfig model_config() const;
  OptimConfig optim_config() const;
  FitConfig fit_config() const;
  SamplerConfig sampler_config() const;
  BenchConfig bench_config() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace difflab
