#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "json.hpp"

#include "difflab/model.hpp"
#include "difflab/trainer.hpp"

namespace difflab {

// Layout: 8-byte magic, u64 little-endian header length, JSON header, then
// the float32 little-endian payload. Each tensor starts at a 64-byte aligned
// payload offset recorded in the header directory.
inline constexpr char kCheckpointMagic[9] = "DIFSSM01";
inline constexpr int kCheckpointVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 64;

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Writes to a temporary sibling and renames it over `path`.
void save_checkpoint(const std::filesystem::path& path, const DenoiserModel<float>& model,
                     const OptimState<float>* optim, std::uint64_t seed, std::size_t step);

struct LoadedCheckpoint {
  DenoiserModel<float> model;
  std::optional<OptimState<float>> optim;
  std::uint64_t seed = 0;
  std::size_t step = 0;
};

/// Throws NotACheckpointError for a wrong magic, CheckpointVersionError for
/// another format version and IntegrityError naming the first tensor whose
/// bytes are missing or out of place.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// Parsed JSON header only.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace difflab
