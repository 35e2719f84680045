#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "difflab/denoiser.hpp"

namespace difflab {

/// 256 byte values, then PAD and MASK. Models see PAD as an ordinary data
/// token (never masked, never scored), so the model vocabulary is 257 and
/// MASK sits one past it.
struct ByteVocab {
  static constexpr std::int32_t kPad = 256;
  static constexpr std::int32_t kMask = 257;
  static constexpr std::size_t kSize = 258;
  static constexpr std::size_t kModelVocab = 257;
};

std::vector<std::int32_t> encode(std::string_view bytes);

/// Inverse of encode. PAD or MASK ids throw DomainError unless `strip` is
/// set, in which case they are dropped.
std::string decode(std::span<const std::int32_t> ids, bool strip = false);

/// Concatenated contents of the given files. Directories are walked
/// recursively with files taken in lexicographic path order. Throws DataError
/// for missing or unreadable paths.
std::string read_corpus(const std::vector<std::filesystem::path>& paths);

// 64-bit FNV-1a over the id stream.
std::uint64_t content_digest(std::span<const std::int32_t> ids) noexcept;

enum class Split { kTrain, kValid };

struct PackedCorpus {
  std::vector<TokenSequence> sequences;
  Split split = Split::kTrain;
  std::uint64_t digest = 0;
};

struct PackedSplit {
  PackedCorpus train;
  PackedCorpus valid;
};

/// Cuts ids into contiguous context_len windows, padding the last one with
/// exempt PAD ids. Window w goes to the validation split when
/// counter_uniform(seed, digest, w, 0) < valid_fraction. Throws DomainError
/// for an empty corpus and ConfigError for context_len < 2 or a fraction
/// outside [0, 1].
PackedSplit pack(std::span<const std::int32_t> ids, std::size_t context_len,
                 double valid_fraction, std::uint64_t seed);

}  // namespace difflab
