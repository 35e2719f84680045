#include "difflab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

#include "difflab/errors.hpp"
#include "difflab/rng.hpp"

namespace difflab {

namespace fs = std::filesystem;

std::vector<std::int32_t> encode(std::string_view bytes) {
  std::vector<std::int32_t> ids;
  ids.reserve(bytes.size());
  for (char c : bytes) ids.push_back(static_cast<std::int32_t>(static_cast<unsigned char>(c)));
  return ids;
}

std::string decode(std::span<const std::int32_t> ids, bool strip) {
  std::string out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::int32_t id = ids[i];
    if (id >= 0 && id < 256) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    } else if ((id == ByteVocab::kPad || id == ByteVocab::kMask) && strip) {
      continue;
    } else {
      throw DomainError("decode: id " + std::to_string(id) + " at position " + std::to_string(i) +
                        " is not a byte");
    }
  }
  return out;
}

namespace {

void append_file(const fs::path& path, std::string& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read corpus file '" + path.string() + "'");
  out.append(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

std::string read_corpus(const std::vector<fs::path>& paths) {
  std::string out;
  for (const auto& path : paths) {
    std::error_code ec;
    if (fs::is_directory(path, ec)) {
      std::vector<fs::path> files;
      for (const auto& entry : fs::recursive_directory_iterator(path)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) append_file(f, out);
    } else if (fs::is_regular_file(path, ec)) {
      append_file(path, out);
    } else {
      throw DataError("corpus path '" + path.string() + "' does not exist");
    }
  }
  return out;
}

std::uint64_t content_digest(std::span<const std::int32_t> ids) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::int32_t id : ids) {
    auto v = static_cast<std::uint32_t>(id);
    for (int b = 0; b < 4; ++b) {
      h ^= (v >> (8 * b)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

PackedSplit pack(std::span<const std::int32_t> ids, std::size_t context_len, double valid_fraction,
                 std::uint64_t seed) {
  if (ids.empty()) throw DomainError("pack: empty corpus");
  if (context_len < 2) throw ConfigError("data.context_len must be at least 2");
  if (!(valid_fraction >= 0.0 && valid_fraction <= 1.0)) {
    throw ConfigError("data.split must lie in [0, 1]");
  }
  PackedSplit out;
  const std::uint64_t digest = content_digest(ids);
  out.train.split = Split::kTrain;
  out.valid.split = Split::kValid;
  out.train.digest = out.valid.digest = digest;

  const std::size_t windows = (ids.size() + context_len - 1) / context_len;
  for (std::size_t w = 0; w < windows; ++w) {
    const std::size_t begin = w * context_len;
    const std::size_t end = std::min(begin + context_len, ids.size());
    TokenSequence seq;
    seq.ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(begin),
                   ids.begin() + static_cast<std::ptrdiff_t>(end));
    if (end - begin < context_len) {
      seq.exempt.assign(context_len, false);
      std::fill(seq.exempt.begin() + static_cast<std::ptrdiff_t>(end - begin), seq.exempt.end(), true);
      seq.ids.resize(context_len, ByteVocab::kPad);
    }
    const bool valid = counter_uniform(seed, digest, w, 0) < valid_fraction;
    (valid ? out.valid : out.train).sequences.push_back(std::move(seq));
  }
  return out;
}

}  // namespace difflab
