#pragma once

#include <cstdint>
#include <random>

namespace difflab {

// splitmix64 finalizer; the building block for every derived seed.
std::uint64_t mix64(std::uint64_t x) noexcept;

// Stateless uniform in [0, 1) keyed by (seed, a, b, c). Used where a draw must
// not depend on iteration order, e.g. per-position sampler randomness.
double counter_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                       std::uint64_t c) noexcept;

/// Seeded sequential stream. Sub-streams forked by index are independent of
/// how many draws the parent has made.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed), engine_(mix64(seed)) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  // 53-bit uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();

  RngStream fork(std::uint64_t index) const {
    return RngStream(mix64(seed_ ^ mix64(index + 0x632be59bd9b4e019ULL)));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace difflab
