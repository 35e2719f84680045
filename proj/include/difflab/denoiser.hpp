#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "difflab/autograd.hpp"

namespace difflab {

/// Token ids over [0, V) plus the absorbing MASK id V.
///
/// `exempt` marks conditioning positions (prompt tokens, padding) that the
/// forward process never masks and the loss never counts. It is either empty
/// (nothing exempt) or has one entry per id.
struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::vector<bool> exempt;

  std::size_t size() const noexcept { return ids.size(); }
  bool is_exempt(std::size_t i) const noexcept { return !exempt.empty() && exempt[i]; }
  std::size_t count_id(std::int32_t id) const noexcept;
  std::size_t maskable_count() const noexcept;
};

/// Anything that maps a partially masked sequence and a noise level to
/// per-position logits over the V data tokens.
template <typename Real>
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual std::size_t vocab() const = 0;
  virtual std::size_t context_len() const = 0;
  virtual Var<Real> forward_logits(const TokenSequence& tokens, double t) const = 0;

  std::int32_t mask_id() const { return static_cast<std::int32_t>(vocab()); }
};

}  // namespace difflab
