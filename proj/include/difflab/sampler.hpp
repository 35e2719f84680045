#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "difflab/denoiser.hpp"
#include "difflab/diffusion.hpp"

namespace difflab {

struct SamplerConfig {
  std::size_t steps = 128;
  std::size_t length = 256;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  // (position, token) pairs held fixed for the whole chain.
  std::vector<std::pair<std::size_t, std::int32_t>> prompt;

  void validate() const;
};

/// Identifies the counter block a reverse step draws from. Position i uses
/// counter_uniform(seed, step, i, 0) to decide whether to unmask and
/// counter_uniform(seed, step, i, 1) to pick the token.
struct StepKey {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

/// One transition x_t -> x_s of the reverse chain. Unmasked positions are
/// copied, masked ones stay masked with probability s/t and are otherwise
/// drawn from softmax(logits_i / temperature). Exempt positions never change.
/// The mask id is the logits width V.
template <typename Real>
TokenSequence reverse_step(const TokenSequence& x_t, double t, double s,
                           const Tensor<Real>& logits, double temperature, StepKey key);

/// All non-prompt positions start masked; for k = S..1 the model is evaluated
/// at t_k and reverse_step moves the chain to t_{k-1}. The result has no mask
/// ids. Throws ConfigError when the schedule, model and config disagree.
template <typename Real>
TokenSequence generate(const Denoiser<Real>& model, const SamplerConfig& config,
                       const NoiseSchedule& schedule);

// Schedule taken from config.steps.
template <typename Real>
TokenSequence generate(const Denoiser<Real>& model, const SamplerConfig& config);

/// Runs each config on a pool of `threads` workers against one shared model.
/// Results equal sequential generate calls in input order.
template <typename Real>
std::vector<TokenSequence> generate_batch(const Denoiser<Real>& model,
                                          const std::vector<SamplerConfig>& configs,
                                          std::size_t threads = 1);

}  // namespace difflab
