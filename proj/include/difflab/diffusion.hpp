#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "difflab/denoiser.hpp"
#include "difflab/rng.hpp"

namespace difflab {

/// Log-linear absorbing-state schedule: sigma(t) = -log(1 - t), so a token is
/// masked with probability exactly t and the sampling grid is uniform in t.
struct NoiseSchedule {
  enum class Kind { kLogLinear };

  Kind kind = Kind::kLogLinear;
  double t_min = 1e-3;
  std::size_t steps = 128;

  void validate() const;
  // t_k = k / S for k in [0, S].
  double step_time(std::size_t k) const;
  double sigma(double t) const;
  double masking_probability(double sigma) const;
  // Uniform on [t_min, 1].
  double sample_training_time(RngStream& rng) const;
};

/// Replaces each non-exempt token with `mask_id` independently with
/// probability t. Throws DomainError for t outside [0, 1] or when x0 already
/// contains the mask id.
TokenSequence forward_mask(const TokenSequence& x0, double t, std::int32_t mask_id,
                           RngStream& rng);

struct LossEstimate {
  double value = 0.0;  // (1/t) * sum of masked cross-entropies / maskable count
  std::size_t masked_count = 0;
  double t_used = 0.0;
};

/// Single-draw estimate of the reweighted masked loss at a fixed t.
/// When `backprop_scale` is nonzero and recording is on, value * scale is
/// backpropagated into the model parameters before returning.
template <typename Real>
LossEstimate masked_loss_at(const Denoiser<Real>& model, const TokenSequence& x0, double t,
                            RngStream& rng, double backprop_scale = 0.0);

struct MdmLoss {
  double mean = 0.0;
  std::vector<LossEstimate> per_sequence;
};

/// Batch Monte-Carlo diffusion loss. Sequence b draws its own t and mask from
/// rng.fork(b). With `backprop` the batch-mean gradient is accumulated into
/// the model parameters one sequence at a time.
template <typename Real>
MdmLoss mdm_loss(const Denoiser<Real>& model, std::span<const TokenSequence> batch,
                 const NoiseSchedule& schedule, const RngStream& rng, bool backprop);

/// exp of the mean per-token loss over every sequence and n_mc draws: an
/// estimate of an upper bound on perplexity.
template <typename Real>
double nelbo_ppl_bound(const Denoiser<Real>& model, std::span<const TokenSequence> corpus,
                       std::size_t n_mc, const NoiseSchedule& schedule, const RngStream& rng);

}  // namespace difflab
