#include "difflab/diffusion.hpp"

#include <cmath>
#include <string>

#include "difflab/ops.hpp"

namespace difflab {

std::size_t TokenSequence::count_id(std::int32_t id) const noexcept {
  std::size_t n = 0;
  for (auto v : ids) n += v == id ? 1 : 0;
  return n;
}

std::size_t TokenSequence::maskable_count() const noexcept {
  std::size_t n = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) n += is_exempt(i) ? 0 : 1;
  return n;
}

void NoiseSchedule::validate() const {
  if (steps == 0) throw ConfigError("noise schedule needs at least one step");
  if (!(t_min > 0.0 && t_min < 1.0)) throw ConfigError("noise schedule t_min must lie in (0, 1)");
}

double NoiseSchedule::step_time(std::size_t k) const {
  if (k > steps) {
    throw IndexError("step index " + std::to_string(k) + " outside [0, " +
                     std::to_string(steps) + "]");
  }
  if (k == steps) return 1.0;
  return static_cast<double>(k) / static_cast<double>(steps);
}

double NoiseSchedule::sigma(double t) const {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("sigma: t outside [0, 1]");
  return -std::log1p(-t);
}

double NoiseSchedule::masking_probability(double s) const { return -std::expm1(-s); }

double NoiseSchedule::sample_training_time(RngStream& rng) const {
  return rng.uniform(t_min, 1.0);
}

TokenSequence forward_mask(const TokenSequence& x0, double t, std::int32_t mask_id,
                           RngStream& rng) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw DomainError("forward_mask: t = " + std::to_string(t) + " outside [0, 1]");
  }
  TokenSequence out = x0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    if (x0.ids[i] == mask_id) throw DomainError("forward_mask: clean sequence contains MASK");
    if (x0.is_exempt(i)) continue;
    // Always consume one draw per position so masks at different t share
    // the same underlying uniforms.
    if (rng.uniform() < t) out.ids[i] = mask_id;
  }
  return out;
}

template <typename Real>
LossEstimate masked_loss_at(const Denoiser<Real>& model, const TokenSequence& x0, double t,
                            RngStream& rng, double backprop_scale) {
  if (!(t > 0.0 && t <= 1.0)) throw DomainError("masked loss needs t in (0, 1]");
  const std::int32_t mask = model.mask_id();
  TokenSequence noisy = forward_mask(x0, t, mask, rng);
  LossEstimate est;
  est.t_used = t;
  std::vector<double> weights(x0.size(), 0.0);
  const std::size_t maskable = x0.maskable_count();
  for (std::size_t i = 0; i < x0.size(); ++i) {
    if (noisy.ids[i] == mask) {
      ++est.masked_count;
      weights[i] = 1.0 / (t * static_cast<double>(maskable));
    }
  }
  if (est.masked_count == 0) return est;

  Var<Real> logits = model.forward_logits(noisy, t);
  Var<Real> ce = ops::cross_entropy(logits, std::span<const std::int32_t>(x0.ids));
  Var<Real> loss = ops::weighted_sum(ce, std::span<const double>(weights));
  est.value = static_cast<double>(loss.value()[0]);
  if (backprop_scale != 0.0 && loss.requires_grad()) {
    backward(ops::scale_shift(loss, backprop_scale));
  }
  return est;
}

template <typename Real>
MdmLoss mdm_loss(const Denoiser<Real>& model, std::span<const TokenSequence> batch,
                 const NoiseSchedule& schedule, const RngStream& rng, bool backprop) {
  if (batch.empty()) throw DomainError("mdm_loss: empty batch");
  MdmLoss out;
  const double scale = backprop ? 1.0 / static_cast<double>(batch.size()) : 0.0;
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    RngStream sub = rng.fork(b);
    const double t = schedule.sample_training_time(sub);
    LossEstimate est = masked_loss_at(model, batch[b], t, sub, scale);
    total += est.value;
    out.per_sequence.push_back(est);
  }
  out.mean = total / static_cast<double>(batch.size());
  return out;
}

template <typename Real>
double nelbo_ppl_bound(const Denoiser<Real>& model, std::span<const TokenSequence> corpus,
                       std::size_t n_mc, const NoiseSchedule& schedule, const RngStream& rng) {
  if (corpus.empty()) throw DomainError("nelbo_ppl_bound: empty corpus");
  if (n_mc == 0) throw DomainError("nelbo_ppl_bound: n_mc must be positive");
  NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t j = 0; j < corpus.size(); ++j) {
    for (std::size_t m = 0; m < n_mc; ++m) {
      RngStream sub = rng.fork(j * n_mc + m);
      const double t = schedule.sample_training_time(sub);
      total += masked_loss_at(model, corpus[j], t, sub).value;
    }
  }
  return std::exp(total / static_cast<double>(corpus.size() * n_mc));
}

template LossEstimate masked_loss_at<float>(const Denoiser<float>&, const TokenSequence&, double,
                                            RngStream&, double);
template LossEstimate masked_loss_at<double>(const Denoiser<double>&, const TokenSequence&,
                                             double, RngStream&, double);
template MdmLoss mdm_loss<float>(const Denoiser<float>&, std::span<const TokenSequence>,
                                 const NoiseSchedule&, const RngStream&, bool);
template MdmLoss mdm_loss<double>(const Denoiser<double>&, std::span<const TokenSequence>,
                                  const NoiseSchedule&, const RngStream&, bool);
template double nelbo_ppl_bound<float>(const Denoiser<float>&, std::span<const TokenSequence>,
                                       std::size_t, const NoiseSchedule&, const RngStream&);
template double nelbo_ppl_bound<double>(const Denoiser<double>&, std::span<const TokenSequence>,
                                        std::size_t, const NoiseSchedule&, const RngStream&);

}  // namespace difflab
