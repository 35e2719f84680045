#include "difflab/sampler.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "difflab/rng.hpp"

namespace difflab {

void SamplerConfig::validate() const {
  if (steps == 0) throw ConfigError("sample.steps must be at least 1");
  if (length == 0) throw ConfigError("sample.length must be at least 1");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ConfigError("sample.temperature must be positive");
  }
  for (const auto& [pos, tok] : prompt) {
    if (pos >= length) {
      throw ConfigError("prompt position " + std::to_string(pos) + " outside generation length " +
                        std::to_string(length));
    }
  }
}

namespace {

// Inverse-CDF draw from softmax(row / temperature).
template <typename Real>
std::int32_t draw_token(const Real* row, std::size_t v, double temperature, double u) {
  double peak = -INFINITY;
  for (std::size_t j = 0; j < v; ++j) peak = std::max(peak, static_cast<double>(row[j]) / temperature);
  std::vector<double> weights(v);
  double total = 0.0;
  for (std::size_t j = 0; j < v; ++j) {
    weights[j] = std::exp(static_cast<double>(row[j]) / temperature - peak);
    total += weights[j];
  }
  const double target = u * total;
  double cumulative = 0.0;
  for (std::size_t j = 0; j < v; ++j) {
    cumulative += weights[j];
    if (target < cumulative) return static_cast<std::int32_t>(j);
  }
  // u * total can round up to the full sum; fall back to the last supported id.
  for (std::size_t j = v; j-- > 0;) {
    if (weights[j] > 0.0) return static_cast<std::int32_t>(j);
  }
  return 0;
}

}  // namespace

template <typename Real>
TokenSequence reverse_step(const TokenSequence& x_t, double t, double s,
                           const Tensor<Real>& logits, double temperature, StepKey key) {
  if (!(t > 0.0 && t <= 1.0)) throw DomainError("reverse_step: t = " + std::to_string(t) + " must lie in (0, 1]");
  if (!(s >= 0.0 && s < t)) {
    throw DomainError("reverse_step: s = " + std::to_string(s) + " must lie in [0, t = " +
                      std::to_string(t) + ")");
  }
  if (!(temperature > 0.0)) throw DomainError("reverse_step: temperature must be positive");
  if (logits.rank() != 2 || logits.rows() != x_t.size()) {
    throw DimensionError("reverse_step: logits " + shape_to_string(logits.shape()) +
                         " do not match sequence length " + std::to_string(x_t.size()));
  }
  const std::size_t v = logits.cols();
  const auto mask_id = static_cast<std::int32_t>(v);
  const double keep_masked = s / t;

  TokenSequence x_s = x_t;
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    if (x_t.ids[i] != mask_id || x_t.is_exempt(i)) continue;
    if (counter_uniform(key.seed, key.step, i, 0) < keep_masked) continue;
    x_s.ids[i] = draw_token(logits.data() + i * v, v, temperature,
                            counter_uniform(key.seed, key.step, i, 1));
  }
  return x_s;
}

template <typename Real>
TokenSequence generate(const Denoiser<Real>& model, const SamplerConfig& config,
                       const NoiseSchedule& schedule) {
  config.validate();
  schedule.validate();
  if (schedule.steps != config.steps) {
    throw ConfigError("schedule has " + std::to_string(schedule.steps) + " steps, sampler expects " +
                      std::to_string(config.steps));
  }
  if (config.length > model.context_len()) {
    throw ConfigError("generation length " + std::to_string(config.length) +
                      " exceeds model context " + std::to_string(model.context_len()));
  }
  const std::int32_t mask_id = model.mask_id();
  TokenSequence x{std::vector<std::int32_t>(config.length, mask_id),
                  std::vector<bool>(config.length, false)};
  for (const auto& [pos, tok] : config.prompt) {
    if (tok < 0 || tok >= mask_id) {
      throw ConfigError("prompt token " + std::to_string(tok) + " outside model vocabulary [0, " +
                        std::to_string(mask_id) + ")");
    }
    x.ids[pos] = tok;
    x.exempt[pos] = true;
  }

  NoGradGuard no_grad;
  for (std::size_t k = config.steps; k >= 1; --k) {
    const double t = schedule.step_time(k);
    const double s = schedule.step_time(k - 1);
    Var<Real> logits = model.forward_logits(x, t);
    if (logits.value().rank() != 2 || logits.value().cols() != model.vocab()) {
      throw ConfigError("model produced logits " + shape_to_string(logits.shape()) +
                        " for vocabulary " + std::to_string(model.vocab()));
    }
    x = reverse_step(x, t, s, logits.value(), config.temperature, StepKey{config.seed, k});
  }
  return x;
}

template <typename Real>
TokenSequence generate(const Denoiser<Real>& model, const SamplerConfig& config) {
  NoiseSchedule schedule;
  schedule.steps = config.steps;
  return generate(model, config, schedule);
}

template <typename Real>
std::vector<TokenSequence> generate_batch(const Denoiser<Real>& model,
                                          const std::vector<SamplerConfig>& configs,
                                          std::size_t threads) {
  std::vector<TokenSequence> out(configs.size());
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(configs.size(), 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < configs.size(); ++i) out[i] = generate(model, configs[i]);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        out[i] = generate(model, configs[i]);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

#define DIFFLAB_INSTANTIATE_SAMPLER(Real)                                                          \
  template TokenSequence reverse_step<Real>(const TokenSequence&, double, double,                  \
                                            const Tensor<Real>&, double, StepKey);                  \
  template TokenSequence generate<Real>(const Denoiser<Real>&, const SamplerConfig&,               \
                                        const NoiseSchedule&);                                     \
  template TokenSequence generate<Real>(const Denoiser<Real>&, const SamplerConfig&);              \
  template std::vector<TokenSequence> generate_batch<Real>(                                        \
      const Denoiser<Real>&, const std::vector<SamplerConfig>&, std::size_t);

DIFFLAB_INSTANTIATE_SAMPLER(float)
DIFFLAB_INSTANTIATE_SAMPLER(double)

#undef DIFFLAB_INSTANTIATE_SAMPLER

}  // namespace difflab
