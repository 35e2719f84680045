#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "difflab/diffusion.hpp"
#include "difflab/model.hpp"

namespace difflab {

struct OptimConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  std::size_t warmup_steps = 100;
  // Length of the cosine decay; the lr reaches min_lr_ratio * lr there.
  std::size_t total_steps = 2000;
  double min_lr_ratio = 0.1;

  void validate() const;
};

/// Learning rate for the update with 0-based index `step`: linear warmup to
/// lr over warmup_steps, then cosine decay to min_lr_ratio * lr at
/// total_steps, constant afterwards.
double learning_rate(const OptimConfig& config, std::size_t step);

template <typename Real>
struct OptimState {
  OptimConfig config;
  std::vector<Tensor<Real>> m;
  std::vector<Tensor<Real>> v;
  std::size_t step = 0;  // updates applied so far

  // Zero moments shaped like `params`.
  static OptimState zeros(const OptimConfig& config, std::span<const NamedParameter<Real>> params);
};

/// Decoupled weight decay followed by a bias-corrected Adam step at rate
/// `lr`, computed in double and stored back at the parameter precision. An
/// absent gradient counts as zero. Throws NumericError naming the first
/// parameter with a non-finite gradient.
template <typename Real>
void adamw_update(std::span<const NamedParameter<Real>> params, OptimState<Real>& state, double lr);

/// Scales every gradient by clip_norm / norm when the global norm exceeds
/// clip_norm. Returns the norm before clipping.
template <typename Real>
double clip_grad_norm(std::span<const NamedParameter<Real>> params, double clip_norm);

struct TrainRecord {
  std::size_t step = 0;  // 1-based index of the update this record follows
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double tokens_per_s = 0.0;
  std::optional<double> ppl_bound;
};

/// mdm_loss with backprop, clipping and one AdamW update. Randomness comes
/// from RngStream(seed).fork(state.step), so a step is a pure function of
/// (parameters, optimizer state, batch, seed).
TrainRecord train_step(DenoiserModel<float>& model, std::span<const TokenSequence> batch,
                       OptimState<float>& state, const NoiseSchedule& schedule, std::uint64_t seed);

struct FitConfig {
  std::size_t steps = 2000;  // total update count, including any resumed prefix
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  std::size_t log_interval = 10;
  std::size_t eval_interval = 100;  // 0 disables periodic evaluation
  std::size_t eval_mc = 4;
  std::size_t eval_sequences = 16;  // cap on held-out sequences per evaluation
  std::size_t ckpt_interval = 0;    // 0 disables periodic checkpoints
  std::filesystem::path ckpt_path;
  std::filesystem::path log_path;   // tab-separated records; empty disables
  double target_ppl = 0.0;          // stop once an evaluation falls below; 0 disables
  NoiseSchedule schedule;

  void validate() const;
};

struct FitResult {
  std::vector<TrainRecord> records;
  std::size_t steps_run = 0;
  bool reached_target = false;
};

/// Runs train_step from state.step up to config.steps. The batch of step k is
/// drawn with replacement from a stream keyed by (seed, k), so a resumed run
/// replays the same batches. Evaluation uses `valid` when it is nonempty and
/// `train` otherwise, always with the same Monte-Carlo draws. When ckpt_path
/// is set a checkpoint is written every ckpt_interval steps and at the end.
FitResult fit(DenoiserModel<float>& model, OptimState<float>& state,
              std::span<const TokenSequence> train, std::span<const TokenSequence> valid,
              const FitConfig& config,
              const std::function<void(const TrainRecord&)>& on_record = {});

// Formats a record as one tab-separated line (no newline).
std::string format_record(const TrainRecord& record);

}  // namespace difflab
