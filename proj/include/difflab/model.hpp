#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "difflab/denoiser.hpp"

namespace difflab {

enum class PatternKind { kAttentionOnly, kSsmOnly, kHybrid };
enum class MixerKind { kSsm, kAttention };
enum class Direction { kForward, kBackward };

std::string to_string(PatternKind kind);
std::string to_string(MixerKind kind);
// Accepts "attention_only", "ssm_only", "hybrid"; throws ConfigError otherwise.
PatternKind parse_pattern_kind(std::string_view name);

inline constexpr std::size_t kTimestepFeatures = 128;
inline constexpr double kNormEps = 1e-5;

struct ModelConfig {
  std::size_t n_layers = 6;
  std::size_t d_model = 128;
  std::size_t d_head = 32;
  std::size_t d_state = 16;
  // 0 selects the backbone default: 4 for attention_only, 2 otherwise.
  std::size_t mlp_ratio = 0;
  bool use_mlp = true;
  std::size_t vocab = 257;
  std::size_t context_len = 256;
  PatternKind pattern_kind = PatternKind::kSsmOnly;
  std::size_t attention_period = 5;  // K: one attention layer after every K SSM layers
  std::size_t d_cond = 0;            // 0 selects d_model

  void validate() const;
  std::size_t effective_mlp_ratio() const noexcept;
  std::size_t effective_d_cond() const noexcept { return d_cond == 0 ? d_model : d_cond; }
  std::size_t n_heads() const noexcept { return d_model / d_head; }
};

struct LayerPattern {
  std::vector<MixerKind> kinds;

  std::size_t count(MixerKind kind) const noexcept;
  std::vector<std::size_t> indices_of(MixerKind kind) const;
};

/// attention_only: all attention; ssm_only: all SSM; hybrid: attention at every
/// 0-based index i with (i + 1) % (K + 1) == 0.
LayerPattern build_layer_pattern(const ModelConfig& config);

template <typename Real>
struct AffineParams {
  Var<Real> weight;  // [in, out]
  Var<Real> bias;    // [out]
};

template <typename Real>
struct TimestepParams {
  AffineParams<Real> proj1;  // [kTimestepFeatures, d_cond]
  AffineParams<Real> proj2;  // [d_cond, d_cond]
};

template <typename Real>
struct SsmDirectionParams {
  AffineParams<Real> in_proj;   // [d, 2d]: mixer input and gate branch
  AffineParams<Real> dt_proj;   // [d, d]: step size before softplus
  AffineParams<Real> bc_proj;   // [d, 2N]: input-dependent B and C
  Var<Real> decay_logits;       // [d]: decay rate exp(a) per channel
  AffineParams<Real> out_proj;  // [d, d]
};

template <typename Real>
struct SsmMixerParams {
  SsmDirectionParams<Real> forward;
  SsmDirectionParams<Real> backward;
};

template <typename Real>
struct AttentionParams {
  AffineParams<Real> qkv;  // [d, 3d]
  AffineParams<Real> out;  // [d, d]
  std::size_t n_heads = 1;
  bool rotary = true;  // test hook: off makes the mixer position-free
};

template <typename Real>
struct MlpParams {
  AffineParams<Real> fc1;  // [d, ratio * d]
  AffineParams<Real> fc2;  // [ratio * d, d]
};

template <typename Real>
struct BlockParams {
  MixerKind kind = MixerKind::kSsm;
  AffineParams<Real> mixer_cond;  // W_cond: [d_cond, 2d] -> (gamma_hat, beta)
  SsmMixerParams<Real> ssm;       // set when kind == kSsm
  AttentionParams<Real> attention;  // set when kind == kAttention
  std::optional<AffineParams<Real>> mlp_cond;
  std::optional<MlpParams<Real>> mlp;
};

/// Sinusoidal features of t (128 wide) through affine -> silu -> affine.
/// Returns [1, d_cond]. Throws DomainError for t outside [0, 1].
template <typename Real>
Var<Real> embed_timestep(double t, const TimestepParams<Real>& params);

template <typename Real>
Tensor<Real> timestep_features(double t);

/// layernorm(x) * (1 + gamma_hat) + beta with (gamma_hat, beta) = W_cond tau.
template <typename Real>
Var<Real> adaln(const Var<Real>& x, const Var<Real>& tau, const AffineParams<Real>& cond,
                double eps = kNormEps);

/// One selective-scan direction. The backward direction reverses the rows,
/// runs the same recurrence and reverses the result back.
template <typename Real>
Var<Real> ssm_mix_directional(const Var<Real>& x, const SsmDirectionParams<Real>& params,
                              Direction direction);

/// Sum of an independent forward and backward directional pass.
template <typename Real>
Var<Real> bidirectional_ssm_mix(const Var<Real>& x, const SsmMixerParams<Real>& params);

/// Bidirectional multi-head attention with rotary positions on Q and K.
template <typename Real>
Var<Real> attention_mix(const Var<Real>& x, const AttentionParams<Real>& params);

/// y = Mixer(AdaLN(x)) + x, then optionally y = MLP(AdaLN(y)) + y.
template <typename Real>
Var<Real> diffusion_block(const Var<Real>& x, const Var<Real>& tau, const BlockParams<Real>& block);

enum class InitScheme {
  kStandard,  // truncated normal 0.02, zero W_cond and residual output projections
  kRandom,    // weights N(0, gain^2 / fan_in), biases N(0, gain^2); for oracle and gradient tests
};

template <typename Real>
struct NamedParameter {
  std::string name;
  Var<Real> var;
};

template <typename Real>
using StateDict = std::vector<std::pair<std::string, Tensor<Real>>>;

/// Embedding over V+1 rows (MASK has its own row), N conditioned blocks laid
/// out by the layer pattern, final layernorm and an untied output head.
template <typename Real>
class DenoiserModel final : public Denoiser<Real> {
 public:
  DenoiserModel(ModelConfig config, std::uint64_t seed,
                InitScheme scheme = InitScheme::kStandard, double random_gain = 1.0);

  DenoiserModel(const DenoiserModel&) = delete;
  DenoiserModel& operator=(const DenoiserModel&) = delete;
  DenoiserModel(DenoiserModel&&) noexcept = default;
  DenoiserModel& operator=(DenoiserModel&&) noexcept = default;

  const ModelConfig& config() const noexcept { return config_; }
  const LayerPattern& pattern() const noexcept { return pattern_; }
  std::size_t vocab() const override { return config_.vocab; }
  std::size_t context_len() const override { return config_.context_len; }

  Var<Real> forward_logits(const TokenSequence& tokens, double t) const override;

  const std::vector<NamedParameter<Real>>& parameters() const noexcept { return params_; }
  std::vector<Var<Real>> parameter_vars() const;
  std::size_t parameter_count() const noexcept;
  void zero_grad();

  StateDict<Real> state() const;
  // Copies values by name; every parameter must be present with its shape.
  template <typename Other>
  void load_state(const StateDict<Other>& state);

  template <typename Other>
  DenoiserModel<Other> converted() const;

  BlockParams<Real>& block(std::size_t i) { return blocks_.at(i); }
  const BlockParams<Real>& block(std::size_t i) const { return blocks_.at(i); }
  TimestepParams<Real>& timestep() noexcept { return timestep_; }
  Var<Real>& embedding() noexcept { return embedding_; }
  AffineParams<Real>& head() noexcept { return head_; }

 private:
  Var<Real> add_param(const std::string& name, Tensor<Real> value);

  ModelConfig config_;
  LayerPattern pattern_;

  std::vector<NamedParameter<Real>> params_;
  Var<Real> embedding_;
  TimestepParams<Real> timestep_;
  std::vector<BlockParams<Real>> blocks_;
  AffineParams<Real> head_;
};

template <typename Real>
template <typename Other>
void DenoiserModel<Real>::load_state(const StateDict<Other>& state) {
  if (state.size() != params_.size()) {
    throw ConfigError("state has " + std::to_string(state.size()) + " tensors, model expects " +
                      std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, tensor] = state[i];
    auto& p = params_[i];
    if (name != p.name) throw ConfigError("state tensor '" + name + "' where '" + p.name + "' expected");
    if (tensor.shape() != p.var.shape()) {
      throw ConfigError("state tensor '" + name + "' has shape " + shape_to_string(tensor.shape()) +
                        ", model expects " + shape_to_string(p.var.shape()));
    }
    Tensor<Real>& dst = p.var.mutable_value();
    for (std::size_t k = 0; k < tensor.size(); ++k) dst[k] = static_cast<Real>(tensor[k]);
  }
}

template <typename Real>
template <typename Other>
DenoiserModel<Other> DenoiserModel<Real>::converted() const {
  DenoiserModel<Other> out(config_, 0);
  out.load_state(state());
  return out;
}

}  // namespace difflab
