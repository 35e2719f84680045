#include "difflab/model.hpp"

#include <cmath>
#include <numbers>

#include "difflab/ops.hpp"
#include "difflab/rng.hpp"

namespace difflab {

std::string to_string(PatternKind kind) {
  switch (kind) {
    case PatternKind::kAttentionOnly: return "attention_only";
    case PatternKind::kSsmOnly: return "ssm_only";
    case PatternKind::kHybrid: return "hybrid";
  }
  return "unknown";
}

std::string to_string(MixerKind kind) { return kind == MixerKind::kSsm ? "ssm" : "attention"; }

PatternKind parse_pattern_kind(std::string_view name) {
  if (name == "attention_only") return PatternKind::kAttentionOnly;
  if (name == "ssm_only") return PatternKind::kSsmOnly;
  if (name == "hybrid") return PatternKind::kHybrid;
  throw ConfigError("unknown pattern kind '" + std::string(name) +
                    "' (expected attention_only, ssm_only or hybrid)");
}

void ModelConfig::validate() const {
  if (n_layers == 0) throw ConfigError("model.n_layers must be positive");
  if (d_model == 0 || d_state == 0 || vocab == 0 || context_len == 0) {
    throw ConfigError("model dimensions, vocab and context_len must be positive");
  }
  if (mlp_ratio != 0 && mlp_ratio != 2 && mlp_ratio != 4) {
    throw ConfigError("model.mlp_ratio must be 2 or 4 (or 0 for the backbone default)");
  }
  if (pattern_kind != PatternKind::kSsmOnly) {
    if (d_head == 0 || d_model % d_head != 0) {
      throw ConfigError("model.d_model (" + std::to_string(d_model) +
                        ") must be divisible by model.d_head (" + std::to_string(d_head) + ")");
    }
    if (d_head % 2 != 0) throw ConfigError("model.d_head must be even for rotary encoding");
  }
  if (pattern_kind == PatternKind::kHybrid) {
    if (attention_period == 0) throw ConfigError("model.K must be at least 1 for hybrid");
    if (n_layers < attention_period + 1) {
      throw ConfigError("hybrid with n_layers = " + std::to_string(n_layers) +
                        " has no attention layer for K = " + std::to_string(attention_period) +
                        " (needs n_layers >= K + 1)");
    }
  }
}

std::size_t ModelConfig::effective_mlp_ratio() const noexcept {
  if (mlp_ratio != 0) return mlp_ratio;
  return pattern_kind == PatternKind::kAttentionOnly ? 4 : 2;
}

std::size_t LayerPattern::count(MixerKind kind) const noexcept {
  std::size_t n = 0;
  for (auto k : kinds) n += k == kind ? 1 : 0;
  return n;
}

std::vector<std::size_t> LayerPattern::indices_of(MixerKind kind) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    if (kinds[i] == kind) out.push_back(i);
  }
  return out;
}

LayerPattern build_layer_pattern(const ModelConfig& config) {
  config.validate();
  LayerPattern pattern;
  pattern.kinds.reserve(config.n_layers);
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    switch (config.pattern_kind) {
      case PatternKind::kAttentionOnly:
        pattern.kinds.push_back(MixerKind::kAttention);
        break;
      case PatternKind::kSsmOnly:
        pattern.kinds.push_back(MixerKind::kSsm);
        break;
      case PatternKind::kHybrid:
        pattern.kinds.push_back((i + 1) % (config.attention_period + 1) == 0 ? MixerKind::kAttention
                                                                              : MixerKind::kSsm);
        break;
    }
  }
  return pattern;
}

template <typename Real>
Tensor<Real> timestep_features(double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw DomainError("timestep t = " + std::to_string(t) + " outside [0, 1]");
  }
  constexpr std::size_t half = kTimestepFeatures / 2;
  Tensor<Real> features(Shape{1, kTimestepFeatures});
  for (std::size_t j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / half);
    const double angle = 1000.0 * t * freq;
    features[j] = static_cast<Real>(std::sin(angle));
    features[half + j] = static_cast<Real>(std::cos(angle));
  }
  return features;
}

template <typename Real>
Var<Real> embed_timestep(double t, const TimestepParams<Real>& params) {
  Var<Real> features(timestep_features<Real>(t));
  Var<Real> hidden = ops::silu(ops::affine(features, params.proj1.weight, params.proj1.bias));
  return ops::affine(hidden, params.proj2.weight, params.proj2.bias);
}

template <typename Real>
Var<Real> adaln(const Var<Real>& x, const Var<Real>& tau, const AffineParams<Real>& cond,
                double eps) {
  const std::size_t d = x.value().cols();
  Var<Real> modulation = ops::affine(tau, cond.weight, cond.bias);
  if (modulation.value().size() != 2 * d) {
    throw DimensionError("adaln: conditioning produced " + shape_to_string(modulation.shape()) +
                         " for width " + std::to_string(d));
  }
  Var<Real> gamma_hat = ops::slice_cols(modulation, 0, d);
  Var<Real> beta = ops::slice_cols(modulation, d, 2 * d);
  Var<Real> normed = ops::layer_normalize(x, eps);
  return ops::add(ops::mul(normed, ops::scale_shift(gamma_hat, 1.0, 1.0)), beta);
}

namespace {

template <typename Real>
Var<Real> ssm_direction_core(const Var<Real>& x, const SsmDirectionParams<Real>& p) {
  const std::size_t d = x.value().cols();
  const std::size_t ns = p.bc_proj.weight.value().dim(1) / 2;
  Var<Real> projected = ops::affine(x, p.in_proj.weight, p.in_proj.bias);
  Var<Real> inner = ops::silu(ops::slice_cols(projected, 0, d));
  Var<Real> gate = ops::silu(ops::slice_cols(projected, d, 2 * d));
  Var<Real> step = ops::softplus(ops::affine(inner, p.dt_proj.weight, p.dt_proj.bias));
  Var<Real> bc = ops::affine(inner, p.bc_proj.weight, p.bc_proj.bias);
  Var<Real> b = ops::slice_cols(bc, 0, ns);
  Var<Real> c = ops::slice_cols(bc, ns, 2 * ns);
  Var<Real> rate = ops::exp(p.decay_logits);
  Var<Real> decay = ops::exp(ops::scale_shift(ops::mul(step, rate), -1.0));
  Var<Real> drive = ops::mul(step, inner);
  Var<Real> readout = ops::selective_state_scan(decay, drive, b, c);
  return ops::affine(ops::mul(readout, gate), p.out_proj.weight, p.out_proj.bias);
}

}  // namespace

template <typename Real>
Var<Real> ssm_mix_directional(const Var<Real>& x, const SsmDirectionParams<Real>& params,
                              Direction direction) {
  if (x.value().rank() != 2) {
    throw DimensionError("ssm mixer expects [L, d], got " + shape_to_string(x.shape()));
  }
  if (direction == Direction::kForward) return ssm_direction_core(x, params);
  return ops::reverse_rows(ssm_direction_core(ops::reverse_rows(x), params));
}

template <typename Real>
Var<Real> bidirectional_ssm_mix(const Var<Real>& x, const SsmMixerParams<Real>& params) {
  return ops::add(ssm_mix_directional(x, params.forward, Direction::kForward),
                  ssm_mix_directional(x, params.backward, Direction::kBackward));
}

template <typename Real>
Var<Real> attention_mix(const Var<Real>& x, const AttentionParams<Real>& params) {
  const std::size_t d = x.value().cols();
  Var<Real> qkv = ops::affine(x, params.qkv.weight, params.qkv.bias);
  Var<Real> q = ops::slice_cols(qkv, 0, d);
  Var<Real> k = ops::slice_cols(qkv, d, 2 * d);
  Var<Real> v = ops::slice_cols(qkv, 2 * d, 3 * d);
  if (params.rotary) {
    q = ops::rotary(q, params.n_heads);
    k = ops::rotary(k, params.n_heads);
  }
  Var<Real> mixed = ops::attention(q, k, v, params.n_heads);
  return ops::affine(mixed, params.out.weight, params.out.bias);
}

template <typename Real>
Var<Real> diffusion_block(const Var<Real>& x, const Var<Real>& tau, const BlockParams<Real>& block) {
  Var<Real> normed = adaln(x, tau, block.mixer_cond);
  Var<Real> mixed = block.kind == MixerKind::kSsm ? bidirectional_ssm_mix(normed, block.ssm)
                                                  : attention_mix(normed, block.attention);
  Var<Real> y = ops::add(mixed, x);
  if (!block.mlp) return y;
  Var<Real> inner = adaln(y, tau, *block.mlp_cond);
  Var<Real> hidden = ops::silu(ops::affine(inner, block.mlp->fc1.weight, block.mlp->fc1.bias));
  return ops::add(ops::affine(hidden, block.mlp->fc2.weight, block.mlp->fc2.bias), y);
}

namespace {

template <typename Real>
class Initializer {
 public:
  Initializer(std::uint64_t seed, InitScheme scheme, double random_std)
      : rng_(seed), scheme_(scheme), random_std_(random_std) {}

  Tensor<Real> weight(const Shape& shape, bool zero_at_init) {
    // Fan-in scaling keeps activations O(1), so no nonlinearity saturates.
    if (scheme_ == InitScheme::kRandom) {
      return normal(shape, random_std_ / std::sqrt(static_cast<double>(shape.front())), 0.0);
    }
    if (zero_at_init) return Tensor<Real>(shape);
    return normal(shape, 0.02, 2.0);
  }

  Tensor<Real> bias(const Shape& shape) {
    if (scheme_ == InitScheme::kRandom) return normal(shape, random_std_, 0.0);
    return Tensor<Real>(shape);
  }

  // Step sizes log-uniform in [1e-3, 1e-1], stored through inverse softplus.
  Tensor<Real> step_bias(std::size_t d) {
    if (scheme_ == InitScheme::kRandom) return normal(Shape{d}, 0.5, 0.0);
    Tensor<Real> out(Shape{d});
    for (std::size_t i = 0; i < d; ++i) {
      const double dt = std::exp(rng_.uniform(std::log(1e-3), std::log(1e-1)));
      out[i] = static_cast<Real>(dt + std::log(-std::expm1(-dt)));
    }
    return out;
  }

  // Decay rates exp(a) uniform in [1, 16].
  Tensor<Real> decay_logits(std::size_t d) {
    if (scheme_ == InitScheme::kRandom) return normal(Shape{d}, 0.5, 0.0);
    Tensor<Real> out(Shape{d});
    for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<Real>(std::log(rng_.uniform(1.0, 16.0)));
    return out;
  }

 private:
  // Normal draws, rejected outside +-truncation std when truncation > 0.
  Tensor<Real> normal(const Shape& shape, double std, double truncation) {
    Tensor<Real> out(shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
      double z = rng_.normal();
      while (truncation > 0.0 && std::abs(z) > truncation) z = rng_.normal();
      out[i] = static_cast<Real>(std * z);
    }
    return out;
  }

  RngStream rng_;
  InitScheme scheme_;
  double random_std_;
};

}  // namespace

template <typename Real>
Var<Real> DenoiserModel<Real>::add_param(const std::string& name, Tensor<Real> value) {
  Var<Real> var = Var<Real>::parameter(std::move(value));
  params_.push_back({name, var});
  return var;
}

template <typename Real>
DenoiserModel<Real>::DenoiserModel(ModelConfig config, std::uint64_t seed, InitScheme scheme,
                                   double random_std)
    : config_(std::move(config)), pattern_(build_layer_pattern(config_)) {
  Initializer<Real> init(seed, scheme, random_std);
  const std::size_t d = config_.d_model, dc = config_.effective_d_cond();
  const std::size_t ns = config_.d_state, hidden = config_.effective_mlp_ratio() * d;

  auto affine = [&](const std::string& name, std::size_t in, std::size_t out, bool zero_weight) {
    AffineParams<Real> p;
    p.weight = add_param(name + ".weight", init.weight(Shape{in, out}, zero_weight));
    p.bias = add_param(name + ".bias", init.bias(Shape{out}));
    return p;
  };

  embedding_ = add_param("embed.weight", init.weight(Shape{config_.vocab + 1, d}, false));
  timestep_.proj1 = affine("time.proj1", kTimestepFeatures, dc, false);
  timestep_.proj2 = affine("time.proj2", dc, dc, false);

  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    const std::string prefix = "blocks." + std::to_string(i);
    BlockParams<Real> block;
    block.kind = pattern_.kinds[i];
    block.mixer_cond = affine(prefix + ".mixer_cond", dc, 2 * d, true);
    if (block.kind == MixerKind::kSsm) {
      auto direction = [&](const std::string& dir) {
        const std::string base = prefix + ".ssm." + dir;
        SsmDirectionParams<Real> p;
        p.in_proj = affine(base + ".in_proj", d, 2 * d, false);
        p.dt_proj.weight = add_param(base + ".dt_proj.weight", init.weight(Shape{d, d}, false));
        p.dt_proj.bias = add_param(base + ".dt_proj.bias", init.step_bias(d));
        p.bc_proj = affine(base + ".bc_proj", d, 2 * ns, false);
        p.decay_logits = add_param(base + ".decay_logits", init.decay_logits(d));
        p.out_proj = affine(base + ".out_proj", d, d, true);
        return p;
      };
      block.ssm.forward = direction("fwd");
      block.ssm.backward = direction("bwd");
    } else {
      block.attention.qkv = affine(prefix + ".attn.qkv", d, 3 * d, false);
      block.attention.out = affine(prefix + ".attn.out", d, d, true);
      block.attention.n_heads = config_.n_heads();
    }
    if (config_.use_mlp) {
      block.mlp_cond = affine(prefix + ".mlp_cond", dc, 2 * d, true);
      MlpParams<Real> mlp;
      mlp.fc1 = affine(prefix + ".mlp.fc1", d, hidden, false);
      mlp.fc2 = affine(prefix + ".mlp.fc2", hidden, d, true);
      block.mlp = mlp;
    }
    blocks_.push_back(std::move(block));
  }
  head_ = affine("head", d, config_.vocab, false);
}

template <typename Real>
Var<Real> DenoiserModel<Real>::forward_logits(const TokenSequence& tokens, double t) const {
  if (tokens.size() == 0) throw DimensionError("forward_logits: empty sequence");
  if (tokens.size() > config_.context_len) {
    throw DimensionError("forward_logits: sequence length " + std::to_string(tokens.size()) +
                         " exceeds context length " + std::to_string(config_.context_len));
  }
  for (auto id : tokens.ids) {
    if (id < 0 || static_cast<std::size_t>(id) > config_.vocab) {
      throw IndexError("forward_logits: token id " + std::to_string(id) + " outside [0, " +
                       std::to_string(config_.vocab) + "]");
    }
  }
  Var<Real> tau = embed_timestep(t, timestep_);
  Var<Real> h = ops::embedding(embedding_, std::span<const std::int32_t>(tokens.ids));
  for (const auto& block : blocks_) h = diffusion_block(h, tau, block);
  h = ops::layer_normalize(h, kNormEps);
  return ops::affine(h, head_.weight, head_.bias);
}

template <typename Real>
std::vector<Var<Real>> DenoiserModel<Real>::parameter_vars() const {
  std::vector<Var<Real>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.var);
  return out;
}

template <typename Real>
std::size_t DenoiserModel<Real>::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.var.value().size();
  return n;
}

template <typename Real>
void DenoiserModel<Real>::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

template <typename Real>
StateDict<Real> DenoiserModel<Real>::state() const {
  StateDict<Real> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.emplace_back(p.name, p.var.value());
  return out;
}

#define DIFFLAB_INSTANTIATE_MODEL(Real)                                                        \
  template Tensor<Real> timestep_features<Real>(double);                                       \
  template Var<Real> embed_timestep<Real>(double, const TimestepParams<Real>&);                \
  template Var<Real> adaln<Real>(const Var<Real>&, const Var<Real>&, const AffineParams<Real>&, \
                                 double);                                                      \
  template Var<Real> ssm_mix_directional<Real>(const Var<Real>&, const SsmDirectionParams<Real>&, \
                                               Direction);                                     \
  template Var<Real> bidirectional_ssm_mix<Real>(const Var<Real>&, const SsmMixerParams<Real>&); \
  template Var<Real> attention_mix<Real>(const Var<Real>&, const AttentionParams<Real>&);      \
  template Var<Real> diffusion_block<Real>(const Var<Real>&, const Var<Real>&,                 \
                                           const BlockParams<Real>&);                          \
  template class DenoiserModel<Real>;

DIFFLAB_INSTANTIATE_MODEL(float)
DIFFLAB_INSTANTIATE_MODEL(double)

#undef DIFFLAB_INSTANTIATE_MODEL

}  // namespace difflab
