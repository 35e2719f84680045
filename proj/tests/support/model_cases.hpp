#pragma once

// Randomized mixer instances compared against the naive references. Each
// function draws its sizes and parameters from `seed`.

#include <algorithm>

#include "difflab/model.hpp"
#include "difflab/ops.hpp"
#include "support/reference.hpp"

namespace difflab::testing {

struct OracleError {
  double absolute = 0.0;  // worst |got - reference|
  double scale = 0.0;     // largest |reference| entry

  // Absolute error measured in units of max(1, scale).
  double scaled() const { return absolute / std::max(1.0, scale); }
};

inline double max_abs(const Mat& m) {
  double out = 0.0;
  for (double v : m.v) out = std::max(out, std::abs(v));
  return out;
}

inline ModelConfig random_mixer_config(RngStream& rng, PatternKind kind) {
  ModelConfig c;
  c.n_layers = 1;
  c.d_head = 2 * (1 + rng.next_u64() % 3);
  c.d_model = c.d_head * (1 + rng.next_u64() % 3);
  c.d_state = 1 + rng.next_u64() % 4;
  c.vocab = 5;
  c.context_len = 8;
  c.pattern_kind = kind;
  return c;
}

inline Tensor<double> random_input(std::size_t L, std::size_t d, RngStream& rng) {
  return random_tensor(Shape{L, d}, rng);
}

// reverse(mix(x; P_f, P_b)) against mix(reverse(x); P_b, P_f).
inline double flip_symmetry_error(std::uint64_t seed) {
  RngStream rng(seed);
  const ModelConfig c = random_mixer_config(rng, PatternKind::kSsmOnly);
  DenoiserModel<double> model(c, seed, InitScheme::kRandom, 1.0);
  const SsmMixerParams<double>& p = model.block(0).ssm;
  const SsmMixerParams<double> swapped{p.backward, p.forward};
  const std::size_t L = 1 + rng.next_u64() % 8;
  Var<double> x(random_input(L, c.d_model, rng));
  NoGradGuard no_grad;
  const Mat lhs = flip_rows(to_mat(bidirectional_ssm_mix(x, p).value()));
  const Mat rhs = to_mat(bidirectional_ssm_mix(ops::reverse_rows(x), swapped).value());
  return max_abs_diff(lhs, rhs);
}

// Runs at precision Real against the double reference. The reference sees
// exactly the parameters and inputs the Real path sees, so only arithmetic
// rounding separates the two. Float rounding grows with the output scale,
// hence the scaled() view for float cases.
template <typename Real = double>
OracleError ssm_oracle_error(std::uint64_t seed) {
  RngStream rng(seed);
  const ModelConfig c = random_mixer_config(rng, PatternKind::kSsmOnly);
  DenoiserModel<Real> model(c, seed, InitScheme::kRandom, 1.0);
  DenoiserModel<double> exact(c, seed, InitScheme::kRandom, 1.0);
  exact.load_state(model.state());
  const std::size_t L = 1 + rng.next_u64() % 8;
  const Tensor<double> x = random_input(L, c.d_model, rng).template cast<Real>().template cast<double>();
  NoGradGuard no_grad;
  OracleError worst;
  for (Direction dir : {Direction::kForward, Direction::kBackward}) {
    const bool fwd = dir == Direction::kForward;
    const auto& p = fwd ? model.block(0).ssm.forward : model.block(0).ssm.backward;
    const auto& ref = fwd ? exact.block(0).ssm.forward : exact.block(0).ssm.backward;
    const Mat got = to_mat(ssm_mix_directional(Var<Real>(x.template cast<Real>()), p, dir).value());
    const Mat want = ref_ssm_direction(to_mat(x), ref, dir);
    worst.absolute = std::max(worst.absolute, max_abs_diff(got, want));
    worst.scale = std::max(worst.scale, max_abs(want));
  }
  return worst;
}

template <typename Real = double>
OracleError attention_oracle_error(std::uint64_t seed) {
  RngStream rng(seed);
  const ModelConfig c = random_mixer_config(rng, PatternKind::kAttentionOnly);
  DenoiserModel<Real> model(c, seed, InitScheme::kRandom, 1.0);
  DenoiserModel<double> exact(c, seed, InitScheme::kRandom, 1.0);
  exact.load_state(model.state());
  const std::size_t L = 1 + rng.next_u64() % 8;
  const Tensor<double> x = random_input(L, c.d_model, rng).template cast<Real>().template cast<double>();
  NoGradGuard no_grad;
  const Mat got = to_mat(attention_mix(Var<Real>(x.template cast<Real>()), model.block(0).attention).value());
  const Mat want = ref_attention_mix(to_mat(x), exact.block(0).attention);
  return {max_abs_diff(got, want), max_abs(want)};
}

}  // namespace difflab::testing
