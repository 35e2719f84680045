#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "difflab/autograd.hpp"

namespace difflab {

struct GradCheckOptions {
  double step = 1e-5;
  // Coordinates probed per parameter; tensors at or below this size are
  // probed exhaustively, larger ones at a seeded random subset.
  std::size_t max_coords_per_param = 32;
  std::uint64_t seed = 0;
};

struct GradProbe {
  std::size_t param = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  // Rounding bound on `numeric`: eps * (|f(x+h)| + |f(x-h)|) / (2h).
  double roundoff = 0.0;

  double relative_error() const;
};

/// Central differences at every probed coordinate, in parameter order.
/// Throws NumericError when an analytic gradient is not finite.
std::vector<GradProbe> finite_difference_probes(const std::function<Var<double>()>& loss_fn,
                                                std::span<const Var<double>> params,
                                                const GradCheckOptions& options = {});

/// Compares reverse-mode gradients of the scalar `loss_fn` against central
/// differences. Returns max |analytic - numeric| / (|analytic| + |numeric| + 1e-12)
/// over the probed coordinates. `params` must be leaves with requires_grad.
/// Throws NumericError when an analytic gradient is not finite.
double finite_difference_check(const std::function<Var<double>()>& loss_fn,
                               std::span<const Var<double>> params,
                               const GradCheckOptions& options = {});

}  // namespace difflab
