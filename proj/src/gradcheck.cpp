#include "difflab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

namespace difflab {

double GradProbe::relative_error() const {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

std::vector<GradProbe> finite_difference_probes(const std::function<Var<double>()>& loss_fn,
                                                std::span<const Var<double>> params,
                                                const GradCheckOptions& options) {
  if (!(options.step > 0)) throw DomainError("finite_difference_check: step must be positive");
  std::vector<Var<double>> handles(params.begin(), params.end());
  for (auto& p : handles) {
    if (!p.requires_grad()) throw ConfigError("finite_difference_check: parameter without grad");
    p.zero_grad();
  }
  backward(loss_fn());

  constexpr double kEps = std::numeric_limits<double>::epsilon();
  std::mt19937_64 gen(options.seed);
  std::vector<GradProbe> probes;
  for (std::size_t k = 0; k < handles.size(); ++k) {
    Var<double>& p = handles[k];
    const std::size_t n = p.value().size();
    const Tensor<double> analytic = p.has_grad() ? p.grad() : Tensor<double>(p.shape());
    if (!analytic.all_finite()) {
      throw NumericError("finite_difference_check: non-finite analytic gradient in parameter " +
                         std::to_string(k));
    }
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), gen);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    NoGradGuard no_grad;
    for (std::size_t idx : coords) {
      double& slot = p.mutable_value()[idx];
      const double saved = slot;
      slot = saved + options.step;
      const double up = loss_fn().value()[0];
      slot = saved - options.step;
      const double down = loss_fn().value()[0];
      slot = saved;
      probes.push_back({.param = k,
                        .index = idx,
                        .analytic = analytic[idx],
                        .numeric = (up - down) / (2.0 * options.step),
                        .roundoff = kEps * (std::abs(up) + std::abs(down)) / (2.0 * options.step)});
    }
  }
  return probes;
}

double finite_difference_check(const std::function<Var<double>()>& loss_fn,
                               std::span<const Var<double>> params,
                               const GradCheckOptions& options) {
  double worst = 0.0;
  for (const GradProbe& p : finite_difference_probes(loss_fn, params, options)) {
    worst = std::max(worst, p.relative_error());
  }
  return worst;
}

}  // namespace difflab
