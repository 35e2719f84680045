#pragma once

// A two-token, two-symbol denoiser whose logits depend on the other
// position and on t, plus the exact law of its reverse chain obtained by
// enumerating every keep/unmask decision and token draw.

#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include "support/fakes.hpp"

namespace difflab::testing {

inline constexpr std::int32_t kToyMask = 2;

// Logits for each position given the current state. Position 0 prefers 1,
// position 1 copies position 0 once it is known, and t tilts both rows.
inline std::vector<std::vector<double>> toy_logits(const TokenSequence& x, double t) {
  std::vector<std::vector<double>> rows(2, std::vector<double>(2, 0.0));
  rows[0][1] = 0.7 + 0.5 * t + (x.ids[1] == 0 ? -1.1 : 0.0);
  rows[1][0] = x.ids[0] == 0 ? 1.6 : (x.ids[0] == 1 ? -0.9 : 0.2 * t);
  return rows;
}

inline FunctionDenoiser<double> toy_denoiser() { return FunctionDenoiser<double>(2, 2, toy_logits); }

inline std::array<double, 2> toy_probs(const std::vector<double>& row, double temperature) {
  const double a = std::exp(row[0] / temperature), b = std::exp(row[1] / temperature);
  return {a / (a + b), b / (a + b)};
}

// Probability of each final sequence, indexed 2 * x0 + x1.
inline std::array<double, 4> toy_exact_law(std::size_t steps, double temperature) {
  std::array<double, 4> law{};
  std::function<void(std::size_t, std::array<std::int32_t, 2>, double)> walk =
      [&](std::size_t k, std::array<std::int32_t, 2> state, double p) {
        if (k == 0) {
          law[static_cast<std::size_t>(2 * state[0] + state[1])] += p;
          return;
        }
        const double t = static_cast<double>(k) / static_cast<double>(steps);
        const double s = static_cast<double>(k - 1) / static_cast<double>(steps);
        TokenSequence x{{state[0], state[1]}, {}};
        const auto rows = toy_logits(x, t);
        // Per-position outcome lists: (token or mask, probability).
        std::array<std::vector<std::pair<std::int32_t, double>>, 2> outcomes;
        for (std::size_t i = 0; i < 2; ++i) {
          if (state[i] != kToyMask) {
            outcomes[i] = {{state[i], 1.0}};
            continue;
          }
          const auto probs = toy_probs(rows[i], temperature);
          const double unmask = (t - s) / t;
          if (s > 0.0) outcomes[i].push_back({kToyMask, 1.0 - unmask});
          outcomes[i].push_back({0, unmask * probs[0]});
          outcomes[i].push_back({1, unmask * probs[1]});
        }
        for (const auto& [a, pa] : outcomes[0]) {
          for (const auto& [b, pb] : outcomes[1]) walk(k - 1, {a, b}, p * pa * pb);
        }
      };
  walk(steps, {kToyMask, kToyMask}, 1.0);
  return law;
}

}  // namespace difflab::testing
