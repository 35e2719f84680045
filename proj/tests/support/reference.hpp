#pragma once

// Naive double-precision loops used as independent oracles. Nothing here
// calls into the library except to copy tensor values out.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "difflab/model.hpp"
#include "difflab/rng.hpp"
#include "difflab/tensor.hpp"

namespace difflab::testing {

struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

template <typename Real>
Mat to_mat(const Tensor<Real>& t) {
  Mat m(t.rank() == 1 ? 1 : t.rows(), t.cols());
  for (std::size_t i = 0; i < t.size(); ++i) m.v[i] = static_cast<double>(t[i]);
  return m;
}

template <typename Real>
Tensor<Real> to_tensor(const Mat& m) {
  std::vector<Real> values(m.v.begin(), m.v.end());
  return Tensor<Real>(Shape{m.rows, m.cols}, std::move(values));
}

inline Tensor<double> random_tensor(const Shape& shape, RngStream& rng, double scale = 1.0) {
  Tensor<double> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

inline Mat ref_affine(const Mat& x, const Mat& w, const Mat* b) {
  Mat y(x.rows, w.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t c = 0; c < w.cols; ++c) {
      double acc = b ? b->v[c] : 0.0;
      for (std::size_t k = 0; k < x.cols; ++k) acc += x(r, k) * w(k, c);
      y(r, c) = acc;
    }
  }
  return y;
}

inline Mat ref_affine(const Mat& x, const AffineParams<double>& p) {
  const Mat w = to_mat(p.weight.value());
  if (!p.bias.defined()) return ref_affine(x, w, nullptr);
  const Mat b = to_mat(p.bias.value());
  return ref_affine(x, w, &b);
}

inline Mat ref_softmax(const Mat& x) {
  Mat y(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    double denom = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) denom += std::exp(x(r, c));
    for (std::size_t c = 0; c < x.cols; ++c) y(r, c) = std::exp(x(r, c)) / denom;
  }
  return y;
}

inline Mat ref_layernorm(const Mat& x, double eps) {
  Mat y(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) mean += x(r, c);
    mean /= static_cast<double>(x.cols);
    double var = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= static_cast<double>(x.cols);
    for (std::size_t c = 0; c < x.cols; ++c) y(r, c) = (x(r, c) - mean) / std::sqrt(var + eps);
  }
  return y;
}

inline double ref_silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double ref_softplus(double x) { return x > 30.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

template <typename F>
Mat map(const Mat& x, F f) {
  Mat y = x;
  for (double& v : y.v) v = f(v);
  return y;
}

inline Mat cols_of(const Mat& x, std::size_t begin, std::size_t end) {
  Mat y(x.rows, end - begin);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t c = begin; c < end; ++c) y(r, c - begin) = x(r, c);
  }
  return y;
}

inline Mat flip_rows(const Mat& x) {
  Mat y(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t c = 0; c < x.cols; ++c) y(x.rows - 1 - r, c) = x(r, c);
  }
  return y;
}

inline Mat plus(const Mat& a, const Mat& b) {
  Mat y = a;
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += b.v[i];
  return y;
}

// h_i = a_i * h_{i-1} + b_i.
inline Mat ref_scan(const Mat& a, const Mat& b, const std::vector<double>& h0) {
  Mat h(a.rows, a.cols);
  std::vector<double> state = h0;
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t c = 0; c < a.cols; ++c) {
      state[c] = a(i, c) * state[c] + b(i, c);
      h(i, c) = state[c];
    }
  }
  return h;
}

// One selective-scan direction written as a per-position loop over the
// (channel, state) lanes.
inline Mat ref_ssm_direction(const Mat& x_in, const SsmDirectionParams<double>& p, Direction dir) {
  const Mat x = dir == Direction::kForward ? x_in : flip_rows(x_in);
  const std::size_t L = x.rows, d = x.cols;
  const std::size_t ns = p.bc_proj.weight.value().dim(1) / 2;
  const Mat proj = ref_affine(x, p.in_proj);
  const Mat inner = map(cols_of(proj, 0, d), ref_silu);
  const Mat gate = map(cols_of(proj, d, 2 * d), ref_silu);
  const Mat step = map(ref_affine(inner, p.dt_proj), ref_softplus);
  const Mat bc = ref_affine(inner, p.bc_proj);
  const Tensor<double>& a = p.decay_logits.value();
  Mat gated(L, d);
  std::vector<double> h(d * ns, 0.0);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      const double decay = std::exp(-step(i, c) * std::exp(a[c]));
      const double drive = step(i, c) * inner(i, c);
      double y = 0.0;
      for (std::size_t n = 0; n < ns; ++n) {
        double& lane = h[c * ns + n];
        lane = decay * lane + drive * bc(i, n);
        y += bc(i, ns + n) * lane;
      }
      gated(i, c) = y * gate(i, c);
    }
  }
  const Mat out = ref_affine(gated, p.out_proj);
  return dir == Direction::kForward ? out : flip_rows(out);
}

inline Mat ref_rotary(const Mat& x, std::size_t n_heads, double base = 10000.0) {
  const std::size_t dh = x.cols / n_heads, half = dh / 2;
  Mat y(x.rows, x.cols);
  for (std::size_t pos = 0; pos < x.rows; ++pos) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t j = 0; j < half; ++j) {
        const double angle = static_cast<double>(pos) * std::pow(base, -2.0 * j / static_cast<double>(dh));
        const double x1 = x(pos, h * dh + j), x2 = x(pos, h * dh + j + half);
        y(pos, h * dh + j) = x1 * std::cos(angle) - x2 * std::sin(angle);
        y(pos, h * dh + j + half) = x1 * std::sin(angle) + x2 * std::cos(angle);
      }
    }
  }
  return y;
}

// Dense multi-head attention with an explicit L x L score matrix per head.
inline Mat ref_attention_heads(const Mat& q, const Mat& k, const Mat& v, std::size_t n_heads) {
  const std::size_t L = q.rows, d = q.cols, dh = d / n_heads;
  Mat out(L, d);
  for (std::size_t h = 0; h < n_heads; ++h) {
    Mat scores(L, L);
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t j = 0; j < L; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q(i, h * dh + c) * k(j, h * dh + c);
        scores(i, j) = s / std::sqrt(static_cast<double>(dh));
      }
    }
    const Mat probs = ref_softmax(scores);
    for (std::size_t i = 0; i < L; ++i) {
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < L; ++j) acc += probs(i, j) * v(j, h * dh + c);
        out(i, h * dh + c) = acc;
      }
    }
  }
  return out;
}

inline Mat ref_attention_mix(const Mat& x, const AttentionParams<double>& p) {
  const std::size_t d = x.cols;
  const Mat qkv = ref_affine(x, p.qkv);
  Mat q = cols_of(qkv, 0, d), k = cols_of(qkv, d, 2 * d);
  const Mat v = cols_of(qkv, 2 * d, 3 * d);
  if (p.rotary) {
    q = ref_rotary(q, p.n_heads);
    k = ref_rotary(k, p.n_heads);
  }
  return ref_affine(ref_attention_heads(q, k, v, p.n_heads), p.out);
}

inline Mat ref_timestep_embedding(double t, const TimestepParams<double>& p) {
  const std::size_t half = kTimestepFeatures / 2;
  Mat f(1, kTimestepFeatures);
  for (std::size_t j = 0; j < half; ++j) {
    const double freq = std::pow(10000.0, -static_cast<double>(j) / half);
    f(0, j) = std::sin(1000.0 * t * freq);
    f(0, half + j) = std::cos(1000.0 * t * freq);
  }
  return ref_affine(map(ref_affine(f, p.proj1), ref_silu), p.proj2);
}

inline Mat ref_adaln(const Mat& x, const Mat& tau, const AffineParams<double>& cond, double eps) {
  const Mat mod = ref_affine(tau, cond);
  const Mat normed = ref_layernorm(x, eps);
  Mat y(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t c = 0; c < x.cols; ++c) {
      y(r, c) = normed(r, c) * (1.0 + mod(0, c)) + mod(0, x.cols + c);
    }
  }
  return y;
}

inline Mat ref_block(const Mat& x, const Mat& tau, const BlockParams<double>& block) {
  const Mat normed = ref_adaln(x, tau, block.mixer_cond, kNormEps);
  const Mat mixed = block.kind == MixerKind::kSsm
                        ? plus(ref_ssm_direction(normed, block.ssm.forward, Direction::kForward),
                               ref_ssm_direction(normed, block.ssm.backward, Direction::kBackward))
                        : ref_attention_mix(normed, block.attention);
  const Mat y = plus(mixed, x);
  if (!block.mlp) return y;
  const Mat inner = ref_adaln(y, tau, *block.mlp_cond, kNormEps);
  const Mat hidden = map(ref_affine(inner, block.mlp->fc1), ref_silu);
  return plus(ref_affine(hidden, block.mlp->fc2), y);
}

// log softmax(row)[target], two-pass.
inline double ref_neg_log_prob(const std::vector<double>& row, std::size_t target) {
  double denom = 0.0;
  for (double v : row) denom += std::exp(v);
  return -std::log(std::exp(row[target]) / denom);
}

}  // namespace difflab::testing
