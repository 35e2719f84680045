#pragma once

#include <cstdint>
#include <span>

#include "difflab/autograd.hpp"

// Differentiable primitives. Every function here is pure: it reads its
// inputs, returns a fresh value, and (when recording) attaches a backward
// closure. All outputs are checked for NaN/Inf; a non-finite result from
// finite inputs raises NumericError naming the op.
namespace difflab::ops {

/// y = x W + b over the last axis of x. `bias` may be undefined.
template <typename Real>
Var<Real> affine(const Var<Real>& x, const Var<Real>& weight, const Var<Real>& bias);

/// Row-wise softmax over the last axis, max-subtracted.
template <typename Real>
Var<Real> softmax(const Var<Real>& x);

/// Row-wise (x - mean) / sqrt(var + eps), no learned scale or shift.
template <typename Real>
Var<Real> layer_normalize(const Var<Real>& x, double eps);

/// h_i = a_i * h_{i-1} + b_i element-wise, h_0 = h0. a, b: [L, d]; h0: [d].
/// Backward runs the adjoint recurrence in reverse rather than unrolling.
template <typename Real>
Var<Real> linear_recurrence_scan(const Var<Real>& a, const Var<Real>& b, const Var<Real>& h0);

enum class Elementwise { kSilu, kSoftplus, kExp, kMul, kAdd };

// Unary kinds: silu, softplus, exp.
template <typename Real>
Var<Real> elementwise(Elementwise kind, const Var<Real>& x);
// Binary kinds: mul, add. `b` matches `a` exactly or is a row vector with
// a.cols() entries broadcast over every row of `a`.
template <typename Real>
Var<Real> elementwise(Elementwise kind, const Var<Real>& a, const Var<Real>& b);

template <typename Real>
Var<Real> silu(const Var<Real>& x) { return elementwise(Elementwise::kSilu, x); }
template <typename Real>
Var<Real> softplus(const Var<Real>& x) { return elementwise(Elementwise::kSoftplus, x); }
template <typename Real>
Var<Real> exp(const Var<Real>& x) { return elementwise(Elementwise::kExp, x); }
template <typename Real>
Var<Real> mul(const Var<Real>& a, const Var<Real>& b) { return elementwise(Elementwise::kMul, a, b); }
template <typename Real>
Var<Real> add(const Var<Real>& a, const Var<Real>& b) { return elementwise(Elementwise::kAdd, a, b); }

// y = c * x + offset with constants c and offset.
template <typename Real>
Var<Real> scale_shift(const Var<Real>& x, double c, double offset = 0.0);

/// Per-row -log softmax(logits)[target], via log-sum-exp. logits: [n, V].
template <typename Real>
Var<Real> cross_entropy(const Var<Real>& logits, std::span<const std::int32_t> targets);

// Scalar [1] = sum_i w_i x_i over the flattened input.
template <typename Real>
Var<Real> weighted_sum(const Var<Real>& x, std::span<const double> weights);

template <typename Real>
Var<Real> sum(const Var<Real>& x);

// Row lookup: table [R, d], ids in [0, R) -> [n, d].
template <typename Real>
Var<Real> embedding(const Var<Real>& table, std::span<const std::int32_t> ids);

// Reverses the order of the rows of a rank-2 tensor.
template <typename Real>
Var<Real> reverse_rows(const Var<Real>& x);

// Columns [begin, end) of every row.
template <typename Real>
Var<Real> slice_cols(const Var<Real>& x, std::size_t begin, std::size_t end);

/// Rotary position encoding on [L, d] split into n_heads heads; row index is
/// the position. Each head rotates pairs (j, j + d_head/2).
template <typename Real>
Var<Real> rotary(const Var<Real>& x, std::size_t n_heads, double base = 10000.0);

/// Unmasked multi-head scaled dot-product attention. q, k, v: [L, d].
/// Without recording, scores are formed one query block at a time so memory
/// stays O(block * L) per head.
template <typename Real>
Var<Real> attention(const Var<Real>& q, const Var<Real>& k, const Var<Real>& v,
                    std::size_t n_heads);

/// Diagonal selective state scan, one recurrence per (channel, state) lane:
///   h_i[c, n] = decay_i[c] * h_{i-1}[c, n] + drive_i[c] * b_i[n],  h_0 = 0
///   y_i[c]    = sum_n c_i[n] * h_i[c, n]
/// decay, drive: [L, d]; b, c: [L, N]. Cost O(L d N); the backward pass is
/// the reverse adjoint recurrence over the saved states.
template <typename Real>
Var<Real> selective_state_scan(const Var<Real>& decay, const Var<Real>& drive,
                               const Var<Real>& b, const Var<Real>& c);

/// "same" 1D convolution along rows with per-channel kernels w: [k, d].
/// Causal: y_i = sum_j w_j x_{i-j}; anti-causal mirrors it. Provided for
/// mixers that realize the directional kernels as convolutions.
template <typename Real>
Var<Real> depthwise_conv1d(const Var<Real>& x, const Var<Real>& w, bool causal);

}  // namespace difflab::ops
