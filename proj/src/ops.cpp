#include "difflab/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace difflab::ops {
namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstMatMap = Eigen::Map<const RowMat<Real>>;
template <typename Real>
using StridedMap = Eigen::Map<RowMat<Real>, 0, Eigen::OuterStride<>>;
template <typename Real>
using ConstStridedMap = Eigen::Map<const RowMat<Real>, 0, Eigen::OuterStride<>>;

template <typename Real>
MatMap<Real> as_matrix(Tensor<Real>& t) {
  return MatMap<Real>(t.data(), static_cast<Eigen::Index>(t.rows()),
                      static_cast<Eigen::Index>(t.cols()));
}
template <typename Real>
ConstMatMap<Real> as_matrix(const Tensor<Real>& t) {
  return ConstMatMap<Real>(t.data(), static_cast<Eigen::Index>(t.rows()),
                           static_cast<Eigen::Index>(t.cols()));
}

template <typename Real>
Eigen::Map<Eigen::Array<Real, Eigen::Dynamic, 1>> as_array(Tensor<Real>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}
template <typename Real>
Eigen::Map<const Eigen::Array<Real, Eigen::Dynamic, 1>> as_array(const Tensor<Real>& t) {
  return {t.data(), static_cast<Eigen::Index>(t.size())};
}

template <typename Real>
void ensure_finite(const Tensor<Real>& t, const char* op) {
  if (!t.all_finite()) {
    throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

template <typename Real>
void require_defined(const Var<Real>& v, const char* op, const char* what) {
  if (!v.defined()) throw DimensionError(std::string(op) + ": " + what + " is undefined");
}

template <typename Real>
void require_rank2(const Var<Real>& v, const char* op) {
  if (v.value().rank() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " +
                         shape_to_string(v.shape()));
  }
}

// Above this softplus(x) equals x to working precision and exp would overflow.
constexpr double kSoftplusLinear = 30.0;

// log(1 + e^x) as max(x, 0) + log1p(e^-|x|). Eigen has no vectorized log1p,
// so it is rebuilt from log via log1p(e) = log(u) * e / (u - 1), u = 1 + e,
// which keeps full relative accuracy for tiny e.
template <typename Derived>
auto log1p_exp(const Eigen::ArrayBase<Derived>& x) {
  using Real = typename Derived::Scalar;
  using Array = Eigen::Array<Real, Eigen::Dynamic, 1>;
  const Array e = (-x.abs()).exp();
  const Array u = e + Real(1);
  const Array tail = (u == Real(1)).select(e, u.log() * e / (u - Real(1)));
  return Array(x.max(Real(0)) + tail);
}

Shape with_last(const Shape& s, std::size_t last) {
  Shape out = s;
  out.back() = last;
  return out;
}

}  // namespace

template <typename Real>
Var<Real> affine(const Var<Real>& x, const Var<Real>& weight, const Var<Real>& bias) {
  require_defined(x, "affine_map", "input");
  require_defined(weight, "affine_map", "weight");
  const Tensor<Real>& xv = x.value();
  const Tensor<Real>& wv = weight.value();
  if (wv.rank() != 2 || xv.cols() != wv.dim(0)) {
    throw DimensionError("affine_map: input " + shape_to_string(xv.shape()) +
                         " incompatible with weight " + shape_to_string(wv.shape()));
  }
  const std::size_t n = wv.dim(1);
  if (bias.defined() && (bias.value().size() != n)) {
    throw DimensionError("affine_map: bias " + shape_to_string(bias.shape()) +
                         " does not match weight " + shape_to_string(wv.shape()));
  }
  Tensor<Real> out(with_last(xv.shape(), n));
  auto y = as_matrix(out);
  y.noalias() = as_matrix(xv) * as_matrix(wv);
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>> b(bias.value().data(),
                                                                static_cast<Eigen::Index>(n));
    y.rowwise() += b;
  }
  ensure_finite(out, "affine_map");

  Var<Real> xc = x, wc = weight, bc = bias;
  std::vector<Var<Real>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<Real>(std::move(out), inputs, [xc, wc, bc](const Tensor<Real>& g) {
    auto gy = as_matrix(g);
    if (xc.requires_grad()) {
      Tensor<Real> gx(xc.shape());
      as_matrix(gx).noalias() = gy * as_matrix(wc.value()).transpose();
      accumulate_grad(*xc.node(), gx);
    }
    if (wc.requires_grad()) {
      Tensor<Real> gw(wc.shape());
      as_matrix(gw).noalias() = as_matrix(xc.value()).transpose() * gy;
      accumulate_grad(*wc.node(), gw);
    }
    if (bc.defined() && bc.requires_grad()) {
      Tensor<Real> gb(bc.shape());
      const std::size_t rows = g.rows(), cols = g.cols();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g(r, c);
      }
      accumulate_grad(*bc.node(), gb);
    }
  });
}

template <typename Real>
Var<Real> softmax(const Var<Real>& x) {
  const Tensor<Real>& xv = x.value();
  if (xv.empty() || xv.cols() == 0) throw DimensionError("softmax: empty last dimension");
  Tensor<Real> out(xv.shape());
  const std::size_t rows = xv.rows(), n = xv.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * n;
    Real* o = out.data() + r * n;
    const Real mx = *std::max_element(in, in + n);
    Real total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  ensure_finite(out, "softmax");
  Tensor<Real> saved = out;
  Var<Real> xc = x;
  return make_result<Real>(std::move(out), {x}, [xc, saved](const Tensor<Real>& g) {
    Tensor<Real> gx(saved.shape());
    const std::size_t rows = saved.rows(), n = saved.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* y = saved.data() + r * n;
      const Real* gy = g.data() + r * n;
      Real dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      Real* o = gx.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) o[j] = y[j] * (gy[j] - dot);
    }
    accumulate_grad(*xc.node(), gx);
  });
}

template <typename Real>
Var<Real> layer_normalize(const Var<Real>& x, double eps) {
  if (!(eps > 0)) throw DomainError("layer_normalize: eps must be positive");
  const Tensor<Real>& xv = x.value();
  const std::size_t rows = xv.rows(), d = xv.cols();
  Tensor<Real> out(xv.shape());
  std::vector<Real> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xv.data() + r * d;
    Real mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<Real>(d);
    rstd[r] = Real(1) / std::sqrt(var + static_cast<Real>(eps));
    Real* o = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) o[j] = (in[j] - mean) * rstd[r];
  }
  ensure_finite(out, "layer_normalize");
  Tensor<Real> normed = out;
  Var<Real> xc = x;
  return make_result<Real>(std::move(out), {x}, [xc, normed, rstd](const Tensor<Real>& g) {
    const std::size_t rows = normed.rows(), d = normed.cols();
    Tensor<Real> gx(normed.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* xh = normed.data() + r * d;
      const Real* gy = g.data() + r * d;
      Real mean_g = 0, mean_gx = 0;
      for (std::size_t j = 0; j < d; ++j) {
        mean_g += gy[j];
        mean_gx += gy[j] * xh[j];
      }
      mean_g /= static_cast<Real>(d);
      mean_gx /= static_cast<Real>(d);
      Real* o = gx.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) o[j] = rstd[r] * (gy[j] - mean_g - xh[j] * mean_gx);
    }
    accumulate_grad(*xc.node(), gx);
  });
}

template <typename Real>
Var<Real> linear_recurrence_scan(const Var<Real>& a, const Var<Real>& b, const Var<Real>& h0) {
  require_rank2(a, "linear_recurrence_scan");
  if (a.shape() != b.shape()) {
    throw DimensionError("linear_recurrence_scan: a " + shape_to_string(a.shape()) +
                         " and b " + shape_to_string(b.shape()) + " differ");
  }
  const std::size_t len = a.value().dim(0), d = a.value().dim(1);
  if (h0.value().size() != d) {
    throw DimensionError("linear_recurrence_scan: h0 " + shape_to_string(h0.shape()) +
                         " does not match channel dimension " + std::to_string(d));
  }
  Tensor<Real> out(a.shape());
  const Real* av = a.value().data();
  const Real* bv = b.value().data();
  const Real* prev = h0.value().data();
  for (std::size_t i = 0; i < len; ++i) {
    Real* h = out.data() + i * d;
    for (std::size_t c = 0; c < d; ++c) h[c] = av[i * d + c] * prev[c] + bv[i * d + c];
    prev = h;
  }
  ensure_finite(out, "linear_recurrence_scan");

  Var<Real> ac = a, bc = b, hc = h0;
  Tensor<Real> states = out;
  return make_result<Real>(std::move(out), {a, b, h0}, [ac, bc, hc, states](const Tensor<Real>& g) {
    const std::size_t len = states.dim(0), d = states.dim(1);
    const Real* av = ac.value().data();
    Tensor<Real> ga(states.shape()), gb(states.shape());
    Tensor<Real> gh0(hc.shape());
    std::vector<Real> carry(d, Real(0));
    for (std::size_t step = len; step-- > 0;) {
      const Real* prev = step == 0 ? hc.value().data() : states.data() + (step - 1) * d;
      for (std::size_t c = 0; c < d; ++c) {
        const Real adj = g[step * d + c] + carry[c];
        gb[step * d + c] = adj;
        ga[step * d + c] = adj * prev[c];
        carry[c] = adj * av[step * d + c];
      }
    }
    for (std::size_t c = 0; c < d; ++c) gh0[c] = carry[c];
    if (ac.requires_grad()) accumulate_grad(*ac.node(), ga);
    if (bc.requires_grad()) accumulate_grad(*bc.node(), gb);
    if (hc.requires_grad()) accumulate_grad(*hc.node(), gh0);
  });
}

template <typename Real>
Var<Real> elementwise(Elementwise kind, const Var<Real>& x) {
  const Tensor<Real>& xv = x.value();
  Tensor<Real> out(xv.shape());
  const char* name = "elementwise";
  auto xa = as_array(xv);
  auto oa = as_array(out);
  switch (kind) {
    case Elementwise::kSilu:
      name = "silu";
      oa = xa * xa.logistic();
      break;
    case Elementwise::kSoftplus:
      name = "softplus";
      oa = (xa > Real(kSoftplusLinear)).select(xa, log1p_exp(xa));
      break;
    case Elementwise::kExp:
      name = "exp";
      oa = xa.exp();
      break;
    default:
      throw DomainError("elementwise: binary kind used with one argument");
  }
  ensure_finite(out, name);
  Var<Real> xc = x;
  Tensor<Real> saved = kind == Elementwise::kExp ? out : Tensor<Real>();
  return make_result<Real>(std::move(out), {x}, [kind, xc, saved](const Tensor<Real>& g) {
    const Tensor<Real>& xv = xc.value();
    Tensor<Real> gx(xv.shape());
    auto xa = as_array(xv);
    auto ga = as_array(g);
    auto out = as_array(gx);
    switch (kind) {
      case Elementwise::kSilu: {
        const auto sig = xa.logistic();
        out = ga * sig * (Real(1) + xa * (Real(1) - sig));
        break;
      }
      case Elementwise::kSoftplus:
        out = ga * xa.logistic();
        break;
      default:
        out = ga * as_array(saved);
        break;
    }
    accumulate_grad(*xc.node(), gx);
  });
}

template <typename Real>
Var<Real> elementwise(Elementwise kind, const Var<Real>& a, const Var<Real>& b) {
  if (kind != Elementwise::kMul && kind != Elementwise::kAdd) {
    throw DomainError("elementwise: unary kind used with two arguments");
  }
  const Tensor<Real>& av = a.value();
  const Tensor<Real>& bv = b.value();
  const bool same = av.shape() == bv.shape();
  const bool row_broadcast = !same && bv.size() == av.cols() && bv.rows() == 1;
  if (!same && !row_broadcast) {
    throw DimensionError(std::string(kind == Elementwise::kMul ? "mul" : "add") +
                         ": shapes " + shape_to_string(av.shape()) + " and " +
                         shape_to_string(bv.shape()) + " are not broadcast-compatible");
  }
  Tensor<Real> out(av.shape());
  if (same) {
    if (kind == Elementwise::kMul) {
      as_array(out) = as_array(av) * as_array(bv);
    } else {
      as_array(out) = as_array(av) + as_array(bv);
    }
  } else {
    auto o = as_matrix(out).array();
    const auto row = as_matrix(bv).array();
    if (kind == Elementwise::kMul) {
      o = as_matrix(av).array().rowwise() * row.row(0);
    } else {
      o = as_matrix(av).array().rowwise() + row.row(0);
    }
  }
  ensure_finite(out, kind == Elementwise::kMul ? "mul" : "add");
  Var<Real> ac = a, bc = b;
  return make_result<Real>(std::move(out), {a, b}, [kind, ac, bc, same](const Tensor<Real>& g) {
    const Tensor<Real>& av = ac.value();
    const Tensor<Real>& bv = bc.value();
    if (ac.requires_grad()) {
      if (kind == Elementwise::kAdd) {
        accumulate_grad(*ac.node(), g);
      } else {
        Tensor<Real> ga(av.shape());
        if (same) {
          as_array(ga) = as_array(g) * as_array(bv);
        } else {
          as_matrix(ga).array() = as_matrix(g).array().rowwise() * as_matrix(bv).array().row(0);
        }
        accumulate_grad(*ac.node(), ga);
      }
    }
    if (bc.requires_grad()) {
      if (same) {
        if (kind == Elementwise::kAdd) {
          accumulate_grad(*bc.node(), g);
        } else {
          Tensor<Real> gb(bv.shape());
          as_array(gb) = as_array(g) * as_array(av);
          accumulate_grad(*bc.node(), gb);
        }
      } else {
        // Column sums in row order, matching a sequential accumulation.
        Tensor<Real> gb(bv.shape());
        const std::size_t rows = av.rows(), cols = av.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            gb[c] += kind == Elementwise::kMul ? g[r * cols + c] * av[r * cols + c] : g[r * cols + c];
          }
        }
        accumulate_grad(*bc.node(), gb);
      }
    }
  });
}

template <typename Real>
Var<Real> scale_shift(const Var<Real>& x, double c, double offset) {
  const Tensor<Real>& xv = x.value();
  Tensor<Real> out(xv.shape());
  const Real cr = static_cast<Real>(c), orr = static_cast<Real>(offset);
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = cr * xv[i] + orr;
  ensure_finite(out, "scale_shift");
  Var<Real> xc = x;
  return make_result<Real>(std::move(out), {x}, [xc, cr](const Tensor<Real>& g) {
    Tensor<Real> gx(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = cr * g[i];
    accumulate_grad(*xc.node(), gx);
  });
}

template <typename Real>
Var<Real> cross_entropy(const Var<Real>& logits, std::span<const std::int32_t> targets) {
  require_rank2(logits, "cross_entropy");
  const Tensor<Real>& lv = logits.value();
  const std::size_t n = lv.dim(0), vocab = lv.dim(1);
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_to_string(lv.shape()));
  }
  Tensor<Real> out(Shape{n});
  std::vector<Real> lse(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::int32_t target = targets[r];
    if (target < 0 || static_cast<std::size_t>(target) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(target) +
                       " outside [0, " + std::to_string(vocab) + ")");
    }
    const Real* row = lv.data() + r * vocab;
    const Real mx = *std::max_element(row, row + vocab);
    Real total = 0;
    for (std::size_t j = 0; j < vocab; ++j) total += std::exp(row[j] - mx);
    lse[r] = mx + std::log(total);
    out[r] = lse[r] - row[target];
  }
  ensure_finite(out, "cross_entropy");
  Var<Real> lc = logits;
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return make_result<Real>(std::move(out), {logits}, [lc, tgt, lse](const Tensor<Real>& g) {
    const Tensor<Real>& lv = lc.value();
    const std::size_t n = lv.dim(0), vocab = lv.dim(1);
    Tensor<Real> gl(lv.shape());
    for (std::size_t r = 0; r < n; ++r) {
      const Real* row = lv.data() + r * vocab;
      Real* o = gl.data() + r * vocab;
      for (std::size_t j = 0; j < vocab; ++j) o[j] = g[r] * std::exp(row[j] - lse[r]);
      o[tgt[r]] -= g[r];
    }
    accumulate_grad(*lc.node(), gl);
  });
}

template <typename Real>
Var<Real> weighted_sum(const Var<Real>& x, std::span<const double> weights) {
  const Tensor<Real>& xv = x.value();
  if (weights.size() != xv.size()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) +
                         " weights for tensor " + shape_to_string(xv.shape()));
  }
  double total = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) total += weights[i] * static_cast<double>(xv[i]);
  Tensor<Real> out = Tensor<Real>::scalar(static_cast<Real>(total));
  ensure_finite(out, "weighted_sum");
  Var<Real> xc = x;
  std::vector<double> w(weights.begin(), weights.end());
  return make_result<Real>(std::move(out), {x}, [xc, w](const Tensor<Real>& g) {
    Tensor<Real> gx(xc.shape());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = static_cast<Real>(w[i]) * g[0];
    accumulate_grad(*xc.node(), gx);
  });
}

template <typename Real>
Var<Real> sum(const Var<Real>& x) {
  std::vector<double> ones(x.value().size(), 1.0);
  return weighted_sum(x, std::span<const double>(ones));
}

template <typename Real>
Var<Real> embedding(const Var<Real>& table, std::span<const std::int32_t> ids) {
  require_rank2(table, "embedding");
  const Tensor<Real>& tv = table.value();
  const std::size_t rows = tv.dim(0), d = tv.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id sequence");
  Tensor<Real> out(Shape{ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside [0, " +
                       std::to_string(rows) + ")");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  Var<Real> tc = table;
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return make_result<Real>(std::move(out), {table}, [tc, idv](const Tensor<Real>& g) {
    const std::size_t d = tc.value().dim(1);
    Tensor<Real> gt(tc.shape());
    for (std::size_t i = 0; i < idv.size(); ++i) {
      Real* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
      const Real* src = g.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    accumulate_grad(*tc.node(), gt);
  });
}

template <typename Real>
Var<Real> reverse_rows(const Var<Real>& x) {
  require_rank2(x, "reverse_rows");
  auto flip = [](const Tensor<Real>& in) {
    const std::size_t len = in.dim(0), d = in.dim(1);
    Tensor<Real> out(in.shape());
    for (std::size_t i = 0; i < len; ++i) {
      std::copy_n(in.data() + (len - 1 - i) * d, d, out.data() + i * d);
    }
    return out;
  };
  Var<Real> xc = x;
  return make_result<Real>(flip(x.value()), {x}, [xc, flip](const Tensor<Real>& g) {
    accumulate_grad(*xc.node(), flip(g));
  });
}

template <typename Real>
Var<Real> slice_cols(const Var<Real>& x, std::size_t begin, std::size_t end) {
  const Tensor<Real>& xv = x.value();
  if (begin >= end || end > xv.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for " + shape_to_string(xv.shape()));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols(), width = end - begin;
  Tensor<Real> out(with_last(xv.shape(), width));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xv.data() + r * cols + begin, width, out.data() + r * width);
  }
  Var<Real> xc = x;
  return make_result<Real>(std::move(out), {x}, [xc, begin, width](const Tensor<Real>& g) {
    const std::size_t rows = g.rows(), cols = xc.value().cols();
    Tensor<Real> gx(xc.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(g.data() + r * width, width, gx.data() + r * cols + begin);
    }
    accumulate_grad(*xc.node(), gx);
  });
}

template <typename Real>
Var<Real> rotary(const Var<Real>& x, std::size_t n_heads, double base) {
  require_rank2(x, "rotary");
  const std::size_t len = x.value().dim(0), d = x.value().dim(1);
  if (n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0) {
    throw DimensionError("rotary: width " + std::to_string(d) + " does not split into " +
                         std::to_string(n_heads) + " even-width heads");
  }
  const std::size_t dh = d / n_heads, half = dh / 2;
  // cos/sin table [len, half], shared by all heads.
  std::vector<Real> cos_t(len * half), sin_t(len * half);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t j = 0; j < half; ++j) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(dh));
      const double angle = static_cast<double>(pos) * freq;
      cos_t[pos * half + j] = static_cast<Real>(std::cos(angle));
      sin_t[pos * half + j] = static_cast<Real>(std::sin(angle));
    }
  }
  auto rotate = [=](const Tensor<Real>& in, Real direction) {
    Tensor<Real> out(in.shape());
    for (std::size_t pos = 0; pos < len; ++pos) {
      for (std::size_t h = 0; h < n_heads; ++h) {
        const Real* src = in.data() + pos * d + h * dh;
        Real* dst = out.data() + pos * d + h * dh;
        for (std::size_t j = 0; j < half; ++j) {
          const Real c = cos_t[pos * half + j], s = direction * sin_t[pos * half + j];
          dst[j] = src[j] * c - src[j + half] * s;
          dst[j + half] = src[j] * s + src[j + half] * c;
        }
      }
    }
    return out;
  };
  Var<Real> xc = x;
  return make_result<Real>(rotate(x.value(), Real(1)), {x}, [xc, rotate](const Tensor<Real>& g) {
    accumulate_grad(*xc.node(), rotate(g, Real(-1)));
  });
}

template <typename Real>
Var<Real> attention(const Var<Real>& q, const Var<Real>& k, const Var<Real>& v,
                    std::size_t n_heads) {
  require_rank2(q, "attention");
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention: q " + shape_to_string(q.shape()) + ", k " +
                         shape_to_string(k.shape()) + ", v " + shape_to_string(v.shape()));
  }
  const std::size_t len = q.value().dim(0), d = q.value().dim(1);
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible into " +
                         std::to_string(n_heads) + " heads");
  }
  const auto dh = static_cast<Eigen::Index>(d / n_heads);
  const auto L = static_cast<Eigen::Index>(len);
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
  const bool record = should_record<Real>({&q, &k, &v});

  Tensor<Real> out(q.shape());
  std::vector<Tensor<Real>> probs;  // per head [L, L], kept only when recording
  constexpr Eigen::Index kBlock = 128;
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * static_cast<std::size_t>(dh);
    ConstStridedMap<Real> qh(q.value().data() + off, L, dh, stride);
    ConstStridedMap<Real> kh(k.value().data() + off, L, dh, stride);
    ConstStridedMap<Real> vh(v.value().data() + off, L, dh, stride);
    StridedMap<Real> oh(out.data() + off, L, dh, stride);
    if (record) probs.emplace_back(Shape{len, len});
    RowMat<Real> scores;
    for (Eigen::Index r0 = 0; r0 < L; r0 += kBlock) {
      const Eigen::Index rows = std::min(kBlock, L - r0);
      scores.noalias() = (qh.middleRows(r0, rows) * kh.transpose()) * scale;
      for (Eigen::Index r = 0; r < rows; ++r) {
        auto row = scores.row(r).array();
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
      }
      oh.middleRows(r0, rows).noalias() = scores * vh;
      if (record) {
        MatMap<Real>(probs.back().data(), L, L).middleRows(r0, rows) = scores;
      }
    }
  }
  ensure_finite(out, "attention");
  if (!record) return Var<Real>(std::move(out));

  Var<Real> qc = q, kc = k, vc = v;
  return make_result<Real>(std::move(out), {q, k, v},
      [qc, kc, vc, probs = std::move(probs), n_heads, scale](const Tensor<Real>& g) {
        const std::size_t len = qc.value().dim(0), d = qc.value().dim(1);
        const auto dh = static_cast<Eigen::Index>(d / n_heads);
        const auto L = static_cast<Eigen::Index>(len);
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
        Tensor<Real> gq(qc.shape()), gk(kc.shape()), gv(vc.shape());
        RowMat<Real> dp, ds;
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * static_cast<std::size_t>(dh);
          ConstStridedMap<Real> qh(qc.value().data() + off, L, dh, stride);
          ConstStridedMap<Real> kh(kc.value().data() + off, L, dh, stride);
          ConstStridedMap<Real> vh(vc.value().data() + off, L, dh, stride);
          ConstStridedMap<Real> goh(g.data() + off, L, dh, stride);
          ConstMatMap<Real> p(probs[h].data(), L, L);
          StridedMap<Real>(gv.data() + off, L, dh, stride).noalias() = p.transpose() * goh;
          dp.noalias() = goh * vh.transpose();
          ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
          StridedMap<Real>(gq.data() + off, L, dh, stride).noalias() = (ds * kh) * scale;
          StridedMap<Real>(gk.data() + off, L, dh, stride).noalias() = (ds.transpose() * qh) * scale;
        }
        if (qc.requires_grad()) accumulate_grad(*qc.node(), gq);
        if (kc.requires_grad()) accumulate_grad(*kc.node(), gk);
        if (vc.requires_grad()) accumulate_grad(*vc.node(), gv);
      });
}

template <typename Real>
Var<Real> selective_state_scan(const Var<Real>& decay, const Var<Real>& drive,
                               const Var<Real>& b, const Var<Real>& c) {
  require_rank2(decay, "selective_state_scan");
  require_rank2(b, "selective_state_scan");
  if (decay.shape() != drive.shape() || b.shape() != c.shape() ||
      decay.value().dim(0) != b.value().dim(0)) {
    throw DimensionError("selective_state_scan: decay " + shape_to_string(decay.shape()) +
                         ", drive " + shape_to_string(drive.shape()) + ", b " +
                         shape_to_string(b.shape()) + ", c " + shape_to_string(c.shape()));
  }
  const std::size_t len = decay.value().dim(0), d = decay.value().dim(1), ns = b.value().dim(1);
  const bool record = should_record<Real>({&decay, &drive, &b, &c});
  const Real* av = decay.value().data();
  const Real* uv = drive.value().data();
  const Real* bv = b.value().data();
  const Real* cv = c.value().data();

  // State and history are laid out [N, d] per position so every inner loop
  // runs over contiguous channels. The readout still sums n = 0..N-1 in order.
  using Row = Eigen::Array<Real, 1, Eigen::Dynamic>;
  using RowMap = Eigen::Map<Row>;
  using ConstRowMap = Eigen::Map<const Row>;
  const auto de = static_cast<Eigen::Index>(d);
  Tensor<Real> out(decay.shape());
  AlignedVector<Real> state(ns * d, Real(0));
  AlignedVector<Real> history;  // h_1..h_L as [L, N, d], kept only when recording
  if (record) history.resize(len * ns * d);
  for (std::size_t i = 0; i < len; ++i) {
    ConstRowMap a(av + i * d, de), u(uv + i * d, de);
    RowMap y(out.data() + i * d, de);
    for (std::size_t n = 0; n < ns; ++n) {
      RowMap h(state.data() + n * d, de);
      h = a * h + u * bv[i * ns + n];
      y += cv[i * ns + n] * h;
    }
    if (record) std::copy(state.begin(), state.end(), history.begin() + static_cast<std::ptrdiff_t>(i * ns * d));
  }
  ensure_finite(out, "selective_state_scan");
  if (!record) return Var<Real>(std::move(out));

  Var<Real> ac = decay, uc = drive, bc = b, cc = c;
  return make_result<Real>(std::move(out), {decay, drive, b, c},
      [ac, uc, bc, cc, history = std::move(history)](const Tensor<Real>& g) {
        const std::size_t len = ac.value().dim(0), d = ac.value().dim(1), ns = bc.value().dim(1);
        const auto de = static_cast<Eigen::Index>(d);
        const Real* av = ac.value().data();
        const Real* uv = uc.value().data();
        const Real* bv = bc.value().data();
        const Real* cv = cc.value().data();
        Tensor<Real> ga(ac.shape()), gu(uc.shape()), gb(bc.shape()), gc(cc.shape());
        AlignedVector<Real> adj(ns * d, Real(0));  // adjoint of h_i, carried backwards
        Row s(de);
        for (std::size_t i = len; i-- > 0;) {
          ConstRowMap a(av + i * d, de), u(uv + i * d, de), gy(g.data() + i * d, de);
          RowMap da(ga.data() + i * d, de), du(gu.data() + i * d, de);
          for (std::size_t n = 0; n < ns; ++n) {
            ConstRowMap h(history.data() + (i * ns + n) * d, de);
            RowMap adj_n(adj.data() + n * d, de);
            gc[i * ns + n] += (gy * h).sum();
            s = adj_n + gy * cv[i * ns + n];
            if (i > 0) da += s * ConstRowMap(history.data() + ((i - 1) * ns + n) * d, de);
            du += s * bv[i * ns + n];
            gb[i * ns + n] += (s * u).sum();
            adj_n = s * a;
          }
        }
        if (ac.requires_grad()) accumulate_grad(*ac.node(), ga);
        if (uc.requires_grad()) accumulate_grad(*uc.node(), gu);
        if (bc.requires_grad()) accumulate_grad(*bc.node(), gb);
        if (cc.requires_grad()) accumulate_grad(*cc.node(), gc);
      });
}

template <typename Real>
Var<Real> depthwise_conv1d(const Var<Real>& x, const Var<Real>& w, bool causal) {
  require_rank2(x, "depthwise_conv1d");
  require_rank2(w, "depthwise_conv1d");
  const std::size_t len = x.value().dim(0), d = x.value().dim(1), width = w.value().dim(0);
  if (w.value().dim(1) != d) {
    throw DimensionError("depthwise_conv1d: input " + shape_to_string(x.shape()) +
                         " and kernel " + shape_to_string(w.shape()));
  }
  // Source row for output row i and tap j, or -1 when it falls off the edge.
  auto source = [len, causal](std::size_t i, std::size_t j) -> std::ptrdiff_t {
    const auto src = causal ? static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(j)
                            : static_cast<std::ptrdiff_t>(i + j);
    return (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) ? -1 : src;
  };
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      const auto src = source(i, j);
      if (src < 0) continue;
      for (std::size_t ch = 0; ch < d; ++ch) {
        out[i * d + ch] += w.value()[j * d + ch] * x.value()[static_cast<std::size_t>(src) * d + ch];
      }
    }
  }
  ensure_finite(out, "depthwise_conv1d");
  Var<Real> xc = x, wc = w;
  return make_result<Real>(std::move(out), {x, w}, [xc, wc, source](const Tensor<Real>& g) {
    const std::size_t len = xc.value().dim(0), d = xc.value().dim(1), width = wc.value().dim(0);
    Tensor<Real> gx(xc.shape()), gw(wc.shape());
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = 0; j < width; ++j) {
        const auto src = source(i, j);
        if (src < 0) continue;
        const auto s = static_cast<std::size_t>(src);
        for (std::size_t ch = 0; ch < d; ++ch) {
          gx[s * d + ch] += g[i * d + ch] * wc.value()[j * d + ch];
          gw[j * d + ch] += g[i * d + ch] * xc.value()[s * d + ch];
        }
      }
    }
    if (xc.requires_grad()) accumulate_grad(*xc.node(), gx);
    if (wc.requires_grad()) accumulate_grad(*wc.node(), gw);
  });
}

#define DIFFLAB_INSTANTIATE_OPS(Real)                                                         \
  template Var<Real> affine<Real>(const Var<Real>&, const Var<Real>&, const Var<Real>&);      \
  template Var<Real> softmax<Real>(const Var<Real>&);                                         \
  template Var<Real> layer_normalize<Real>(const Var<Real>&, double);                         \
  template Var<Real> linear_recurrence_scan<Real>(const Var<Real>&, const Var<Real>&,         \
                                                  const Var<Real>&);                          \
  template Var<Real> elementwise<Real>(Elementwise, const Var<Real>&);                        \
  template Var<Real> elementwise<Real>(Elementwise, const Var<Real>&, const Var<Real>&);      \
  template Var<Real> scale_shift<Real>(const Var<Real>&, double, double);                     \
  template Var<Real> cross_entropy<Real>(const Var<Real>&, std::span<const std::int32_t>);    \
  template Var<Real> weighted_sum<Real>(const Var<Real>&, std::span<const double>);           \
  template Var<Real> sum<Real>(const Var<Real>&);                                             \
  template Var<Real> embedding<Real>(const Var<Real>&, std::span<const std::int32_t>);        \
  template Var<Real> reverse_rows<Real>(const Var<Real>&);                                    \
  template Var<Real> slice_cols<Real>(const Var<Real>&, std::size_t, std::size_t);            \
  template Var<Real> rotary<Real>(const Var<Real>&, std::size_t, double);                     \
  template Var<Real> attention<Real>(const Var<Real>&, const Var<Real>&, const Var<Real>&,    \
                                     std::size_t);                                            \
  template Var<Real> selective_state_scan<Real>(const Var<Real>&, const Var<Real>&,           \
                                                const Var<Real>&, const Var<Real>&);          \
  template Var<Real> depthwise_conv1d<Real>(const Var<Real>&, const Var<Real>&, bool);

DIFFLAB_INSTANTIATE_OPS(float)
DIFFLAB_INSTANTIATE_OPS(double)

#undef DIFFLAB_INSTANTIATE_OPS

}  // namespace difflab::ops
