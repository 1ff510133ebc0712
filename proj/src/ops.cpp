#include "ibprune/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "ibprune/errors.hpp"

namespace ibprune {

namespace {

using Impl = detail::TensorImpl;
using ImplPtr = std::shared_ptr<Impl>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Tape* recording(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = Tape::active();
  if (!tape) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return tape;
  }
  return nullptr;
}

Tensor finish(std::string_view op, Shape shape, std::vector<double> data) {
  if (nan_guard_enabled()) {
    for (double v : data) {
      if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
    }
  }
  return Tensor(std::move(shape), std::move(data));
}

void require_defined(const Tensor& t, std::string_view op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

std::size_t normalize_axis(int axis, std::size_t rank, std::string_view op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<std::size_t> a_index, b_index;
};

Broadcast broadcast(const Shape& a, const Shape& b, std::string_view op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  bc.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_to_string(a) + " with " +
                       shape_to_string(b));
    }
    bc.out[i] = std::max(pa[i], pb[i]);
  }
  // Strides of a and b in the padded frame, zero along broadcast axes.
  std::vector<std::size_t> sa(r, 0), sb(r, 0);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t i = r; i-- > 0;) {
    sa[i] = pa[i] == 1 ? 0 : acc_a;
    sb[i] = pb[i] == 1 ? 0 : acc_b;
    acc_a *= pa[i];
    acc_b *= pb[i];
  }
  const std::size_t n = shape_numel(bc.out);
  bc.a_index.resize(n);
  bc.b_index.resize(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t k = 0; k < n; ++k) {
    bc.a_index[k] = ia;
    bc.b_index[k] = ib;
    for (std::size_t i = r; i-- > 0;) {
      ++counter[i];
      ia += sa[i];
      ib += sb[i];
      if (counter[i] < bc.out[i]) break;
      ia -= sa[i] * counter[i];
      ib -= sb[i] * counter[i];
      counter[i] = 0;
    }
  }
  return bc;
}

template <typename Fwd, typename Da, typename Db>
Tensor binary_op(std::string_view op, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  require_defined(a, op);
  require_defined(b, op);
  auto bc = broadcast(a.shape(), b.shape(), op);
  const std::size_t n = shape_numel(bc.out);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(n);
  if (bc.same) {
    for (std::size_t k = 0; k < n; ++k) out[k] = fwd(ad[k], bd[k]);
  } else {
    for (std::size_t k = 0; k < n; ++k) out[k] = fwd(ad[bc.a_index[k]], bd[bc.b_index[k]]);
  }
  Tensor result = finish(op, bc.out, std::move(out));
  if (Tape* tape = recording({&a, &b})) {
    ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr();
    auto idx = std::make_shared<Broadcast>(std::move(bc));
    tape->record(op, {ai, bi}, oi, [ai, bi, oi, idx, da, db] {
      const auto& g = oi->grad;
      const std::size_t n = g.size();
      auto ia = [&](std::size_t k) { return idx->same ? k : idx->a_index[k]; };
      auto ib = [&](std::size_t k) { return idx->same ? k : idx->b_index[k]; };
      if (ai->requires_grad) {
        auto ga = ai->grad_buffer();
        for (std::size_t k = 0; k < n; ++k) {
          ga[ia(k)] += g[k] * da(ai->data[ia(k)], bi->data[ib(k)], oi->data[k]);
        }
      }
      if (bi->requires_grad) {
        auto gb = bi->grad_buffer();
        for (std::size_t k = 0; k < n; ++k) {
          gb[ib(k)] += g[k] * db(ai->data[ia(k)], bi->data[ib(k)], oi->data[k]);
        }
      }
    });
  }
  return result;
}

// Elementwise unary op; `deriv(x, y)` is dy/dx given input x and output y.
template <typename Fwd, typename Deriv>
Tensor unary_op(std::string_view op, const Tensor& x, Fwd fwd, Deriv deriv) {
  require_defined(x, op);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t k = 0; k < xd.size(); ++k) out[k] = fwd(xd[k]);
  Tensor result = finish(op, x.shape(), std::move(out));
  if (Tape* tape = recording({&x})) {
    ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
    tape->record(op, {xi}, oi, [xi, oi, deriv] {
      auto gx = xi->grad_buffer();
      const auto& g = oi->grad;
      for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * deriv(xi->data[k], oi->data[k]);
    });
  }
  return result;
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      "add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary_op(
      "mul_scalar", x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor pow_scalar(const Tensor& x, double p) {
  return unary_op(
      "pow_scalar", x, [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary_op(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor clamp(const Tensor& x, double lo, double hi, ClampGrad grad_rule) {
  if (grad_rule == ClampGrad::kPassThrough) {
    return unary_op(
        "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [](double, double) { return 1.0; });
  }
  return unary_op(
      "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  require_defined(hard, "straight_through");
  require_defined(soft, "straight_through");
  if (hard.shape() != soft.shape()) {
    throw ShapeError("straight_through: hard " + shape_to_string(hard.shape()) + " vs soft " +
                     shape_to_string(soft.shape()));
  }
  const auto hd = hard.data();
  Tensor result = finish("straight_through", hard.shape(), {hd.begin(), hd.end()});
  if (Tape* tape = recording({&soft})) {
    ImplPtr si = soft.impl_ptr(), oi = result.impl_ptr();
    tape->record("straight_through", {si}, oi, [si, oi] {
      auto gs = si->grad_buffer();
      for (std::size_t k = 0; k < gs.size(); ++k) gs[k] += oi->grad[k];
    });
  }
  return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw ShapeError("matmul: dimension mismatch between " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Broadcast bc;
  try {
    bc = broadcast(a_batch, b_batch, "matmul");
  } catch (const ShapeError&) {
    throw ShapeError("matmul: batch dimensions of " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()) + " do not broadcast");
  }
  const std::size_t batches = shape_numel(bc.out);
  Shape out_shape = bc.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batches * m * n, 0.0);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  auto a_batch_of = [bc](std::size_t t) { return bc.same ? t : bc.a_index[t]; };
  auto b_batch_of = [bc](std::size_t t) { return bc.same ? t : bc.b_index[t]; };
  for (std::size_t t = 0; t < batches; ++t) {
    MutMap c(out.data() + t * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    c.noalias() = ConstMap(ad + a_batch_of(t) * m * k, static_cast<Eigen::Index>(m),
                           static_cast<Eigen::Index>(k)) *
                  ConstMap(bd + b_batch_of(t) * k * n, static_cast<Eigen::Index>(k),
                           static_cast<Eigen::Index>(n));
  }
  Tensor result = finish("matmul", std::move(out_shape), std::move(out));
  if (Tape* tape = recording({&a, &b})) {
    ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr(), oi = result.impl_ptr();
    tape->record("matmul", {ai, bi}, oi, [ai, bi, oi, m, k, n, batches, a_batch_of, b_batch_of] {
      const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k),
                 N = static_cast<Eigen::Index>(n);
      for (std::size_t t = 0; t < batches; ++t) {
        ConstMap gc(oi->grad.data() + t * m * n, M, N);
        const std::size_t ta = a_batch_of(t), tb = b_batch_of(t);
        if (ai->requires_grad) {
          MutMap ga(ai->grad_buffer().data() + ta * m * k, M, K);
          ga.noalias() += gc * ConstMap(bi->data.data() + tb * k * n, K, N).transpose();
        }
        if (bi->requires_grad) {
          MutMap gb(bi->grad_buffer().data() + tb * k * n, K, N);
          gb.noalias() += ConstMap(ai->data.data() + ta * m * k, M, K).transpose() * gc;
        }
      }
    });
  }
  return result;
}

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_to_string(x.shape()));
  const std::size_t r = x.dim(-2), c = x.dim(-1);
  const std::size_t batches = x.numel() / (r * c == 0 ? 1 : r * c);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t t = 0; t < batches; ++t) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[t * r * c + j * r + i] = xd[t * r * c + i * c + j];
    }
  }
  Tensor result = finish("transpose", std::move(shape), std::move(out));
  if (Tape* tape = recording({&x})) {
    ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
    tape->record("transpose", {xi}, oi, [xi, oi, r, c, batches] {
      auto gx = xi->grad_buffer();
      for (std::size_t t = 0; t < batches; ++t) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            gx[t * r * c + i * c + j] += oi->grad[t * r * c + j * r + i];
          }
        }
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                     shape_to_string(shape));
  }
  const auto xd = x.data();
  Tensor result = finish("reshape", std::move(shape), {xd.begin(), xd.end()});
  if (Tape* tape = recording({&x})) {
    ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
    tape->record("reshape", {xi}, oi, [xi, oi] {
      auto gx = xi->grad_buffer();
      for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += oi->grad[k];
    });
  }
  return result;
}

Tensor outer(const Tensor& a, const Tensor& b) {
  if (a.rank() != 1 || b.rank() != 1) {
    throw ShapeError("outer needs vectors, got " + shape_to_string(a.shape()) + " and " +
                     shape_to_string(b.shape()));
  }
  return mul(reshape(a, {a.numel(), 1}), reshape(b, {1, b.numel()}));
}

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor result = finish("sum", {}, {total});
  if (Tape* tape = recording({&x})) {
    ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
    tape->record("sum", {xi}, oi, [xi, oi] {
      auto gx = xi->grad_buffer();
      const double g = oi->grad[0];
      for (auto& v : gx) v += g;
    });
  }
  return result;
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  require_defined(x, "sum");
  const std::size_t ax = normalize_axis(axis, x.rank(), "sum");
  const AxisSplit s = split_axis(x.shape(), ax);
  Shape shape = x.shape();
  if (keepdim) {
    shape[ax] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const auto xd = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.n; ++i) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        out[o * s.inner + in] += xd[(o * s.n + i) * s.inner + in];
      }
    }
  }
  Tensor result = finish("sum_axis", std::move(shape), std::move(out));
  if (Tape* tape = recording({&x})) {
    ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
    tape->record("sum_axis", {xi}, oi, [xi, oi, s] {
      auto gx = xi->grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.n; ++i) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            gx[(o * s.n + i) * s.inner + in] += oi->grad[o * s.inner + in];
          }
        }
      }
    });
  }
  return result;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const std::size_t n = x.dim(axis);
  if (n == 0) throw ShapeError("mean over an empty axis");
  return mul_scalar(sum(x, axis, keepdim), 1.0 / static_cast<double>(n));
}

Tensor frobenius_sq(const Tensor& x) {
  require_defined(x, "frobenius_sq");
  double total = 0.0;
  for (double v : x.data()) total += v * v;
  Tensor result = finish("frobenius_sq", {}, {total});
  if (Tape* tape = recording({&x})) {
    ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
    tape->record("frobenius_sq", {xi}, oi, [xi, oi] {
      auto gx = xi->grad_buffer();
      const double g = 2.0 * oi->grad[0];
      for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += g * xi->data[k];
    });
  }
  return result;
}

namespace {

Tensor softmax_impl(const Tensor& x, int axis, bool take_log) {
  const std::string_view op = take_log ? "log_softmax" : "softmax";
  require_defined(x, op);
  const std::size_t ax = normalize_axis(axis, x.rank(), op);
  const AxisSplit s = split_axis(x.shape(), ax);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      auto at = [&](std::size_t i) { return (o * s.n + i) * s.inner + in; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < s.n; ++i) mx = std::max(mx, xd[at(i)]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.n; ++i) z += std::exp(xd[at(i)] - mx);
      const double log_z = std::log(z);
      for (std::size_t i = 0; i < s.n; ++i) {
        const double shifted = xd[at(i)] - mx;
        out[at(i)] = take_log ? shifted - log_z : std::exp(shifted) / z;
      }
    }
  }
  Tensor result = finish(op, x.shape(), std::move(out));
  if (Tape* tape = recording({&x})) {
    ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
    tape->record(op, {xi}, oi, [xi, oi, s, take_log] {
      auto gx = xi->grad_buffer();
      const auto& g = oi->grad;
      const auto& y = oi->data;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          auto at = [&](std::size_t i) { return (o * s.n + i) * s.inner + in; };
          if (take_log) {
            double gsum = 0.0;
            for (std::size_t i = 0; i < s.n; ++i) gsum += g[at(i)];
            for (std::size_t i = 0; i < s.n; ++i) gx[at(i)] += g[at(i)] - std::exp(y[at(i)]) * gsum;
          } else {
            double dot = 0.0;
            for (std::size_t i = 0; i < s.n; ++i) dot += g[at(i)] * y[at(i)];
            for (std::size_t i = 0; i < s.n; ++i) gx[at(i)] += y[at(i)] * (g[at(i)] - dot);
          }
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) { return softmax_impl(x, axis, false); }
Tensor log_softmax(const Tensor& x, int axis) { return softmax_impl(x, axis, true); }

Tensor masked_softmax(const Tensor& scores, const Tensor& mask, std::span<const bool> query_kept) {
  require_defined(scores, "masked_softmax");
  require_defined(mask, "masked_softmax");
  if (scores.shape() != mask.shape() || scores.rank() < 1) {
    throw ShapeError("masked_softmax: scores " + shape_to_string(scores.shape()) + " vs mask " +
                     shape_to_string(mask.shape()));
  }
  const std::size_t n = scores.dim(-1);
  const std::size_t rows = n == 0 ? 0 : scores.numel() / n;
  if (!query_kept.empty() && query_kept.size() != rows) {
    throw ShapeError("masked_softmax: query_kept has " + std::to_string(query_kept.size()) +
                     " entries for " + std::to_string(rows) + " rows");
  }
  const auto sd = scores.data();
  const auto md = mask.data();
  std::vector<double> out(sd.size(), 0.0);
  // Per-row normalizer D and the shifted exponentials R; both are needed for
  // the mask gradient.
  auto r_vals = std::make_shared<std::vector<double>>(sd.size(), 0.0);
  auto denom = std::make_shared<std::vector<double>>(rows, 0.0);
  for (std::size_t row = 0; row < rows; ++row) {
    const std::size_t base = row * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (md[base + j] != 0.0) mx = std::max(mx, sd[base + j]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      if (!query_kept.empty() && query_kept[row]) {
        throw ContractError("masked_softmax: query row " + std::to_string(row) +
                            " is kept but has no unmasked key");
      }
      continue;
    }
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double r = std::exp(sd[base + j] - mx);
      (*r_vals)[base + j] = r;
      d += md[base + j] * r;
    }
    (*denom)[row] = d;
    for (std::size_t j = 0; j < n; ++j) out[base + j] = md[base + j] * (*r_vals)[base + j] / d;
  }
  Tensor result = finish("masked_softmax", scores.shape(), std::move(out));
  if (Tape* tape = recording({&scores, &mask})) {
    ImplPtr si = scores.impl_ptr(), mi = mask.impl_ptr(), oi = result.impl_ptr();
    tape->record("masked_softmax", {si, mi}, oi, [si, mi, oi, r_vals, denom, n, rows] {
      const auto& g = oi->grad;
      const auto& y = oi->data;
      for (std::size_t row = 0; row < rows; ++row) {
        const double d = (*denom)[row];
        if (d == 0.0) continue;
        const std::size_t base = row * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j] * y[base + j];
        if (si->requires_grad) {
          auto gs = si->grad_buffer();
          for (std::size_t j = 0; j < n; ++j) gs[base + j] += y[base + j] * (g[base + j] - dot);
        }
        if (mi->requires_grad) {
          auto gm = mi->grad_buffer();
          for (std::size_t j = 0; j < n; ++j) {
            gm[base + j] += (*r_vals)[base + j] / d * (g[base + j] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon) {
  require_defined(x, "layer_norm");
  if (epsilon <= 0.0) throw ContractError("layer_norm: epsilon must be positive");
  if (x.rank() < 1) throw ShapeError("layer_norm needs rank >= 1");
  const std::size_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain/bias " + shape_to_string(gain.shape()) + "/" +
                     shape_to_string(bias.shape()) + " for input " + shape_to_string(x.shape()));
  }
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xd[base + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xd[base + j] - mu) * (xd[base + j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + epsilon);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xd[base + j] - mu) * is;
      (*xhat)[base + j] = h;
      out[base + j] = gd[j] * h + bd[j];
    }
  }
  Tensor result = finish("layer_norm", x.shape(), std::move(out));
  if (Tape* tape = recording({&x, &gain, &bias})) {
    ImplPtr xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = bias.impl_ptr(), oi = result.impl_ptr();
    tape->record("layer_norm", {xi, gi, bi}, oi, [xi, gi, bi, oi, xhat, inv_std, d, rows] {
      const auto& g = oi->grad;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * d;
        if (gi->requires_grad) {
          auto gg = gi->grad_buffer();
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[base + j] * (*xhat)[base + j];
        }
        if (bi->requires_grad) {
          auto gb = bi->grad_buffer();
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[base + j];
        }
        if (xi->requires_grad) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = g[base + j] * gi->data[j];
            mean_dh += dh;
            mean_dh_h += dh * (*xhat)[base + j];
          }
          mean_dh /= static_cast<double>(d);
          mean_dh_h /= static_cast<double>(d);
          auto gx = xi->grad_buffer();
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = g[base + j] * gi->data[j];
            gx[base + j] += (*inv_std)[r] * (dh - mean_dh - (*xhat)[base + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy expects [batch, K] logits, got " + shape_to_string(logits.shape()));
  }
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  if (labels.size() != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw IndexError("cross_entropy: label " + std::to_string(label) + " outside [0," +
                       std::to_string(k) + ")");
    }
  }
  Tensor logp = log_softmax(logits, -1);
  std::vector<double> pick(batch * k, 0.0);
  for (std::size_t b = 0; b < batch; ++b) pick[b * k + static_cast<std::size_t>(labels[b])] = 1.0;
  return mul_scalar(sum(mul(logp, Tensor({batch, k}, std::move(pick)))),
                    -1.0 / static_cast<double>(batch));
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  require_defined(x, "gather_rows");
  if (x.rank() < 1) throw ShapeError("gather_rows needs rank >= 1");
  const std::size_t rows = x.dim(0);
  const std::size_t width = rows == 0 ? 0 : x.numel() / rows;
  for (std::size_t i : indices) {
    if (i >= rows) {
      throw IndexError("gather_rows: index " + std::to_string(i) + " >= " + std::to_string(rows));
    }
  }
  Shape shape = x.shape();
  shape[0] = indices.size();
  const auto xd = x.data();
  std::vector<double> out(indices.size() * width);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(indices[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  Tensor result = finish("gather_rows", std::move(shape), std::move(out));
  if (Tape* tape = recording({&x})) {
    ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
    auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
    tape->record("gather_rows", {xi}, oi, [xi, oi, idx, width] {
      auto gx = xi->grad_buffer();
      for (std::size_t r = 0; r < idx->size(); ++r) {
        for (std::size_t c = 0; c < width; ++c) gx[(*idx)[r] * width + c] += oi->grad[r * width + c];
      }
    });
  }
  return result;
}

Tensor scatter_rows(const Tensor& src, std::span<const std::size_t> indices, std::size_t num_rows) {
  require_defined(src, "scatter_rows");
  if (src.rank() < 1 || src.dim(0) != indices.size()) {
    throw ShapeError("scatter_rows: " + std::to_string(indices.size()) + " indices for source " +
                     shape_to_string(src.shape()));
  }
  const std::size_t width = indices.empty() ? 0 : src.numel() / indices.size();
  std::vector<bool> seen(num_rows, false);
  for (std::size_t i : indices) {
    if (i >= num_rows) {
      throw IndexError("scatter_rows: index " + std::to_string(i) + " >= " + std::to_string(num_rows));
    }
    if (seen[i]) throw ContractError("scatter_rows: duplicate target row " + std::to_string(i));
    seen[i] = true;
  }
  Shape shape = src.shape();
  shape[0] = num_rows;
  const std::size_t row_width = src.rank() == 1 ? 1 : shape_numel(Shape(shape.begin() + 1, shape.end()));
  const auto sd = src.data();
  std::vector<double> out(num_rows * row_width, 0.0);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(sd.begin() + static_cast<std::ptrdiff_t>(r * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(indices[r] * row_width));
  }
  Tensor result = finish("scatter_rows", std::move(shape), std::move(out));
  if (Tape* tape = recording({&src})) {
    ImplPtr si = src.impl_ptr(), oi = result.impl_ptr();
    auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
    tape->record("scatter_rows", {si}, oi, [si, oi, idx, width] {
      auto gs = si->grad_buffer();
      for (std::size_t r = 0; r < idx->size(); ++r) {
        for (std::size_t c = 0; c < width; ++c) gs[r * width + c] += oi->grad[(*idx)[r] * width + c];
      }
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  for (const auto& p : parts) require_defined(p, "concat");
  const std::size_t ax = normalize_axis(axis, parts.front().rank(), "concat");
  Shape shape = parts.front().shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = shape;
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch");
    a[ax] = b[ax] = 0;
    if (a != b) {
      throw ShapeError("concat: incompatible shapes " + shape_to_string(p.shape()) + " and " +
                       shape_to_string(parts.front().shape()));
    }
    total += p.shape()[ax];
  }
  shape[ax] = total;
  const AxisSplit s = split_axis(shape, ax);
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t np = p.shape()[ax];
    const auto pd = p.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * np * s.inner), np * s.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * s.n + offset) * s.inner));
    }
    offset += np;
  }
  Tensor result = finish("concat", std::move(shape), std::move(out));
  Tape* tape = nullptr;
  for (const auto& p : parts) {
    if (Tape* t = recording({&p})) tape = t;
  }
  if (tape) {
    std::vector<ImplPtr> inputs;
    for (const auto& p : parts) inputs.push_back(p.impl_ptr());
    ImplPtr oi = result.impl_ptr();
    tape->record("concat", inputs, oi, [inputs, oi, offsets, s, ax] {
      for (std::size_t p = 0; p < inputs.size(); ++p) {
        if (!inputs[p]->requires_grad) continue;
        auto gp = inputs[p]->grad_buffer();
        const std::size_t np = inputs[p]->shape[ax];
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t k = 0; k < np * s.inner; ++k) {
            gp[o * np * s.inner + k] += oi->grad[(o * s.n + offsets[p]) * s.inner + k];
          }
        }
      }
    });
  }
  return result;
}

Tensor narrow(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  require_defined(x, "narrow");
  const std::size_t ax = normalize_axis(axis, x.rank(), "narrow");
  if (start + length > x.shape()[ax]) {
    throw ShapeError("narrow: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") exceeds axis of size " + std::to_string(x.shape()[ax]));
  }
  const AxisSplit s = split_axis(x.shape(), ax);
  Shape shape = x.shape();
  shape[ax] = length;
  const auto xd = x.data();
  std::vector<double> out(s.outer * length * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((o * s.n + start) * s.inner),
                length * s.inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
  }
  Tensor result = finish("narrow", std::move(shape), std::move(out));
  if (Tape* tape = recording({&x})) {
    ImplPtr xi = x.impl_ptr(), oi = result.impl_ptr();
    tape->record("narrow", {xi}, oi, [xi, oi, s, start, length] {
      auto gx = xi->grad_buffer();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t k = 0; k < length * s.inner; ++k) {
          gx[(o * s.n + start) * s.inner + k] += oi->grad[o * length * s.inner + k];
        }
      }
    });
  }
  return result;
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_defined(table, "embedding");
  if (table.rank() != 2) throw ShapeError("embedding table must be [vocab, dim]");
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.dim(0)) {
      throw IndexError("embedding: token id " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside vocabulary of " + std::to_string(table.dim(0)));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return gather_rows(table, rows);
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout rate must be < 1");
  std::vector<double> keep(x.numel());
  for (auto& k : keep) k = rng.uniform() < rate ? 0.0 : 1.0 / (1.0 - rate);
  return mul(x, Tensor(x.shape(), std::move(keep)));
}

}  // namespace ibprune
