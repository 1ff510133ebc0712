#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ibprune/rng.hpp"
#include "ibprune/tensor.hpp"

// Differentiable tensor operations. Every op records itself on the active
// tape when at least one input requires grad; otherwise it is a plain value
// computation.
namespace ibprune {

// Elementwise binary ops with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
/// x^p elementwise; non-integer p requires x > 0.
Tensor pow_scalar(const Tensor& x, double p);
Tensor neg(const Tensor& x);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& x);

/// Surrogate gradient used where clamp is not differentiable.
enum class ClampGrad {
  kZero,         // zero gradient outside [lo, hi]
  kPassThrough,  // identity gradient everywhere (straight-through)
};
Tensor clamp(const Tensor& x, double lo, double hi, ClampGrad grad_rule);

/// Forward value of `hard` (treated as a constant), gradient routed to `soft`.
Tensor straight_through(const Tensor& hard, const Tensor& soft);

/// Batched matrix product over the last two axes; batch axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swap the last two axes.
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
/// outer(a, b)[i, j] = a[i] * b[j] for vectors a, b.
Tensor outer(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);
/// Sum of squares of all entries.
Tensor frobenius_sq(const Tensor& x);

Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x, int axis = -1);

/// Renormalized attention weights along the last axis:
///   out_ij = M_ij exp(s_ij) / sum_k M_ik exp(s_ik).
/// Rows whose mask is identically zero produce zero rows. When `query_kept` is
/// supplied, such a row at a kept query raises ContractError.
Tensor masked_softmax(const Tensor& scores, const Tensor& mask,
                      std::span<const bool> query_kept = {});

/// Normalization over the last axis followed by the affine map gain * x + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon = 1e-12);

/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Rows of x (axis 0) at `indices`.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);
/// Inverse of gather_rows: rows of `src` placed at `indices` of a zero tensor
/// with `num_rows` rows. Indices must be distinct.
Tensor scatter_rows(const Tensor& src, std::span<const std::size_t> indices, std::size_t num_rows);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Slice [start, start + length) of `axis`.
Tensor narrow(const Tensor& x, int axis, std::size_t start, std::size_t length);
/// Rows of `table` selected by token ids; ids must be < table rows.
Tensor embedding(const Tensor& table, std::span<const int> ids);

/// Inverted dropout; identity when rate == 0.
Tensor dropout(const Tensor& x, double rate, Rng& rng);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace ibprune
