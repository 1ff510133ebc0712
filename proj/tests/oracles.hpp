#pragma once

#include <cmath>
#include <cstddef>

#include "ibprune/tensor.hpp"

namespace ibprune::testing {

/// sum_z P(z) ln P(z) over all 2^L outcomes of independent Bernoulli(pi_l)
/// token masks, i.e. the negative entropy of the product distribution.
inline double enumerated_negative_entropy(const Tensor& pi) {
  const std::size_t length = pi.numel();
  double total = 0.0;
  for (std::size_t outcome = 0; outcome < (std::size_t{1} << length); ++outcome) {
    double p = 1.0;
    for (std::size_t l = 0; l < length; ++l) p *= ((outcome >> l) & 1U) ? pi[l] : 1.0 - pi[l];
    if (p > 0.0) total += p * std::log(p);
  }
  return total;
}

/// Dense per-layer FLOPs of a pre-LN encoder layer counted term by term:
/// layer norms, projections, scores, softmax, context, GELU.
struct DenseLayerCount {
  unsigned long long mha = 0;
  unsigned long long ffn = 0;
};

inline DenseLayerCount hand_count_dense_layer(unsigned long long L, unsigned long long d, unsigned long long heads,
                                              unsigned long long ffn) {
  const unsigned long long dh = d / heads;
  DenseLayerCount c;
  const unsigned long long ln = 8 * L * d;
  const unsigned long long qkv = 3 * (2 * L * d * d);
  const unsigned long long scores = heads * (2 * L * L * dh);
  const unsigned long long soft = heads * 5 * L * L;
  const unsigned long long context = heads * (2 * L * L * dh);
  const unsigned long long out = 2 * L * d * d;
  c.mha = ln + qkv + scores + soft + context + out;
  c.ffn = ln + 2 * L * d * ffn + 10 * L * ffn + 2 * L * ffn * d;
  return c;
}

}  // namespace ibprune::testing
