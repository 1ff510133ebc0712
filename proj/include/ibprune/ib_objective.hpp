#pragma once

#include <optional>
#include <vector>

#include "ibprune/tensor.hpp"

namespace ibprune {

/// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] inside logs.
inline constexpr double kProbClamp = 1e-12;

struct LossWeights {
  double gamma1 = 0.0;  // entropy coefficient
  double gamma2 = 0.0;  // norm coefficient
  /// Single tradeoff both coefficients realize when set equal; informational.
  double beta = 0.0;
  /// Throws ConfigError on negative coefficients.
  void validate() const;
};

/// Scalar components of one training objective evaluation.
struct LossBreakdown {
  double ce = 0.0;
  double entropy = 0.0;
  double norm = 0.0;
  std::optional<double> skim;
  std::optional<double> l0;
  std::optional<double> distill;
  double total = 0.0;
};

/// Sum over layers and tokens of pi ln pi + (1 - pi) ln(1 - pi), the negative
/// entropy of the product-Bernoulli token masks. With `normalize` the sum is
/// divided by the number of entries (layers times tokens).
Tensor entropy_loss(const std::vector<Tensor>& keep_probs, bool normalize = true);

/// Sum over layers of 0.5 * ||diag(pi^i) h^i||_F^2; with `normalize` divided
/// by layers * tokens * hidden width. Gradients flow to pi and h.
Tensor norm_loss(const std::vector<Tensor>& hidden, const std::vector<Tensor>& keep_probs,
                 bool normalize = true);

/// Mean over layers of the mean keep probability (the token-ratio baseline).
Tensor skim_loss(const std::vector<Tensor>& keep_probs);

struct ObjectiveValue {
  Tensor total;
  LossBreakdown breakdown;
};

/// total = ce + gamma1 * entropy + gamma2 * norm.
ObjectiveValue ib_total(const Tensor& ce, const Tensor& entropy, const Tensor& norm, const LossWeights& weights);

/// Exact E_z[0.5 * ||diag(z) h||_F^2] for z ~ Bernoulli(pi) by enumerating all
/// 2^L outcomes. Throws ContractError for L > kMaxEnumerationLength.
inline constexpr std::size_t kMaxEnumerationLength = 12;
double enumeration_oracle_norm_expectation(const Tensor& h, const Tensor& keep_probs);

/// Closed form of the same expectation: 0.5 * sum_l pi_l ||h_l||^2.
double norm_expectation_closed_form(const Tensor& h, const Tensor& keep_probs);

}  // namespace ibprune
