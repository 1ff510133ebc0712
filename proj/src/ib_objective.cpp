#include "ibprune/ib_objective.hpp"

#include "ibprune/errors.hpp"
#include "ibprune/ops.hpp"

namespace ibprune {

namespace {

void require_probs(const std::vector<Tensor>& keep_probs, const char* op) {
  if (keep_probs.empty()) throw ContractError(std::string(op) + ": no layers");
  for (const auto& p : keep_probs) {
    if (p.rank() != 1) throw ShapeError(std::string(op) + ": keep probabilities must be rank 1");
  }
}

std::size_t total_entries(const std::vector<Tensor>& keep_probs) {
  std::size_t n = 0;
  for (const auto& p : keep_probs) n += p.numel();
  return n;
}

}  // namespace

void LossWeights::validate() const {
  if (gamma1 < 0.0 || gamma2 < 0.0) throw ConfigError("loss weights: gamma1 and gamma2 must be >= 0");
}

Tensor entropy_loss(const std::vector<Tensor>& keep_probs, bool normalize) {
  require_probs(keep_probs, "entropy_loss");
  Tensor total;
  for (const auto& pi : keep_probs) {
    Tensor p = clamp(pi, kProbClamp, 1.0 - kProbClamp, ClampGrad::kZero);
    Tensor q = add_scalar(neg(p), 1.0);
    Tensor term = sum(add(mul(p, log(p)), mul(q, log(q))));
    total = total.defined() ? add(total, term) : term;
  }
  if (normalize) total = mul_scalar(total, 1.0 / static_cast<double>(total_entries(keep_probs)));
  return total;
}

Tensor norm_loss(const std::vector<Tensor>& hidden, const std::vector<Tensor>& keep_probs, bool normalize) {
  require_probs(keep_probs, "norm_loss");
  if (hidden.size() != keep_probs.size()) {
    throw ShapeError("norm_loss: " + std::to_string(hidden.size()) + " hidden states for " +
                     std::to_string(keep_probs.size()) + " layers");
  }
  Tensor total;
  std::size_t entries = 0;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    const Tensor& h = hidden[i];
    const Tensor& pi = keep_probs[i];
    if (h.rank() != 2 || h.dim(0) != pi.numel()) {
      throw ShapeError("norm_loss: hidden " + shape_to_string(h.shape()) + " vs keep probabilities " +
                       shape_to_string(pi.shape()));
    }
    Tensor s = mul(h, reshape(pi, {pi.numel(), 1}));
    Tensor term = mul_scalar(frobenius_sq(s), 0.5);
    total = total.defined() ? add(total, term) : term;
    entries += h.numel();
  }
  if (normalize) total = mul_scalar(total, 1.0 / static_cast<double>(entries));
  return total;
}

Tensor skim_loss(const std::vector<Tensor>& keep_probs) {
  require_probs(keep_probs, "skim_loss");
  Tensor total;
  for (const auto& pi : keep_probs) {
    Tensor term = mean(pi);
    total = total.defined() ? add(total, term) : term;
  }
  return mul_scalar(total, 1.0 / static_cast<double>(keep_probs.size()));
}

ObjectiveValue ib_total(const Tensor& ce, const Tensor& entropy, const Tensor& norm, const LossWeights& weights) {
  weights.validate();
  ObjectiveValue out;
  out.total = add(add(ce, mul_scalar(entropy, weights.gamma1)), mul_scalar(norm, weights.gamma2));
  out.breakdown.ce = ce.item();
  out.breakdown.entropy = entropy.item();
  out.breakdown.norm = norm.item();
  out.breakdown.total = out.total.item();
  return out;
}

double enumeration_oracle_norm_expectation(const Tensor& h, const Tensor& keep_probs) {
  const std::size_t length = keep_probs.numel();
  if (length > kMaxEnumerationLength) {
    throw ContractError("enumeration oracle supports at most " + std::to_string(kMaxEnumerationLength) +
                        " tokens, got " + std::to_string(length));
  }
  if (h.rank() != 2 || h.dim(0) != length) throw ShapeError("enumeration oracle: shape mismatch");
  const std::size_t d = h.dim(1);
  double expectation = 0.0;
  for (std::size_t outcome = 0; outcome < (std::size_t{1} << length); ++outcome) {
    double probability = 1.0;
    double value = 0.0;
    for (std::size_t l = 0; l < length; ++l) {
      const bool kept = (outcome >> l) & 1U;
      probability *= kept ? keep_probs[l] : 1.0 - keep_probs[l];
      if (kept) {
        for (std::size_t j = 0; j < d; ++j) value += h.at(l, j) * h.at(l, j);
      }
    }
    expectation += probability * 0.5 * value;
  }
  return expectation;
}

double norm_expectation_closed_form(const Tensor& h, const Tensor& keep_probs) {
  double total = 0.0;
  for (std::size_t l = 0; l < keep_probs.numel(); ++l) {
    double row = 0.0;
    for (std::size_t j = 0; j < h.dim(1); ++j) row += h.at(l, j) * h.at(l, j);
    total += keep_probs[l] * row;
  }
  return 0.5 * total;
}

}  // namespace ibprune
