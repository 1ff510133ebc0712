#pragma once

#include <utility>
#include <vector>

#include "ibprune/encoder.hpp"
#include "ibprune/rng.hpp"
#include "ibprune/tensor.hpp"

namespace ibprune {

/// Stretched, clamped binary-concrete distribution constants.
struct HardConcreteParams {
  double beta = 2.0 / 3.0;  // concrete temperature
  double gamma = -0.1;      // stretch lower end (< 0)
  double zeta = 1.1;        // stretch upper end (> 1)
  void validate() const;
};

/// log_alpha values are clamped to [-kLogAlphaClamp, kLogAlphaClamp].
inline constexpr double kLogAlphaClamp = 20.0;

/// Elementwise training-mode sample: u ~ U(0,1),
/// s = sigmoid((ln u - ln(1-u) + log_alpha) / beta), value = clamp(s (zeta-gamma) + gamma, 0, 1).
/// Gradients pass through the clamp (the unclamped relaxed path).
Tensor hc_sample(const Tensor& log_alpha, Rng& rng, const HardConcreteParams& params = {});

/// Noise-free gate value clamp(sigmoid(log_alpha) (zeta-gamma) + gamma, 0, 1).
Tensor hc_deterministic(const Tensor& log_alpha, const HardConcreteParams& params = {});

/// P(gate > 0) = sigmoid(log_alpha - beta ln(-gamma/zeta)), differentiable.
Tensor hc_open_probability(const Tensor& log_alpha, const HardConcreteParams& params = {});
double hc_open_probability(double log_alpha, const HardConcreteParams& params = {});

/// Learnable log_alpha for every structured unit of a model.
struct StructuredGates {
  Tensor hidden;                      // [d]
  std::vector<Tensor> head;           // per layer [num_heads]
  std::vector<Tensor> intermediate;   // per layer [ffn_dim]
  std::vector<Tensor> mha;            // per layer [1]
  std::vector<Tensor> ffn;            // per layer [1]
  HardConcreteParams params;

  /// Every log_alpha set to `initial` (requires_grad leaves).
  static StructuredGates init(const ModelConfig& config, double initial = 3.0);
  std::vector<Tensor> parameters() const;
  /// Stochastic gates for one training step.
  StructuredMasks sample(Rng& rng) const;
  /// Noise-free gate values.
  StructuredMasks deterministic() const;
  /// Unit kept iff its deterministic value > 0.5.
  StructuredMasks binarized() const;
};

/// 1 - E[remaining prunable parameters] / total prunable parameters. A head's
/// matrices survive with P(head open) P(layer open) per surviving hidden dim;
/// likewise for intermediate units. Differentiable w.r.t. all log_alpha.
Tensor expected_sparsity(const ModelConfig& config, const StructuredGates& gates);

/// Realized sparsity of binary masks (or of a compacted architecture).
double realized_sparsity(const ModelConfig& config, const StructuredMasks& binary_masks);

struct LagrangianState {
  double mu1 = 0.0;
  double mu2 = 0.0;
  double target = 0.6;   // target sparsity
  double current = 0.0;  // most recent expected sparsity
  /// Throws ConfigError unless target is in [0, 1).
  void validate() const;
};

/// mu1 (target - s) + mu2 (target - s)^2, differentiable through s.
Tensor l0_lagrangian(const LagrangianState& state, const Tensor& expected_sparsity);

/// Gradient ascent on the multipliers using state.current:
/// mu1 += lr (target - s), mu2 += lr (target - s)^2, mu2 kept >= 0.
void update_multipliers(LagrangianState& state, double learning_rate);

struct DistillConfig {
  double temperature = 2.0;
  /// (student layer, teacher layer) pairs.
  std::vector<std::pair<int, int>> layer_map;
  double prediction_weight = 0.5;
  double layerwise_weight = 0.5;
  /// Throws ConfigError for temperature <= 0 or a non-injective map.
  void validate() const;
  /// Identity map over `num_layers` layers.
  static DistillConfig identity(int num_layers);
};

/// KL(softmax(teacher/T) || softmax(student/T)) * T^2, averaged over the
/// batch. The teacher side is treated as a constant.
Tensor prediction_distill_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);

/// Sum over mapped layer pairs of the mean squared difference of hidden
/// states. An empty map yields 0 and a warning on stderr.
Tensor layerwise_distill_loss(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher,
                              const DistillConfig& config);

}  // namespace ibprune
