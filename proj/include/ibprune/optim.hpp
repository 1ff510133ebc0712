#pragma once

#include <cstddef>
#include <vector>

#include "ibprune/tensor.hpp"

namespace ibprune {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Decoupled decay, applied only to tensors of rank >= 2.
  double weight_decay = 0.0;
};

/// Adaptive moment estimation with decoupled weight decay over leaf tensors.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig config);

  /// One update from the accumulated gradients; parameters without a
  /// gradient are skipped.
  void step();
  void zero_grad();

  double learning_rate() const { return config_.learning_rate; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  std::size_t steps() const { return steps_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  AdamWConfig config_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t steps_ = 0;
};

}  // namespace ibprune
