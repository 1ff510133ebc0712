#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ibprune/encoder.hpp"
#include "ibprune/ib_objective.hpp"
#include "ibprune/static_sparsity.hpp"
#include "ibprune/token_dynamics.hpp"
#include "json.hpp"

namespace ibprune {

/// Parameters of the planted-signal classification task.
struct SynthSpec {
  int vocab_size = 64;
  int num_classes = 4;
  int min_length = 12;     // including the classification token
  int max_length = 24;
  int num_signal = 1;      // planted signal tokens per sequence
  int signal_ids_per_class = 2;
  /// Throws ConfigError when the vocabulary cannot hold the classification
  /// token, the signal ids and at least one distractor, or when lengths
  /// cannot hold the planted tokens.
  void validate() const;
  bool operator==(const SynthSpec&) const = default;
};

struct SplitSizes {
  std::size_t train = 2000;
  std::size_t validation = 300;
  std::size_t test = 500;
  bool operator==(const SplitSizes&) const = default;
};

/// Where a dataset comes from: JSONL files or the synthetic generator.
struct DatasetSpec {
  std::string name = "synthetic";
  std::string train_path;       // JSONL; empty selects the synthetic generator
  std::string validation_path;
  std::string test_path;
  std::string vocab_path;       // optional; one token string per line
  SynthSpec synthetic;
  SplitSizes split_sizes;
  /// "accuracy" or "f1" (binary tasks, label 1 positive).
  std::string metric = "accuracy";
  bool is_synthetic() const { return train_path.empty(); }
  void validate() const;
};

struct OptimizerSettings {
  double learning_rate = 1e-3;          // encoder weights
  double sampler_learning_rate = 1e-2;  // token samplers
  double gate_learning_rate = 0.1;      // structured log_alpha
  double multiplier_learning_rate = 0.5;
  double weight_decay = 0.0;
  int batch_size = 32;
  void validate() const;
};

/// Epoch and step budgets of the training stages.
struct StageSchedule {
  int teacher_epochs = 6;
  int stage1_min_steps = 200;
  int stage1_max_steps = 2000;
  int stage1_patience = 5;        // consecutive on-target evaluations
  int stage2_warmup_max_epochs = 6;
  int stage2_epochs = 10;         // phase B
  int eval_every = 20;            // steps between validation evaluations
  double plateau_tolerance = 1e-4;
  int plateau_patience = 3;
  double sparsity_tolerance = 0.02;
  double keep_rate_floor = 0.05;
  void validate() const;
};

/// Runs of a tradeoff sweep. Arms: "dynamic" (token pruning on the dense
/// teacher), "structured" (static pruning only), "joint" (static then token
/// pruning). Structured arms ignore gamma2 and the loss variant.
struct SweepGrid {
  std::vector<std::string> arms = {"dynamic", "structured", "joint"};
  std::vector<std::string> loss_variants = {"ib"};
  std::vector<double> gamma2 = {0.0, 0.05, 0.2};
  std::vector<double> targets = {0.6};
  /// Fixed-length table entry used for sequence padding when the dataset
  /// name itself has no entry.
  std::string padding_dataset = "SST2";
  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  LossWeights loss_weights;
  LagrangianState lagrangian;  // target sparsity; multipliers start from these values
  GumbelConfig gumbel;
  DistillConfig distill;
  OptimizerSettings optimizer;
  StageSchedule schedule;
  DatasetSpec dataset;
  /// "ib" (entropy + norm) or "skim" (mean keep ratio penalty weighted by gamma2).
  std::string loss_variant = "ib";
  SweepGrid sweep;
  std::uint64_t seed = 42;

  /// Throws ConfigError on any inconsistent field.
  void validate() const;
  /// Desk-scale defaults: the default model with one label per synthetic
  /// class and an identity layer map for distillation.
  static RunConfig desk_default();
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Architecture& a);
Architecture architecture_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SynthSpec& s);
SynthSpec synth_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);

/// Missing keys keep their desk_default() values; unknown keys and wrong types raise
/// ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& config);

}  // namespace ibprune
