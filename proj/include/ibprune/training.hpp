#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ibprune/checkpoint.hpp"
#include "ibprune/config.hpp"
#include "ibprune/data.hpp"
#include "ibprune/flops_meter.hpp"
#include "ibprune/ib_objective.hpp"

namespace ibprune {

/// Token keep rates fell below the configured floor at some layer.
class KeepRateCollapse : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One logged point of a training run. Loss components are averaged over
/// the training batches since the previous row.
struct MetricsRow {
  std::size_t step = 0;
  std::string stage;
  LossBreakdown losses;
  double metric = std::numeric_limits<double>::quiet_NaN();  // validation accuracy or F1
  double expected_sparsity = 0.0;
  double mu1 = 0.0;
  double mu2 = 0.0;
  std::vector<double> keep_rates;  // per layer, fraction of original tokens
  double speedup = 1.0;            // validation FLOPs speedup, batch padding
};

/// Columns: step, stage, ce, entropy, norm, skim, l0, distill, total,
/// metric, s, mu1, mu2, speedup, keep_rate_0 .. keep_rate_{H-1}. Values are
/// printed with round-trip precision so identical runs give identical files.
std::string metrics_csv_header(int num_layers);
std::string metrics_csv_line(const MetricsRow& row, int num_layers);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows, int num_layers);

double accuracy_score(const std::vector<int>& predictions, const std::vector<int>& labels);
/// Binary F1 with `positive` as the positive class; 0 when there are no
/// true positives.
double f1_score(const std::vector<int>& predictions, const std::vector<int>& labels, int positive = 1);

struct EvalResult {
  double accuracy = 0.0;
  double f1 = 0.0;
  double metric = 0.0;  // accuracy or f1 as requested
  std::vector<int> predictions;
  std::vector<PruneTrace> traces;
  std::vector<double> keep_rates;  // per layer, mean over examples
  double mean_keep_rate = 1.0;     // mean over layers
  FlopsReport flops;
};

/// Inference with hard sampler decisions (when the model has samplers) and
/// physical token dropping, followed by FLOPs accounting under `padding`.
EvalResult evaluate(const Encoder& model, const std::vector<Example>& examples, const PaddingStrategy& padding,
                    const std::string& metric = "accuracy");

/// Logits of masked (non-physical) execution with deterministic decisions;
/// used to check agreement with physical execution.
std::vector<int> predict_masked(const Encoder& model, const std::vector<Example>& examples);

/// Optional per-row observer (for progress output).
using MetricsCallback = std::function<void(const MetricsRow&)>;

struct TeacherResult {
  Checkpoint checkpoint;
  std::vector<MetricsRow> metrics;
  double validation_metric = 0.0;
};

/// Dense finetuning with cross-entropy from a seeded initialization.
TeacherResult finetune_teacher(const RunConfig& config, const Dataset& data, const MetricsCallback& on_row = {});

struct Stage1Result {
  Checkpoint checkpoint;  // compacted model plus its binary masks
  Encoder student;        // uncompacted weights the masks apply to
  std::vector<MetricsRow> metrics;
  bool converged = false;
  std::string report;  // non-empty when the target was not reached
  double expected_sparsity = 0.0;
  double realized_sparsity = 0.0;
  std::size_t steps = 0;
};

/// Static structured pruning of a copy of `teacher`: cross-entropy plus
/// distillation toward the teacher plus the sparsity Lagrangian. Stops once
/// both the expected and the binarized sparsity stay within the tolerance of
/// the target for `stage1_patience` evaluations (after stage1_min_steps);
/// otherwise stops at stage1_max_steps with converged = false and a report.
/// A zero target skips the gates entirely (plain distillation finetuning).
Stage1Result stage1_train(const RunConfig& config, const Dataset& data, const Encoder& teacher,
                          const MetricsCallback& on_row = {});

struct Stage2Result {
  Checkpoint checkpoint;  // same structure and masks as the input, plus samplers
  std::vector<MetricsRow> metrics;
  std::size_t warmup_steps = 0;
  std::size_t steps = 0;
  EvalResult validation;
};

/// Token-pruning training. Phase A minimizes ce + gamma1 * entropy until the
/// validation objective stops improving; phase B adds gamma2 * norm (or
/// gamma2 * skim for the skim variant) for stage2_epochs epochs. Throws
/// KeepRateCollapse when any layer's validation keep rate drops below
/// keep_rate_floor.
Stage2Result stage2_train(const Checkpoint& start, const RunConfig& config, const Dataset& data,
                          const MetricsCallback& on_row = {});

struct SweepRow {
  std::string arm;
  std::string loss_variant;
  double target = 0.0;
  double gamma1 = 0.0;
  double gamma2 = 0.0;
  double metric = 0.0;
  double speedup_batch = 1.0;
  double speedup_sequence = 1.0;
  double mean_keep_rate = 1.0;
  std::vector<double> keep_rates;
  std::string status = "ok";
  std::string trace_path;
  std::string checkpoint_path;
  Architecture architecture;  // for recomputing speedups from the trace
  std::vector<PruneTrace> traces;
};

/// Runs every arm of config.sweep on the test split, reusing one teacher and
/// one stage-1 model per target. Failures are recorded in the row status and
/// the sweep continues. With a non-empty `out_dir` each row's traces and
/// checkpoint are written there.
std::vector<SweepRow> sweep(const RunConfig& config, const Dataset& data, const Checkpoint& teacher,
                            const std::string& out_dir = "", const MetricsCallback& on_row = {});

std::string tradeoff_csv_header(int num_layers);
std::string tradeoff_csv_line(const SweepRow& row, int num_layers);
void write_tradeoff_csv(const std::string& path, const std::vector<SweepRow>& rows, int num_layers);

/// Sequence-padding strategy for a dataset name: its own fixed length when
/// listed, otherwise `fallback`'s.
PaddingStrategy sequence_padding_for(const std::string& dataset, const std::string& fallback);

}  // namespace ibprune
