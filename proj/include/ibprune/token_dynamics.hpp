#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ibprune/encoder.hpp"
#include "ibprune/rng.hpp"
#include "ibprune/tensor.hpp"

namespace ibprune {

/// Log-probabilities are clamped to [-kLogitClamp, 0] before Gumbel noise.
inline constexpr double kLogitClamp = 20.0;

struct GumbelConfig {
  double temperature = 1.0;
  bool straight_through = true;
  /// Throws ConfigError unless temperature > 0.
  void validate() const;
};

/// Raw sampler MLP output: [L, 2] logits (prune, keep).
Tensor sampler_logits(const SamplerWeights& sampler, const Tensor& h);

/// Keep probability pi_1 = softmax(logits)[:, 1] as a [L] tensor.
Tensor keep_probs_from_logits(const Tensor& logits);

/// Keep probabilities of layer `layer`'s sampler for hidden states h [L, d].
Tensor sampler_forward(const Encoder& model, const Tensor& h, int layer);

/// Relaxed Bernoulli sample per token with keep probabilities `keep_probs`
/// ([L]). The relaxed keep value is sigmoid((log pi_1 + g_1 - log pi_0 - g_0) / tau).
/// With straight_through the forward value is its argmax (exactly 0 or 1) and
/// the backward pass uses the relaxed value.
Tensor gumbel_sample(const Tensor& keep_probs, const GumbelConfig& config, Rng& rng);

/// Deterministic inference decisions: 1 where pi_1 > 0.5.
Tensor hard_decisions(const Tensor& keep_probs);

/// M_ij = z_i * z_j.
Tensor to_attention_mask(const Tensor& z);

/// A token removed by physical pruning, with its hidden state at drop time.
struct DroppedToken {
  std::size_t position = 0;  // index in the original sequence
  int layer = 0;             // layer whose sampler dropped it
  std::vector<double> state;
};

struct PhysicalPrune {
  Tensor hidden;                          // [L_next, d]
  std::vector<std::size_t> kept_positions;  // original positions of the rows of `hidden`
  std::vector<DroppedToken> dropped;
};

/// Removes rows of h whose hard mask entry is 0. `positions[r]` is the
/// original position of row r. Throws ContractError for a non-binary mask or
/// an empty keep set.
PhysicalPrune prune_physical(const Tensor& h, std::span<const std::size_t> positions, const Tensor& z,
                             int layer);

/// Rebuilds the full-length output sequence: kept rows go to their original
/// positions and each dropped token contributes its state at drop time.
/// Throws ContractError on a position collision or a position >= length.
Tensor forward_to_final(const Tensor& final_hidden, std::span<const std::size_t> kept_positions,
                        const std::vector<DroppedToken>& dropped, std::size_t length);

/// Per-example record of how many tokens survived each layer's sampler.
struct PruneTrace {
  std::size_t example = 0;
  std::size_t original_length = 0;
  std::vector<std::size_t> kept_counts;                 // per layer, after that layer's sampler
  std::vector<std::vector<std::size_t>> kept_indices;   // per layer, original positions

  bool operator==(const PruneTrace&) const = default;
};

std::string trace_to_json_line(const PruneTrace& trace);
/// Throws FormatError describing the problem.
PruneTrace trace_from_json_line(const std::string& line);
void write_traces(std::ostream& out, const std::vector<PruneTrace>& traces);
/// Throws FormatError naming the 1-based line number of a malformed record.
std::vector<PruneTrace> read_traces(std::istream& in);
void write_traces_file(const std::string& path, const std::vector<PruneTrace>& traces);
std::vector<PruneTrace> read_traces_file(const std::string& path);

}  // namespace ibprune
