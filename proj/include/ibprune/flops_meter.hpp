#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ibprune/encoder.hpp"
#include "ibprune/token_dynamics.hpp"

namespace ibprune {

using FlopCount = std::uint64_t;

// Cost constants for the non-matmul kernels.
inline constexpr FlopCount kSoftmaxFlopsPerEntry = 5;
inline constexpr FlopCount kLayerNormFlopsPerElement = 8;
inline constexpr FlopCount kGeluFlopsPerElement = 10;

/// 2 * tokens * d_in * d_out (one multiply and one add per MAC).
FlopCount flops_linear(std::uint64_t tokens, std::uint64_t d_in, std::uint64_t d_out);

/// Attention sublayer of `layer` in `arch` on `tokens` tokens: layer norm,
/// Q/K/V projections, scores, softmax, context and output projection.
/// Zero when the sublayer is absent.
FlopCount flops_mha(std::uint64_t tokens, const Architecture& arch, int layer);
/// Same for a masked model: units whose gate is 0 are not counted.
FlopCount flops_mha(std::uint64_t tokens, const ModelConfig& config, const StructuredMasks& masks, int layer);

/// Feed-forward sublayer: layer norm, up-projection, GELU, down-projection.
FlopCount flops_ffn(std::uint64_t tokens, const Architecture& arch, int layer);
FlopCount flops_ffn(std::uint64_t tokens, const ModelConfig& config, const StructuredMasks& masks, int layer);

/// One token sampler (d -> sampler_dim -> 2 with GELU and a 2-way softmax).
FlopCount flops_sampler(std::uint64_t tokens, const Architecture& arch);

/// Final layer norm and linear classifier on the pooled token.
FlopCount flops_classifier(const Architecture& arch);

enum class PaddingMode { kBatch, kSequence };

struct PaddingStrategy {
  PaddingMode mode = PaddingMode::kBatch;
  std::string dataset;            // looked up in sequence mode
  std::size_t batch_size = 32;    // consecutive examples padded together in batch mode

  /// Fixed sequence-mode lengths per dataset.
  static const std::map<std::string, std::size_t>& fixed_lengths();
  /// Throws ConfigError for an unknown dataset.
  std::size_t fixed_length() const;
  /// "batch" or "sequence"; throws ConfigError otherwise.
  static PaddingMode parse_mode(const std::string& text);
  static std::string mode_name(PaddingMode mode);
};

struct FlopsReport {
  std::string padding;
  std::size_t examples = 0;
  std::vector<FlopCount> mha;  // per layer, summed over examples
  std::vector<FlopCount> ffn;  // per layer, summed over examples
  FlopCount sampler = 0;
  FlopCount classifier = 0;
  FlopCount total = 0;     // sum of every field above
  FlopCount baseline = 0;  // dense model, same padding, no token pruning
  double speedup = 1.0;    // baseline / total

  double mean_total() const;
  double mean_baseline() const;
  std::string to_json() const;
  static FlopsReport from_json(const std::string& text);
};

/// Dataset FLOPs from per-example pruning traces. Each example is padded to
/// its batch's maximum length (batch mode) or the dataset's fixed length
/// (sequence mode). Padding is charged to the dense baseline and, for models
/// with samplers, to the first sampler, which drops it together with the
/// pruned tokens; layer i then runs on trace.kept_counts[i] tokens. Models
/// without samplers run every layer on the padded length.
FlopsReport model_flops(const std::vector<PruneTrace>& traces, const ModelConfig& dense_config,
                        const Architecture& arch, const PaddingStrategy& strategy);

}  // namespace ibprune
