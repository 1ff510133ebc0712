#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ibprune/rng.hpp"
#include "ibprune/tensor.hpp"

namespace ibprune {

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Dense encoder hyperparameters (the un-pruned reference shape).
struct ModelConfig {
  int num_layers = 4;
  int hidden_dim = 64;
  int num_heads = 4;
  int ffn_dim = 256;
  int vocab_size = 1000;
  int max_seq_len = 64;
  int num_labels = 2;
  double dropout = 0.0;

  int head_dim() const { return hidden_dim / num_heads; }
  /// Throws ConfigError unless all dims >= 1 and hidden_dim % num_heads == 0.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Gate values for the five structured granularities. During training the
/// entries are relaxed samples in [0, 1]; after finalization they are {0, 1}.
struct StructuredMasks {
  Tensor z_hidden;              // [d], shared by every layer
  std::vector<Tensor> z_head;   // per layer [num_heads]
  std::vector<Tensor> z_int;    // per layer [ffn_dim]
  std::vector<Tensor> z_mha;    // per layer [1]
  std::vector<Tensor> z_ffn;    // per layer [1]

  static StructuredMasks ones(const ModelConfig& config);
  /// Throws ShapeError/ContractError on wrong shapes or values outside [0, 1].
  void validate(const ModelConfig& config) const;
  bool is_binary() const;
  /// Gate kept iff value > threshold.
  StructuredMasks binarized(double threshold = 0.5) const;
};

struct LayerShape {
  int num_heads = 0;  // 0 means the attention sublayer was removed
  int ffn_dim = 0;    // 0 means the feed-forward sublayer was removed
  bool operator==(const LayerShape&) const = default;
};

/// Actual (possibly compacted) shape of a model.
struct Architecture {
  int hidden_dim = 0;
  int head_dim = 0;
  int vocab_size = 0;
  int max_seq_len = 0;
  int num_labels = 0;
  int sampler_dim = 0;  // 0 when the model has no token samplers
  std::vector<LayerShape> layers;

  static Architecture dense(const ModelConfig& config);
  /// Shape after removing every unit whose binarized gate is 0.
  static Architecture from_masks(const ModelConfig& config, const StructuredMasks& masks);
  int num_layers() const { return static_cast<int>(layers.size()); }
  bool operator==(const Architecture&) const = default;
};

struct AttentionWeights {
  Tensor ln_gain, ln_bias;
  Tensor wq, bq, wk, bk, wv, bv;  // [d, n*dh], [n*dh]
  Tensor wo;                      // [n*dh, d]; no output bias, so zero heads means zero update
  int num_heads = 0;
};

struct FeedForwardWeights {
  Tensor ln_gain, ln_bias;
  Tensor w1, b1;  // [d, F], [F]
  Tensor w2;      // [F, d]; no output bias, so zero intermediate units means zero update
};

/// Token sampler MLP: d -> sampler_dim (GELU) -> 2 logits (prune, keep).
struct SamplerWeights {
  Tensor w1, b1, w2, b2;
};

struct EncoderLayer {
  std::optional<AttentionWeights> attention;
  std::optional<FeedForwardWeights> ffn;
  std::optional<SamplerWeights> sampler;
};

struct ParameterCount {
  std::size_t embedding = 0;
  std::size_t attention = 0;   // Q/K/V/O matrices plus Q/K/V biases
  std::size_t ffn = 0;         // both matrices plus the up-projection bias
  std::size_t layer_norm = 0;
  std::size_t sampler = 0;
  std::size_t classifier = 0;

  std::size_t non_embedding() const {
    return attention + ffn + layer_norm + sampler + classifier;
  }
};

/// Pre-LN transformer encoder classifier. Tensor members share storage on
/// copy; clone() produces an independent model.
class Encoder {
 public:
  /// Dense model with freshly initialized weights (no samplers).
  static Encoder init(const ModelConfig& config, Rng& rng);

  const ModelConfig& base_config() const { return base_config_; }
  const Architecture& architecture() const { return arch_; }
  int num_layers() const { return arch_.num_layers(); }
  /// True when no structural unit has been removed.
  bool is_dense() const;
  bool has_samplers() const { return arch_.sampler_dim > 0; }

  /// Adds one sampler per layer with the keep-biased initialization.
  /// sampler_dim <= 0 selects hidden_dim / 2.
  void add_samplers(Rng& rng, int sampler_dim = 0);
  void remove_samplers();

  Encoder clone() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::vector<Tensor> sampler_parameters() const;
  ParameterCount parameter_count() const;

  /// Rebuilds a model from named tensors (checkpoint load). Throws FormatError
  /// on missing names or shapes inconsistent with `arch`.
  static Encoder from_named(const ModelConfig& base, const Architecture& arch,
                            const std::vector<std::pair<std::string, Tensor>>& named);

  Tensor token_embedding;     // [vocab, d]
  Tensor position_embedding;  // [max_seq_len, d]
  std::vector<EncoderLayer> layers;
  Tensor final_ln_gain, final_ln_bias;
  Tensor classifier_weight;  // [d, K]
  Tensor classifier_bias;    // [K]

 private:
  friend Encoder finalize_prune(const Encoder& model, const StructuredMasks& masks);
  ModelConfig base_config_;
  Architecture arch_;
};

/// Weight-matrix parameters subject to structured pruning (the quantity whose
/// remaining fraction defines sparsity): 4*d*n*dh per attention layer and
/// 2*d*F per feed-forward layer.
std::size_t prunable_parameters(const Architecture& arch);

/// Token plus learned positional embedding, gated by z_hidden when masks are
/// supplied. Throws ContractError when the sequence exceeds max_seq_len.
Tensor embed(const Encoder& model, std::span<const int> token_ids, const StructuredMasks* masks = nullptr);

/// Dropout settings for a forward pass; inactive unless training.
struct DropoutContext {
  double rate = 0.0;
  Rng* rng = nullptr;
  bool active() const { return rate > 0.0 && rng != nullptr; }
};

/// One pre-LN attention sublayer with residual. `attn_mask` ([L, L], may be
/// undefined for "all ones") renormalizes attention over unmasked keys.
/// `query_kept` marks rows that must have at least one unmasked key.
Tensor mha_forward(const Encoder& model, const Tensor& h, const Tensor& attn_mask,
                   const StructuredMasks* masks, int layer, std::span<const bool> query_kept = {},
                   const DropoutContext& dropout = {});

/// One pre-LN feed-forward sublayer with residual.
Tensor ffn_forward(const Encoder& model, const Tensor& h, const StructuredMasks* masks, int layer,
                   const DropoutContext& dropout = {});

/// Final layer norm on position 0 followed by the linear classifier: [1, K].
Tensor classify(const Encoder& model, const Tensor& final_hidden, const StructuredMasks* masks = nullptr);

/// Layer norm whose statistics are weighted by `feature_gate` (over the last
/// axis); output is gated by it too. With a binary gate this equals layer
/// norm restricted to the kept features.
Tensor masked_layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         const Tensor& feature_gate, double epsilon = kLayerNormEpsilon);

/// Physically removes every unit whose (binary) gate is 0. Throws
/// ContractError for non-binary masks, for models that are already compacted,
/// and when every head of every layer is removed while some attention layer
/// gate stays open.
Encoder finalize_prune(const Encoder& model, const StructuredMasks& masks);

}  // namespace ibprune
