#pragma once

#include <span>
#include <vector>

#include "ibprune/encoder.hpp"
#include "ibprune/token_dynamics.hpp"

namespace ibprune {

enum class TokenMode {
  kNone,           // every token kept at every layer; samplers (if any) are ignored
  kFixed,          // per-layer decisions supplied by the caller
  kSampled,        // Gumbel samples from the samplers (training)
  kDeterministic,  // keep iff pi_1 > 0.5 (inference)
};

struct ForwardOptions {
  const StructuredMasks* masks = nullptr;
  TokenMode token_mode = TokenMode::kNone;
  /// kFixed: one [L] tensor per layer giving that layer's decision z^i over
  /// the original positions. Decisions for already-dropped tokens are ignored.
  const std::vector<Tensor>* fixed_decisions = nullptr;
  /// Drop tokens physically instead of masking attention. Requires hard
  /// decisions (kNone, kFixed with binary values, or kDeterministic).
  bool physical = false;
  /// Force position 0 (the classification token) to be kept.
  bool pin_first_token = true;
  GumbelConfig gumbel;
  Rng* rng = nullptr;  // required for kSampled
  DropoutContext dropout;
};

struct EncoderActivations {
  /// h^i: input of layer i (the sampler input). Full length in masked mode,
  /// compacted rows in physical mode.
  std::vector<Tensor> layer_inputs;
  /// Output of layer i with dropped rows frozen at their drop-time state.
  std::vector<Tensor> layer_outputs;
  /// Effective keep probabilities per layer ([L] in masked mode): pi^i times
  /// the cumulative mask of the previous layer, so tokens that are
  /// already gone contribute nothing. Empty unless samplers ran.
  std::vector<Tensor> keep_probs;
  /// Cumulative token mask after layer i's decision ([L], masked mode).
  std::vector<Tensor> token_masks;
  Tensor final_hidden;  // [L, d] after forwarding dropped tokens
  Tensor pooled;        // [1, d], position 0 of final_hidden
  Tensor logits;        // [1, K]
  PruneTrace trace;
};

/// Full encoder pass for one sequence. Each layer runs sampler, attention,
/// then feed-forward. In masked mode (the training path) dropped tokens stay
/// in the sequence but are excluded from attention by the renormalized mask;
/// their rows keep the state they had when dropped. In physical mode the rows
/// are removed and reinserted only into the final output sequence.
EncoderActivations encoder_forward(const Encoder& model, std::span<const int> token_ids,
                                   const ForwardOptions& options = {});

}  // namespace ibprune
