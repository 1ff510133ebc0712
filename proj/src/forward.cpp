#include "ibprune/forward.hpp"

#include <array>
#include <memory>
#include <numeric>

#include "ibprune/errors.hpp"
#include "ibprune/ops.hpp"

namespace ibprune {

namespace {

void record_trace(PruneTrace& trace, const std::vector<std::size_t>& kept) {
  trace.kept_counts.push_back(kept.size());
  trace.kept_indices.push_back(kept);
}

const Tensor& fixed_decision(const ForwardOptions& options, int layer, std::size_t length) {
  if (options.fixed_decisions == nullptr ||
      options.fixed_decisions->size() <= static_cast<std::size_t>(layer)) {
    throw ContractError("encoder_forward: fixed token decisions missing for layer " + std::to_string(layer));
  }
  const Tensor& z = (*options.fixed_decisions)[static_cast<std::size_t>(layer)];
  if (z.shape() != Shape{length}) {
    throw ShapeError("encoder_forward: fixed decisions for layer " + std::to_string(layer) + " have shape " +
                     shape_to_string(z.shape()) + ", expected [" + std::to_string(length) + "]");
  }
  return z;
}

void require_sampler(const Encoder& model) {
  if (!model.has_samplers()) throw ContractError("encoder_forward: token mode requires samplers");
}

EncoderActivations masked_forward(const Encoder& model, std::span<const int> ids, const ForwardOptions& options) {
  EncoderActivations act;
  const std::size_t length = ids.size();
  act.trace.original_length = length;
  const bool token_pruning = options.token_mode != TokenMode::kNone;
  if (options.token_mode == TokenMode::kSampled && options.rng == nullptr) {
    throw ContractError("encoder_forward: sampled token mode requires an rng");
  }

  Tensor first = Tensor::zeros({length});
  first.mutable_data()[0] = 1.0;
  const Tensor rest = add_scalar(neg(first), 1.0);

  Tensor h = embed(model, ids, options.masks);
  Tensor previous = Tensor::ones({length});

  for (int i = 0; i < model.num_layers(); ++i) {
    act.layer_inputs.push_back(h);
    Tensor cumulative = previous;
    if (token_pruning) {
      Tensor z;
      if (options.token_mode == TokenMode::kFixed) {
        z = fixed_decision(options, i, length);
      } else {
        require_sampler(model);
        Tensor pi = sampler_forward(model, h, i);
        act.keep_probs.push_back(mul(pi, previous));
        z = options.token_mode == TokenMode::kSampled ? gumbel_sample(pi, options.gumbel, *options.rng)
                                                      : hard_decisions(pi);
      }
      if (options.pin_first_token) z = add(mul(z, rest), first);
      cumulative = mul(previous, z);
    }
    act.token_masks.push_back(cumulative);

    std::vector<std::size_t> kept;
    std::unique_ptr<bool[]> flags(new bool[length]);
    for (std::size_t r = 0; r < length; ++r) {
      flags[r] = cumulative[r] > 0.0;
      if (cumulative[r] > 0.5) kept.push_back(r);
    }
    record_trace(act.trace, kept);

    Tensor out;
    if (token_pruning) {
      const std::span<const bool> query_kept(flags.get(), length);
      out = mha_forward(model, h, to_attention_mask(cumulative), options.masks, i, query_kept, options.dropout);
      out = ffn_forward(model, out, options.masks, i, options.dropout);
      // Dropped rows keep their drop-time state.
      Tensor column = reshape(cumulative, {length, 1});
      h = add(h, mul(column, sub(out, h)));
    } else {
      out = mha_forward(model, h, Tensor(), options.masks, i, {}, options.dropout);
      h = ffn_forward(model, out, options.masks, i, options.dropout);
    }
    act.layer_outputs.push_back(h);
    previous = cumulative;
  }

  act.final_hidden = h;
  const std::array<std::size_t, 1> zero{0};
  act.pooled = gather_rows(h, zero);
  act.logits = classify(model, h, options.masks);
  return act;
}

EncoderActivations physical_forward(const Encoder& model, std::span<const int> ids, const ForwardOptions& options) {
  if (options.token_mode == TokenMode::kSampled) {
    throw ContractError("encoder_forward: physical pruning needs hard decisions, not samples");
  }
  EncoderActivations act;
  const std::size_t length = ids.size();
  act.trace.original_length = length;
  Tensor h = embed(model, ids, options.masks);
  std::vector<std::size_t> positions(length);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  std::vector<DroppedToken> dropped;

  for (int i = 0; i < model.num_layers(); ++i) {
    act.layer_inputs.push_back(h);
    const std::size_t rows = positions.size();
    std::vector<double> z(rows, 1.0);
    if (options.token_mode == TokenMode::kDeterministic) {
      require_sampler(model);
      Tensor pi = sampler_forward(model, h, i);
      act.keep_probs.push_back(pi);
      for (std::size_t r = 0; r < rows; ++r) z[r] = pi[r] > 0.5 ? 1.0 : 0.0;
    } else if (options.token_mode == TokenMode::kFixed) {
      const Tensor& fixed = fixed_decision(options, i, length);
      for (std::size_t r = 0; r < rows; ++r) z[r] = fixed[positions[r]];
    }
    if (options.pin_first_token) {
      for (std::size_t r = 0; r < rows; ++r) {
        if (positions[r] == 0) z[r] = 1.0;
      }
    }
    PhysicalPrune pruned = prune_physical(h, positions, Tensor({rows}, std::move(z)), i);
    for (auto& t : pruned.dropped) dropped.push_back(std::move(t));
    positions = std::move(pruned.kept_positions);
    record_trace(act.trace, positions);

    h = mha_forward(model, pruned.hidden, Tensor(), options.masks, i, {}, options.dropout);
    h = ffn_forward(model, h, options.masks, i, options.dropout);
    act.layer_outputs.push_back(h);
  }

  act.final_hidden = forward_to_final(h, positions, dropped, length);
  const std::array<std::size_t, 1> zero{0};
  act.pooled = gather_rows(act.final_hidden, zero);
  act.logits = classify(model, act.final_hidden, options.masks);
  return act;
}

}  // namespace

EncoderActivations encoder_forward(const Encoder& model, std::span<const int> token_ids,
                                   const ForwardOptions& options) {
  if (token_ids.empty()) throw ContractError("encoder_forward: empty token sequence");
  return options.physical ? physical_forward(model, token_ids, options) : masked_forward(model, token_ids, options);
}

}  // namespace ibprune
