// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "ibprune/checkpoint.hpp"
#include "ibprune/errors.hpp"
#include "ibprune/flops_meter.hpp"
#include "ibprune/forward.hpp"
#include "ibprune/ib_objective.hpp"
#include "ibprune/ops.hpp"
#include "ibprune/optim.hpp"
#include "ibprune/static_sparsity.hpp"
#include "ibprune/token_dynamics.hpp"
#include "ibprune/training.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace ibprune;
using testing::max_abs_diff;
using testing::random_binary;
using testing::random_binary_masks;
using testing::random_ids;
using testing::tiny_config;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [violated: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

// ------------------------------------------------------------------ 1

using BinaryOp = std::function<Tensor(const Tensor&, const Tensor&)>;

std::vector<std::pair<std::string, BinaryOp>> op_cases() {
  return {
      {"add", [](const Tensor& a, const Tensor& b) { return add(a, b); }},
      {"add_broadcast", [](const Tensor& a, const Tensor& b) { return add(a, narrow(b, 0, 0, 1)); }},
      {"sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }},
      {"mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }},
      {"mul_column", [](const Tensor& a, const Tensor& b) { return mul(a, narrow(b, 1, 1, 1)); }},
      {"div", [](const Tensor& a, const Tensor& b) { return div(a, add_scalar(mul(b, b), 0.5)); }},
      {"affine_scalar", [](const Tensor& a, const Tensor&) { return add_scalar(mul_scalar(a, -1.7), 0.3); }},
      {"pow", [](const Tensor& a, const Tensor&) { return pow_scalar(add_scalar(mul(a, a), 0.2), -0.5); }},
      {"exp", [](const Tensor& a, const Tensor&) { return exp(a); }},
      {"log", [](const Tensor& a, const Tensor&) { return log(add_scalar(mul(a, a), 0.1)); }},
      {"sigmoid", [](const Tensor& a, const Tensor&) { return sigmoid(a); }},
      {"gelu", [](const Tensor& a, const Tensor&) { return gelu(a); }},
      {"matmul", [](const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }},
      {"sum_axis", [](const Tensor& a, const Tensor& b) { return mul(sum(a, 0, true), b); }},
      {"mean_axis", [](const Tensor& a, const Tensor& b) { return mul(mean(a, 1, true), b); }},
      {"softmax_rows", [](const Tensor& a, const Tensor& b) { return mul(softmax(a, 1), b); }},
      {"softmax_cols", [](const Tensor& a, const Tensor& b) { return mul(softmax(a, 0), b); }},
      {"log_softmax", [](const Tensor& a, const Tensor& b) { return mul(log_softmax(a, 1), b); }},
      {"masked_softmax",
       [](const Tensor& a, const Tensor& b) {
         return masked_softmax(matmul(a, transpose(a)), sigmoid(matmul(b, transpose(b))));
       }},
      {"layer_norm",
       [](const Tensor& a, const Tensor& b) {
         const Tensor flat = reshape(b, {b.numel()});
         return mul(layer_norm(a, narrow(flat, 0, 0, 4), narrow(flat, 0, 4, 4), 1e-5), a);
       }},
      {"gather_rows",
       [](const Tensor& a, const Tensor&) {
         const std::vector<std::size_t> idx{2, 0};
         return mul(gather_rows(a, idx), gather_rows(a, idx));
       }},
      {"scatter_rows",
       [](const Tensor& a, const Tensor& b) {
         const std::vector<std::size_t> idx{3, 1, 0};
         return mul(scatter_rows(a, idx, 4), concat({b, b}, 0));
       }},
      {"concat", [](const Tensor& a, const Tensor& b) { return mul(concat({a, b}, 1), concat({b, a}, 1)); }},
      {"narrow", [](const Tensor& a, const Tensor&) { return exp(narrow(a, 1, 1, 2)); }},
      {"outer",
       [](const Tensor& a, const Tensor& b) { return outer(reshape(a, {a.numel()}), reshape(b, {b.numel()})); }},
      {"frobenius_sq", [](const Tensor& a, const Tensor& b) { return mul(frobenius_sq(a), sum(b)); }},
      {"embedding",
       [](const Tensor& a, const Tensor&) {
         const std::vector<int> ids{1, 1, 2};
         return embedding(a, ids);
       }},
      {"cross_entropy",
       [](const Tensor& a, const Tensor& b) { return mul(cross_entropy(a, std::vector<int>{0, 3, 1}), sum(b)); }},
  };
}

Encoder random_sampler_model(const ModelConfig& c, Rng& rng) {
  Encoder m = Encoder::init(c, rng);
  m.add_samplers(rng);
  // Spread sampler outputs so keep probabilities are not saturated.
  for (auto& layer : m.layers) {
    for (auto& v : layer.sampler->w2.mutable_data()) v = rng.normal() * 0.5;
    layer.sampler->b2.mutable_data()[1] = 0.0;
  }
  return m;
}

StructuredMasks random_soft_masks(const ModelConfig& c, Rng& rng) {
  StructuredMasks m = StructuredMasks::ones(c);
  m.z_hidden = Tensor::uniform({static_cast<std::size_t>(c.hidden_dim)}, rng, 0.3, 1.0);
  for (int l = 0; l < c.num_layers; ++l) {
    m.z_head[l] = Tensor::uniform({static_cast<std::size_t>(c.num_heads)}, rng, 0.3, 1.0);
    m.z_int[l] = Tensor::uniform({static_cast<std::size_t>(c.ffn_dim)}, rng, 0.3, 1.0);
    m.z_mha[l] = Tensor::uniform({1}, rng, 0.3, 1.0);
    m.z_ffn[l] = Tensor::uniform({1}, rng, 0.3, 1.0);
  }
  return m;
}

std::vector<Tensor> mask_tensors(const StructuredMasks& m) {
  std::vector<Tensor> out{m.z_hidden};
  for (std::size_t l = 0; l < m.z_head.size(); ++l) {
    out.insert(out.end(), {m.z_head[l], m.z_int[l], m.z_mha[l], m.z_ffn[l]});
  }
  return out;
}

Outcome criterion_gradients() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2024);
  double worst_op = 0.0;
  std::string worst_op_name;
  std::size_t op_instances = 0;
  for (const auto& [name, fn] : op_cases()) {
    for (int trial = 0; trial < 20; ++trial) {
      Tensor a = Tensor::randn({3, 4}, rng);
      Tensor b = Tensor::randn({(name == "scatter_rows" || name == "layer_norm") ? 2u : 3u, 4}, rng);
      const Tensor w = Tensor::randn(fn(a, b).shape(), rng);
      const auto r = testing::grad_check([&] { return sum(mul(fn(a, b), w)); }, {a, b});
      ++op_instances;
      if (r.max_rel_error > worst_op) {
        worst_op = r.max_rel_error;
        worst_op_name = name;
      }
    }
  }
  o.require(worst_op < 1e-4, "op gradient rel error " + fmt(worst_op) + " in " + worst_op_name);

  // Token-pruning objective: ce + gamma1 * entropy + gamma2 * norm through a
  // sampler-equipped encoder with structured gates and relaxed Gumbel masks.
  double worst_ib = 0.0;
  const ModelConfig c = tiny_config(2, 16, 4, 16);
  for (int trial = 0; trial < 20; ++trial) {
    Encoder m = random_sampler_model(c, rng);
    StructuredMasks masks = random_soft_masks(c, rng);
    const auto ids = random_ids(rng, 3 + rng.below(4), c.vocab_size);
    const std::vector<int> label{static_cast<int>(rng.below(static_cast<std::size_t>(c.num_labels)))};
    const std::uint64_t noise_seed = 1000 + static_cast<std::uint64_t>(trial);
    LossWeights w;
    w.gamma1 = 0.1 + 0.9 * rng.uniform();
    w.gamma2 = 0.1 + 0.9 * rng.uniform();
    auto loss = [&] {
      Rng noise(noise_seed);
      ForwardOptions f;
      f.masks = &masks;
      f.token_mode = TokenMode::kSampled;
      f.gumbel.straight_through = false;
      f.rng = &noise;
      const EncoderActivations a = encoder_forward(m, ids, f);
      return ib_total(cross_entropy(a.logits, label), entropy_loss(a.keep_probs), norm_loss(a.layer_inputs, a.keep_probs),
                      w)
          .total;
    };
    std::vector<Tensor> params = m.parameters();
    for (const Tensor& t : mask_tensors(masks)) params.push_back(t);
    const auto r = testing::grad_check(loss, params);
    worst_ib = std::max(worst_ib, r.max_rel_error);
  }
  o.require(worst_ib < 1e-4, "token-pruning objective rel error " + fmt(worst_ib));

  // Static-pruning objective: ce + prediction and layerwise distillation +
  // sparsity Lagrangian, differentiated w.r.t. weights, gates and log_alpha.
  double worst_static = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Encoder student = Encoder::init(c, rng);
    const Encoder teacher = Encoder::init(c, rng);
    StructuredMasks masks = random_soft_masks(c, rng);
    StructuredGates gates = StructuredGates::init(c, 0.0);
    for (const Tensor& t : gates.parameters()) {
      Tensor p = t;
      for (auto& v : p.mutable_data()) v = rng.normal();
    }
    LagrangianState state;
    state.target = 0.6;
    state.mu1 = 2.0 * rng.uniform() - 1.0;
    state.mu2 = rng.uniform();
    const auto ids = random_ids(rng, 3 + rng.below(4), c.vocab_size);
    const std::vector<int> label{0};
    EncoderActivations ta;
    {
      NoGradScope ng;
      ta = encoder_forward(teacher, ids);
    }
    const DistillConfig dc = DistillConfig::identity(c.num_layers);
    auto loss = [&] {
      ForwardOptions f;
      f.masks = &masks;
      const EncoderActivations a = encoder_forward(student, ids, f);
      Tensor total = cross_entropy(a.logits, label);
      total = add(total, mul_scalar(prediction_distill_loss(a.logits, ta.logits, dc.temperature), 0.5));
      total = add(total, mul_scalar(layerwise_distill_loss(a.layer_outputs, ta.layer_outputs, dc), 0.5));
      return add(total, l0_lagrangian(state, expected_sparsity(c, gates)));
    };
    std::vector<Tensor> params = student.parameters();
    for (const Tensor& t : mask_tensors(masks)) params.push_back(t);
    for (const Tensor& t : gates.parameters()) params.push_back(t);
    const auto r = testing::grad_check(loss, params);
    worst_static = std::max(worst_static, r.max_rel_error);
  }
  o.require(worst_static < 1e-4, "static-pruning objective rel error " + fmt(worst_static));

  const double elapsed = seconds_since(t0);
  o.require(elapsed < 120.0, "runtime " + fmt(elapsed) + " s exceeds 120 s");
  o.detail << op_cases().size() << " ops x 20 instances max rel err " << fmt(worst_op) << "; objective 20 instances max "
           << fmt(worst_ib) << "; static objective 20 instances max " << fmt(worst_static) << "; " << fmt(elapsed, 3)
           << " s";
  return o;
}

// ------------------------------------------------------------------ 2

Outcome criterion_pruning_equivalence() {
  Outcome o;
  Rng rng(7);
  double worst = 0.0;
  int trials = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int layers = 1 + static_cast<int>(rng.below(4));
    const ModelConfig c = tiny_config(layers, 16, 4, 32);
    Encoder m = Encoder::init(c, rng);
    if (rng.below(2)) m.add_samplers(rng);
    const StructuredMasks masks = random_binary_masks(c, rng);
    const Encoder compact = finalize_prune(m, masks);
    const std::size_t length = 1 + rng.below(static_cast<std::size_t>(c.max_seq_len));
    const auto ids = random_ids(rng, length, c.vocab_size);
    std::vector<Tensor> decisions;
    for (int l = 0; l < layers; ++l) decisions.push_back(random_binary(rng, length, 0.6 + 0.3 * rng.uniform(), true));

    ForwardOptions masked;
    masked.masks = &masks;
    masked.token_mode = TokenMode::kFixed;
    masked.fixed_decisions = &decisions;
    ForwardOptions physical;
    physical.token_mode = TokenMode::kFixed;
    physical.fixed_decisions = &decisions;
    physical.physical = true;
    const auto a = encoder_forward(m, ids, masked);
    const auto b = encoder_forward(compact, ids, physical);
    worst = std::max(worst, max_abs_diff(a.logits, b.logits));
    o.require(a.trace.kept_counts == b.trace.kept_counts, "trace mismatch in trial " + std::to_string(trial));
    ++trials;
  }
  o.require(worst < 1e-9, "max logit difference " + fmt(worst));
  o.detail << trials << " random models/inputs/masks, max |masked - physical| logit difference " << fmt(worst, 3);
  return o;
}

// ------------------------------------------------------------------ 3

Outcome criterion_ib_oracle() {
  Outcome o;
  Rng rng(11);
  double worst_entropy = 0.0, worst_norm = 0.0;
  for (std::size_t length = 1; length <= 10; ++length) {
    for (int trial = 0; trial < 50; ++trial) {
      const Tensor pi = Tensor::uniform({length}, rng, 0.0, 1.0);
      const double closed = entropy_loss({pi}, false).item();
      worst_entropy = std::max(worst_entropy, std::abs(closed - testing::enumerated_negative_entropy(pi)));
      const Tensor h = Tensor::randn({length, 3}, rng);
      worst_norm = std::max(worst_norm, std::abs(enumeration_oracle_norm_expectation(h, pi) -
                                                 norm_expectation_closed_form(h, pi)));
    }
  }
  o.require(worst_entropy < 1e-9, "entropy difference " + fmt(worst_entropy));
  o.require(worst_norm < 1e-12, "norm expectation difference " + fmt(worst_norm));
  o.detail << "L=1..10 x 50 vectors: max |entropy_loss - enumeration| " << fmt(worst_entropy, 3)
           << ", max |norm expectation enumeration - closed form| " << fmt(worst_norm, 3);
  return o;
}

// ------------------------------------------------------------------ 4

Outcome criterion_gumbel() {
  Outcome o;
  Rng rng(13);
  const std::size_t n = 10000;
  double worst_sigmas = 0.0;
  bool one_hot = true;
  for (int k = 1; k <= 9; ++k) {
    const double p = k / 10.0;
    Tensor pi = Tensor::full({n}, p);
    pi.set_requires_grad(true);
    Tensor z;
    {
      Tape tape;
      TapeScope scope(tape);
      z = gumbel_sample(pi, GumbelConfig{}, rng);
      tape.backward(sum(z));
    }
    double kept = 0.0;
    for (double v : z.data()) {
      one_hot = one_hot && (v == 0.0 || v == 1.0);
      kept += v;
    }
    const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
    worst_sigmas = std::max(worst_sigmas, std::abs(kept / static_cast<double>(n) - p) / sigma);
  }
  o.require(worst_sigmas <= 3.0, "keep frequency off by " + fmt(worst_sigmas) + " sigma");
  o.require(one_hot, "straight-through forward produced a non-binary value");
  o.detail << "pi in {0.1..0.9}, n=10000: worst deviation " << fmt(worst_sigmas, 3)
           << " sigma; straight-through forward values all exactly 0 or 1";
  return o;
}

// ------------------------------------------------------------------ 5

Outcome criterion_hard_concrete() {
  Outcome o;
  Rng rng(17);
  const std::size_t n = 100000;
  double worst_sigmas = 0.0;
  for (double la : {-2.0, 0.0, 2.0}) {
    const Tensor z = hc_sample(Tensor::full({n}, la), rng);
    std::size_t open = 0;
    for (double v : z.data()) open += v > 0.0;
    const double p = 1.0 / (1.0 + std::exp(-(la - (2.0 / 3.0) * std::log(0.1 / 1.1))));
    const double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
    worst_sigmas = std::max(worst_sigmas, std::abs(static_cast<double>(open) / static_cast<double>(n) - p) / sigma);
  }
  o.require(worst_sigmas <= 3.0, "P(gate > 0) off by " + fmt(worst_sigmas) + " sigma");
  o.detail << "log_alpha in {-2,0,2}, n=1e5: worst deviation " << fmt(worst_sigmas, 3) << " sigma";
  return o;
}

// ------------------------------------------------------------------ 6

double controller_only(const ModelConfig& c, double target, double gate_lr, double multiplier_lr, int steps) {
  StructuredGates gates = StructuredGates::init(c, 3.0);
  AdamWConfig ac;
  ac.learning_rate = gate_lr;
  AdamW opt(gates.parameters(), ac);
  LagrangianState state;
  state.target = target;
  for (int step = 0; step < steps; ++step) {
    opt.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    const Tensor s = expected_sparsity(c, gates);
    state.current = s.item();
    tape.backward(l0_lagrangian(state, s));
    opt.step();
    update_multipliers(state, multiplier_lr);
  }
  NoGradScope ng;
  return expected_sparsity(c, gates).item();
}

Outcome criterion_sparsity_control() {
  Outcome o;
  RunConfig config = RunConfig::desk_default();
  config.dataset.split_sizes = {512, 64, 128};
  config.optimizer.batch_size = 8;
  config.schedule.stage1_max_steps = 2000;
  const Dataset data = load_dataset(config.dataset, config.model.num_labels, config.model.vocab_size, config.seed);
  Rng rng(config.seed);
  const Encoder teacher = Encoder::init(config.model, rng);

  for (double target : {0.6, 0.95}) {
    const double isolated = controller_only(config.model, target, config.optimizer.gate_learning_rate,
                                            config.optimizer.multiplier_learning_rate, 2000);
    o.require(std::abs(isolated - target) < 0.02, "isolated controller s=" + fmt(isolated) + " for target " + fmt(target));

    config.lagrangian.target = target;
    const auto t0 = std::chrono::steady_clock::now();
    const Stage1Result r = stage1_train(config, data, teacher);
    const double elapsed = seconds_since(t0);
    o.require(r.steps <= 2000, "more than 2000 steps");
    o.require(std::abs(r.expected_sparsity - target) < 0.02,
              "stage1 expected sparsity " + fmt(r.expected_sparsity) + " for target " + fmt(target));

    double worst = 0.0;
    const StructuredMasks& masks = *r.checkpoint.masks;
    for (const Example& ex : data.test) {
      ForwardOptions f;
      f.masks = &masks;
      const Tensor masked = encoder_forward(r.student, ex.ids, f).logits;
      const Tensor compact = encoder_forward(r.checkpoint.model, ex.ids).logits;
      worst = std::max(worst, max_abs_diff(masked, compact));
    }
    o.require(worst < 1e-9, "compacted vs masked logit difference " + fmt(worst));
    o.detail << "target " << target << ": isolated s=" << fmt(isolated) << ", desk stage1 s=" << fmt(r.expected_sparsity)
             << " (binarized " << fmt(r.realized_sparsity) << ") after " << r.steps << " steps in " << fmt(elapsed, 3)
             << " s, compacted vs masked max diff " << fmt(worst, 3) << "; ";
  }
  return o;
}

// ------------------------------------------------------------------ 7

Outcome criterion_flops() {
  Outcome o;
  const ModelConfig c = RunConfig::desk_default().model;
  const Architecture dense = Architecture::dense(c);
  const auto d = static_cast<unsigned long long>(c.hidden_dim);
  const auto k = static_cast<unsigned long long>(c.num_labels);

  bool exact = true;
  unsigned long long shown = 0;
  for (std::size_t length : {std::size_t{1}, std::size_t{17}, std::size_t{64}}) {
    PruneTrace t;
    t.original_length = length;
    t.kept_counts.assign(static_cast<std::size_t>(c.num_layers), length);
    PaddingStrategy s;
    s.batch_size = 1;
    const FlopsReport r = model_flops({t}, c, dense, s);
    const auto layer = testing::hand_count_dense_layer(length, d, static_cast<unsigned long long>(c.num_heads),
                                                       static_cast<unsigned long long>(c.ffn_dim));
    const unsigned long long hand =
        static_cast<unsigned long long>(c.num_layers) * (layer.mha + layer.ffn) + 8 * d + 2 * d * k;
    exact = exact && r.total == hand && r.baseline == hand;
    if (length == 64) shown = hand;
  }
  o.require(exact, "dense count differs from the hand count");

  Rng rng(19);
  int monotone_cases = 0;
  bool monotone = true;
  for (int trial = 0; trial < 1000; ++trial) {
    StructuredMasks masks = random_binary_masks(c, rng, 0.85);
    Architecture before = Architecture::from_masks(c, masks);
    const std::size_t layer = rng.below(static_cast<std::size_t>(c.num_layers));
    switch (rng.below(5)) {
      case 0: masks.z_hidden.mutable_data()[1 + rng.below(static_cast<std::size_t>(c.hidden_dim - 1))] = 0.0; break;
      case 1: masks.z_head[layer].mutable_data()[rng.below(static_cast<std::size_t>(c.num_heads))] = 0.0; break;
      case 2: masks.z_int[layer].mutable_data()[rng.below(static_cast<std::size_t>(c.ffn_dim))] = 0.0; break;
      case 3: masks.z_mha[layer].mutable_data()[0] = 0.0; break;
      default: masks.z_ffn[layer].mutable_data()[0] = 0.0; break;
    }
    Architecture after = Architecture::from_masks(c, masks);
    before.sampler_dim = after.sampler_dim = rng.below(2) ? 32 : 0;
    PruneTrace t;
    t.original_length = 1 + rng.below(static_cast<std::size_t>(c.max_seq_len));
    std::size_t kept = t.original_length;
    for (int l = 0; l < c.num_layers; ++l) {
      kept = 1 + rng.below(kept);
      t.kept_counts.push_back(kept);
    }
    PruneTrace fewer = t;
    const std::size_t at = rng.below(t.kept_counts.size());
    fewer.kept_counts[at] = std::max<std::size_t>(1, fewer.kept_counts[at] - rng.below(fewer.kept_counts[at]));
    for (std::size_t l = at + 1; l < fewer.kept_counts.size(); ++l) {
      fewer.kept_counts[l] = std::min(fewer.kept_counts[l], fewer.kept_counts[l - 1]);
    }
    PaddingStrategy s;
    s.batch_size = 1;
    const auto base = model_flops({t}, c, before, s).total;
    monotone = monotone && model_flops({t}, c, after, s).total <= base && model_flops({fewer}, c, before, s).total <= base;
    ++monotone_cases;
  }
  o.require(monotone, "FLOPs increased after closing a gate or dropping a token");

  RunConfig run = RunConfig::desk_default();
  run.dataset.split_sizes = {8, 8, 64};
  const Dataset data = load_dataset(run.dataset, run.model.num_labels, run.model.vocab_size, run.seed);
  Rng init(run.seed);
  const EvalResult e = evaluate(Encoder::init(run.model, init), data.test, PaddingStrategy{});
  o.require(e.flops.speedup == 1.0, "no-pruning speedup " + fmt(e.flops.speedup, 17));
  o.detail << "dense desk config at L=64: " << shown << " FLOPs, equal to the hand count; " << monotone_cases
           << " randomized monotonicity cases hold; no-pruning speedup " << fmt(e.flops.speedup, 17);
  return o;
}

// ------------------------------------------------------------------ 8

Outcome criterion_end_to_end() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig c = RunConfig::desk_default();
  c.model.num_layers = 4;
  c.model.hidden_dim = 32;
  c.model.num_heads = 4;
  c.model.ffn_dim = 64;
  c.model.vocab_size = 64;
  c.model.max_seq_len = 32;
  c.distill = DistillConfig::identity(4);
  c.dataset.split_sizes = {1000, 200, 400};
  c.schedule.teacher_epochs = 6;
  c.schedule.stage2_warmup_max_epochs = 3;
  c.schedule.stage2_epochs = 5;
  c.loss_weights.gamma1 = 0.0;
  c.optimizer.sampler_learning_rate = 0.01;
  c.sweep.arms = {"dynamic", "structured", "joint"};
  c.sweep.gamma2 = {0.0, 0.3, 3.0};
  c.sweep.targets = {0.6};
  const Dataset data = load_dataset(c.dataset, c.model.num_labels, c.model.vocab_size, c.seed);
  const double majority = majority_baseline(data.test, c.model.num_labels);

  const TeacherResult teacher = finetune_teacher(c, data);
  const auto rows = sweep(c, data, teacher.checkpoint);
  std::map<std::string, std::vector<const SweepRow*>> arms;
  for (const SweepRow& r : rows) {
    o.require(r.status.rfind("error", 0) != 0, r.arm + " gamma2=" + fmt(r.gamma2) + " failed: " + r.status);
    arms[r.arm].push_back(&r);
  }
  const auto& dyn = arms["dynamic"];
  const auto& joint = arms["joint"];
  o.require(dyn.size() == 3 && joint.size() == 3, "missing sweep rows");
  if (dyn.size() != 3 || joint.size() != 3) return o;

  // (a) joint beats dynamic-only in speedup at matched accuracy.
  double best_dyn = 0.0, best_joint = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    best_dyn = std::max(best_dyn, dyn[i]->speedup_batch);
    best_joint = std::max(best_joint, joint[i]->speedup_batch);
    o.require(joint[i]->speedup_batch > dyn[i]->speedup_batch, "(a) joint speedup not above dynamic at gamma2=" +
                                                                   fmt(dyn[i]->gamma2));
    o.require(std::abs(joint[i]->metric - dyn[i]->metric) <= 0.02,
              "(a) accuracy gap at gamma2=" + fmt(dyn[i]->gamma2));
  }
  // (b) keep rate nonincreasing in gamma2.
  for (const auto* arm : {&dyn, &joint}) {
    for (std::size_t i = 1; i < 3; ++i) {
      o.require((*arm)[i]->mean_keep_rate <= (*arm)[i - 1]->mean_keep_rate,
                "(b) keep rate increased from gamma2=" + fmt((*arm)[i - 1]->gamma2) + " to " + fmt((*arm)[i]->gamma2));
    }
  }
  // (c) no norm pressure keeps (nearly) every token.
  o.require(dyn[0]->mean_keep_rate >= 0.99 && joint[0]->mean_keep_rate >= 0.99, "(c) keep rate below 0.99 at gamma2=0");
  // (d) accuracy well above the majority baseline at a keep rate <= 0.6.
  bool found = false;
  for (const SweepRow& r : rows) {
    if (r.arm != "structured" && r.mean_keep_rate <= 0.6 && r.metric >= majority + 0.20) found = true;
  }
  o.require(found, "(d) no run with keep rate <= 0.6 and accuracy >= majority + 20 points");
  const double elapsed = seconds_since(t0);
  o.require(elapsed < 900.0, "runtime " + fmt(elapsed) + " s exceeds 15 min");

  o.detail << "majority " << fmt(majority) << ";";
  for (const SweepRow& r : rows) {
    o.detail << " " << r.arm << "(g2=" << fmt(r.gamma2) << ") acc " << fmt(r.metric) << " keep " << fmt(r.mean_keep_rate)
             << " speedup " << fmt(r.speedup_batch) << ";";
  }
  o.detail << " " << fmt(elapsed, 3) << " s";
  return o;
}

// ------------------------------------------------------------------ 9

Outcome criterion_padding() {
  Outcome o;
  const std::map<std::string, std::size_t> expected{{"MRPC", 128}, {"MNLI", 128}, {"QNLI", 128}, {"SST2", 64}};
  o.require(PaddingStrategy::fixed_lengths() == expected, "fixed-length table differs");

  Rng rng(23);
  const ModelConfig c = tiny_config(3, 16, 4, 32);
  int comparisons = 0;
  bool holds = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto it = std::next(expected.begin(), static_cast<long>(rng.below(expected.size())));
    // Token-pruned models, with or without structured pruning. Padding only
    // inflates the speedup when padded tokens are dropped at the first layer;
    // static-only models can lose speedup with padding.
    Architecture arch = rng.below(2) ? Architecture::dense(c) : Architecture::from_masks(c, random_binary_masks(c, rng, 0.8));
    arch.sampler_dim = 8;
    const std::size_t max_len = 1 + rng.below(it->second);
    std::vector<PruneTrace> traces;
    const std::size_t count = 1 + rng.below(100);
    for (std::size_t e = 0; e < count; ++e) {
      PruneTrace t;
      t.original_length = 1 + rng.below(max_len);
      std::size_t kept = t.original_length;
      for (int l = 0; l < c.num_layers; ++l) {
        kept = 1 + rng.below(kept);
        t.kept_counts.push_back(kept);
      }
      traces.push_back(t);
    }
    PaddingStrategy batch;
    batch.batch_size = 1 + rng.below(40);
    PaddingStrategy sequence;
    sequence.mode = PaddingMode::kSequence;
    sequence.dataset = it->first;
    holds = holds && model_flops(traces, c, arch, sequence).speedup >= model_flops(traces, c, arch, batch).speedup;
    ++comparisons;
  }
  o.require(holds, "sequence-mode speedup below batch-mode speedup");
  o.detail << "table MRPC/MNLI/QNLI=128, SST2=64 exact; sequence >= batch in " << comparisons
           << " randomized token-pruned comparisons";
  return o;
}

// ------------------------------------------------------------------ 10

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> pipeline_artifacts(const fs::path& dir) {
  fs::create_directories(dir);
  RunConfig c = RunConfig::desk_default();
  c.model.num_layers = 2;
  c.model.hidden_dim = 16;
  c.model.ffn_dim = 32;
  c.model.vocab_size = 64;
  c.model.max_seq_len = 32;
  c.distill = DistillConfig::identity(2);
  c.dataset.split_sizes = {128, 32, 32};
  c.optimizer.batch_size = 16;
  c.schedule.teacher_epochs = 2;
  c.schedule.stage1_max_steps = 40;
  c.schedule.stage1_min_steps = 20;
  c.schedule.eval_every = 10;
  c.schedule.stage2_warmup_max_epochs = 1;
  c.schedule.stage2_epochs = 1;
  c.loss_weights.gamma2 = 0.5;
  const Dataset data = load_dataset(c.dataset, c.model.num_labels, c.model.vocab_size, c.seed);
  const TeacherResult t = finetune_teacher(c, data);
  write_metrics_csv((dir / "teacher.csv").string(), t.metrics, 2);
  const Stage1Result s1 = stage1_train(c, data, t.checkpoint.model);
  write_metrics_csv((dir / "stage1.csv").string(), s1.metrics, 2);
  const Stage2Result s2 = stage2_train(s1.checkpoint, c, data);
  write_metrics_csv((dir / "stage2.csv").string(), s2.metrics, 2);
  save_checkpoint((dir / "stage2.ckpt").string(), s2.checkpoint);
  return {read_file(dir / "teacher.csv"), read_file(dir / "stage1.csv"), read_file(dir / "stage2.csv"),
          read_file(dir / "stage2.ckpt")};
}

Outcome criterion_determinism() {
  Outcome o;
  const fs::path root = fs::temp_directory_path() / "ibprune_acceptance_determinism";
  fs::remove_all(root);
  const auto a = pipeline_artifacts(root / "run_a");
  const auto b = pipeline_artifacts(root / "run_b");
  std::size_t bytes = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    o.require(!a[i].empty(), "empty artifact");
    o.require(a[i] == b[i], "artifact " + std::to_string(i) + " differs between runs");
    bytes += a[i].size();
  }
  fs::remove_all(root);
  o.detail << "seed 42, two runs: teacher/stage1/stage2 metrics CSVs and final checkpoint byte-identical (" << bytes
           << " bytes)";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient integrity", criterion_gradients},
      {"train/infer pruning equivalence", criterion_pruning_equivalence},
      {"entropy and norm oracles", criterion_ib_oracle},
      {"gumbel-softmax fidelity", criterion_gumbel},
      {"hard-concrete fidelity", criterion_hard_concrete},
      {"sparsity control", criterion_sparsity_control},
      {"flops meter", criterion_flops},
      {"end-to-end desk-scale trend", criterion_end_to_end},
      {"padding strategies", criterion_padding},
      {"determinism", criterion_determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = false;
    std::string detail;
    try {
      Outcome o = criteria[i].second();
      pass = o.pass;
      detail = o.detail.str();
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    failures += pass ? 0 : 1;
    std::printf("%s [%d] %s (%.1f s): %s\n", pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), seconds_since(t0),
                detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
