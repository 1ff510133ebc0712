#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ibprune/errors.hpp"
#include "ibprune/forward.hpp"
#include "ibprune/ops.hpp"
#include "ibprune/token_dynamics.hpp"
#include "test_util.hpp"

namespace ibprune {
namespace {

using testing::max_abs_diff;
using testing::random_binary;
using testing::random_ids;
using testing::tiny_config;

TEST(SamplerTest, FreshSamplerKeepsEverything) {
  Rng rng(1);
  Encoder m = Encoder::init(tiny_config(), rng);
  m.add_samplers(rng);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor h = Tensor::randn({12, 16}, rng, 5.0);
    Tensor pi = sampler_forward(m, h, trial % 2);
    for (double p : pi.data()) EXPECT_GE(p, 0.99);
  }
}

TEST(SamplerTest, SymmetricLogitsGiveHalf) {
  Tensor pi = keep_probs_from_logits(Tensor::matrix({{0, 0}}));
  EXPECT_DOUBLE_EQ(pi[0], 0.5);
}

TEST(SamplerTest, LogThreeLogitGivesThreeQuarters) {
  Tensor pi = keep_probs_from_logits(Tensor::matrix({{0, std::log(3.0)}}));
  EXPECT_NEAR(pi[0], 0.75, 1e-15);
}

TEST(GumbelTest, CertainKeepAlwaysKeeps) {
  Rng rng(2);
  Tensor pi = Tensor::full({1000}, 1.0);
  Tensor z = gumbel_sample(pi, {}, rng);
  for (double v : z.data()) EXPECT_EQ(v, 1.0);
}

TEST(GumbelTest, EmpiricalKeepRateMatchesProbability) {
  Rng rng(3);
  for (int k = 1; k <= 9; ++k) {
    const double p = k / 10.0;
    const std::size_t n = 10000;
    Tensor z = gumbel_sample(Tensor::full({n}, p), {}, rng);
    const double rate = std::accumulate(z.data().begin(), z.data().end(), 0.0) / n;
    const double sigma = std::sqrt(p * (1 - p) / n);
    EXPECT_LE(std::abs(rate - p), 3 * sigma) << "p=" << p;
  }
}

TEST(GumbelTest, StraightThroughForwardIsOneHotAndBackwardIsRelaxed) {
  Rng init(4);
  Tensor pi_hard = Tensor::uniform({50}, init, 0.05, 0.95);
  pi_hard.set_requires_grad(true);
  Tensor pi_soft = pi_hard.clone();
  pi_soft.set_requires_grad(true);
  Tensor weights = Tensor::uniform({50}, init, -1, 1);

  Rng a(6), b(6);
  GumbelConfig st, relaxed;
  relaxed.straight_through = false;
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor zh = gumbel_sample(pi_hard, st, a);
    for (double v : zh.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
    tape.backward(sum(mul(zh, weights)));
  }
  Tape tape2;
  {
    TapeScope scope(tape2);
    Tensor zs = gumbel_sample(pi_soft, relaxed, b);
    tape2.backward(sum(mul(zs, weights)));
  }
  const auto gh = pi_hard.grad(), gs = pi_soft.grad();
  for (std::size_t i = 0; i < 50; ++i) EXPECT_DOUBLE_EQ(gh[i], gs[i]);
}

double sigmoid_value(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// A relaxed sample is within eps of one-hot iff the logistic variable
// logit(pi) + noise lies outside [-a, a] with a = tau * ln((1 - eps) / eps).
double near_one_hot_probability(double pi, double tau, double eps) {
  const double a = tau * std::log((1 - eps) / eps);
  const double mu = std::log(pi / (1 - pi));
  return 1.0 - (sigmoid_value(a - mu) - sigmoid_value(-a - mu));
}

TEST(GumbelTest, LowTemperatureNearOneHotRateMatchesClosedForm) {
  Rng rng(7);
  const std::size_t n = 10000;
  for (double tau : {0.01, 0.001}) {
    for (double pi : {0.1, 0.5, 0.9}) {
      GumbelConfig cfg;
      cfg.temperature = tau;
      cfg.straight_through = false;
      Tensor z = gumbel_sample(Tensor::full({n}, pi), cfg, rng);
      std::size_t close = 0;
      for (double v : z.data()) close += std::min(v, 1 - v) < 1e-3;
      const double expected = near_one_hot_probability(pi, tau, 1e-3);
      const double sigma = std::sqrt(expected * (1 - expected) / n);
      EXPECT_NEAR(static_cast<double>(close) / n, expected, 3 * sigma + 1e-12) << tau << " " << pi;
      if (tau == 0.001) EXPECT_GE(close, 9900u);
    }
  }
}

TEST(GumbelTest, SameSeedSameMasks) {
  Tensor pi = Tensor::full({100}, 0.5);
  Rng a(8), b(8);
  EXPECT_EQ(max_abs_diff(gumbel_sample(pi, {}, a), gumbel_sample(pi, {}, b)), 0.0);
}

TEST(GumbelTest, NonPositiveTemperatureRejected) {
  GumbelConfig cfg;
  cfg.temperature = 0.0;
  Rng rng(1);
  EXPECT_THROW(gumbel_sample(Tensor::full({2}, 0.5), cfg, rng), ConfigError);
}

TEST(AttentionMaskTest, AllOnes) {
  Tensor m = to_attention_mask(Tensor::ones({3}));
  for (double v : m.data()) EXPECT_EQ(v, 1.0);
}

TEST(AttentionMaskTest, DroppedTokenZeroesRowAndColumn) {
  Tensor m = to_attention_mask(Tensor::vector({1, 0, 1}));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m.at(i, j), (i != 1 && j != 1) ? 1.0 : 0.0);
  }
}

TEST(AttentionMaskTest, SoftMaskIsElementwiseProduct) {
  Rng rng(9);
  Tensor z = Tensor::uniform({5}, rng, 0, 1);
  Tensor m = to_attention_mask(z);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) EXPECT_DOUBLE_EQ(m.at(i, j), z[i] * z[j]);
  }
}

TEST(PrunePhysicalTest, AllKeptIsIdentity) {
  Rng rng(10);
  Tensor h = Tensor::randn({4, 3}, rng);
  const std::vector<std::size_t> pos{0, 1, 2, 3};
  auto r = prune_physical(h, pos, Tensor::ones({4}), 0);
  EXPECT_EQ(max_abs_diff(r.hidden, h), 0.0);
  EXPECT_TRUE(r.dropped.empty());
  EXPECT_EQ(r.kept_positions, pos);
}

TEST(PrunePhysicalTest, DropsSecondRowWithRecord) {
  Tensor h = Tensor::matrix({{1, 2}, {3, 4}});
  const std::vector<std::size_t> pos{0, 1};
  auto r = prune_physical(h, pos, Tensor::vector({1, 0}), 2);
  EXPECT_EQ(r.hidden.shape(), (Shape{1, 2}));
  ASSERT_EQ(r.dropped.size(), 1u);
  EXPECT_EQ(r.dropped[0].position, 1u);
  EXPECT_EQ(r.dropped[0].layer, 2);
  EXPECT_EQ(r.dropped[0].state, (std::vector<double>{3, 4}));
}

TEST(PrunePhysicalTest, EmptyKeepSetAndSoftMaskAreContractErrors) {
  Tensor h = Tensor::matrix({{1, 2}, {3, 4}});
  const std::vector<std::size_t> pos{0, 1};
  EXPECT_THROW(prune_physical(h, pos, Tensor::zeros({2}), 0), ContractError);
  EXPECT_THROW(prune_physical(h, pos, Tensor::vector({1, 0.5}), 0), ContractError);
}

TEST(ForwardToFinalTest, NothingDroppedIsIdentity) {
  Rng rng(11);
  Tensor h = Tensor::randn({3, 2}, rng);
  const std::vector<std::size_t> pos{0, 1, 2};
  EXPECT_EQ(max_abs_diff(forward_to_final(h, pos, {}, 3), h), 0.0);
}

TEST(ForwardToFinalTest, TokensDroppedAtFirstLayerKeepFirstLayerState) {
  Rng rng(12);
  const ModelConfig c = tiny_config(3);
  Encoder m = Encoder::init(c, rng);
  const auto ids = random_ids(rng, 6, c.vocab_size);
  std::vector<Tensor> decisions(3, Tensor::ones({6}));
  decisions[1] = Tensor::vector({1, 0, 0, 0, 0, 0});
  ForwardOptions o;
  o.token_mode = TokenMode::kFixed;
  o.fixed_decisions = &decisions;
  o.physical = true;
  const auto act = encoder_forward(m, ids, o);
  // Layer 1's sampler drops them, so their state is the output of layer 0.
  for (std::size_t r = 1; r < 6; ++r) {
    for (std::size_t j = 0; j < 16; ++j) {
      EXPECT_EQ(act.final_hidden.at(r, j), act.layer_outputs[0].at(r, j));
    }
  }
}

TEST(ForwardToFinalTest, RandomDropPatternsRestoreOriginalOrder) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t length = 2 + rng.below(10);
    // Encode each row's original position in its value.
    std::vector<double> values(length);
    std::iota(values.begin(), values.end(), 0.0);
    Tensor h({length, 1}, values);
    std::vector<std::size_t> pos(length);
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    std::vector<DroppedToken> dropped;
    for (int layer = 0; layer < 3; ++layer) {
      auto r = prune_physical(h, pos, random_binary(rng, pos.size(), 0.6, true), layer);
      for (auto& t : r.dropped) dropped.push_back(t);
      h = r.hidden;
      pos = r.kept_positions;
    }
    Tensor out = forward_to_final(h, pos, dropped, length);
    for (std::size_t i = 0; i < length; ++i) EXPECT_EQ(out[i], static_cast<double>(i));
  }
}

TEST(ForwardToFinalTest, PositionCollisionIsContractError) {
  Tensor h = Tensor::matrix({{1}});
  const std::vector<std::size_t> pos{0};
  DroppedToken t;
  t.position = 0;
  t.state = {2};
  EXPECT_THROW(forward_to_final(h, pos, {t}, 2), ContractError);
}

TEST(PruningConsistencyTest, PhysicalMatchesMaskedForEveryLayer) {
  Rng rng(14);
  const ModelConfig c = tiny_config(4);
  for (int trial = 0; trial < 20; ++trial) {
    Encoder m = Encoder::init(c, rng);
    const std::size_t length = 1 + rng.below(12);
    const auto ids = random_ids(rng, length, c.vocab_size);
    std::vector<Tensor> decisions;
    for (int l = 0; l < 4; ++l) decisions.push_back(random_binary(rng, length, 0.7));
    ForwardOptions o;
    o.token_mode = TokenMode::kFixed;
    o.fixed_decisions = &decisions;
    const auto masked = encoder_forward(m, ids, o);
    o.physical = true;
    const auto physical = encoder_forward(m, ids, o);
    EXPECT_LT(max_abs_diff(masked.logits, physical.logits), 1e-9);
    EXPECT_LT(max_abs_diff(masked.final_hidden, physical.final_hidden), 1e-9);
    EXPECT_EQ(masked.trace, physical.trace);
    for (int l = 0; l < 4; ++l) {
      const auto& kept = physical.trace.kept_indices[static_cast<std::size_t>(l)];
      EXPECT_LT(max_abs_diff(gather_rows(masked.layer_outputs[static_cast<std::size_t>(l)], kept),
                             physical.layer_outputs[static_cast<std::size_t>(l)]),
                1e-9);
    }
  }
}

TEST(PruningConsistencyTest, DeterministicSamplerDecisionsAgree) {
  Rng rng(15);
  const ModelConfig c = tiny_config(3);
  for (int trial = 0; trial < 10; ++trial) {
    Encoder m = Encoder::init(c, rng);
    m.add_samplers(rng);
    for (auto& layer : m.layers) {
      for (auto& v : layer.sampler->w2.mutable_data()) v = rng.normal() * 3.0;
      layer.sampler->b2.mutable_data()[1] = 0.0;
    }
    const auto ids = random_ids(rng, 10, c.vocab_size);
    ForwardOptions o;
    o.token_mode = TokenMode::kDeterministic;
    const auto masked = encoder_forward(m, ids, o);
    o.physical = true;
    const auto physical = encoder_forward(m, ids, o);
    EXPECT_LT(max_abs_diff(masked.logits, physical.logits), 1e-9);
    EXPECT_EQ(masked.trace.kept_counts, physical.trace.kept_counts);
  }
}

TEST(PruningConsistencyTest, LengthIsMonotone) {
  Rng rng(16);
  const ModelConfig c = tiny_config(4);
  Encoder m = Encoder::init(c, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ids = random_ids(rng, 12, c.vocab_size);
    std::vector<Tensor> decisions;
    for (int l = 0; l < 4; ++l) decisions.push_back(random_binary(rng, 12, 0.8));
    ForwardOptions o;
    o.token_mode = TokenMode::kFixed;
    o.fixed_decisions = &decisions;
    o.physical = true;
    const auto trace = encoder_forward(m, ids, o).trace;
    std::size_t previous = 12;
    for (std::size_t k : trace.kept_counts) {
      EXPECT_LE(k, previous);
      EXPECT_GE(k, 1u);
      previous = k;
    }
  }
}

TEST(PruneTraceTest, JsonLinesRoundTrip) {
  PruneTrace t;
  t.example = 3;
  t.original_length = 5;
  t.kept_counts = {4, 2};
  t.kept_indices = {{0, 1, 2, 4}, {0, 4}};
  std::stringstream ss;
  write_traces(ss, {t, t});
  const auto back = read_traces(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1], t);
}

TEST(PruneTraceTest, MalformedLineNamesLineNumber) {
  std::stringstream ss("{\"example\":0,\"original_length\":3,\"kept_counts\":[2]}\n{oops}\n");
  try {
    read_traces(ss);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

}  // namespace
}  // namespace ibprune
