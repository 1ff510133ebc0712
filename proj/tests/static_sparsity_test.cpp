#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "ibprune/errors.hpp"
#include "ibprune/ops.hpp"
#include "ibprune/optim.hpp"
#include "ibprune/static_sparsity.hpp"
#include "test_util.hpp"

namespace ibprune {
namespace {

double closed_form_open(double log_alpha) {
  return 1.0 / (1.0 + std::exp(-(log_alpha - (2.0 / 3.0) * std::log(0.1 / 1.1))));
}

TEST(HardConcreteTest, SaturatedGateIsOpen) {
  Rng rng(1);
  Tensor z = hc_sample(Tensor::full({10000}, 50.0), rng);
  for (double v : z.data()) EXPECT_EQ(v, 1.0);
}

TEST(HardConcreteTest, OpenProbabilityMatchesMonteCarlo) {
  Rng rng(2);
  const std::size_t n = 100000;
  for (double la : {-2.0, 0.0, 2.0}) {
    Tensor z = hc_sample(Tensor::full({n}, la), rng);
    std::size_t open = 0;
    for (double v : z.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      open += v > 0.0;
    }
    const double p = closed_form_open(la);
    EXPECT_NEAR(hc_open_probability(la), p, 1e-15);
    EXPECT_LE(std::abs(static_cast<double>(open) / n - p), 3 * std::sqrt(p * (1 - p) / n)) << la;
  }
  EXPECT_NEAR(closed_form_open(0.0), 0.8317, 5e-4);
}

TEST(HardConcreteTest, DeterministicValue) {
  Tensor la = Tensor::vector({-3.0, 0.0, 0.4, 5.0});
  Tensor z = hc_deterministic(la);
  for (std::size_t i = 0; i < 4; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-la[i]));
    EXPECT_DOUBLE_EQ(z[i], std::clamp(s * 1.2 - 0.1, 0.0, 1.0));
  }
}

TEST(HardConcreteTest, SampleGradientUsesRelaxedPath) {
  Tensor la = Tensor::vector({-1.0, 0.5, 3.0, 6.0, -4.0});
  la.set_requires_grad(true);
  {
    Tape tape;
    TapeScope scope(tape);
    Rng rng(3);
    tape.backward(sum(hc_sample(la, rng)));
  }
  // Same draws, differentiated along the unclamped stretched path.
  Rng rng(3);
  const auto grad = la.grad();
  for (std::size_t i = 0; i < 5; ++i) {
    const double u = rng.uniform();
    const double s = 1.0 / (1.0 + std::exp(-(la[i] + std::log(u) - std::log1p(-u)) * 1.5));
    EXPECT_NEAR(grad[i], 1.2 * s * (1 - s) * 1.5, 1e-12);
  }
}

ModelConfig twelve_head_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.hidden_dim = 48;
  c.num_heads = 12;
  c.ffn_dim = 96;
  return c;
}

TEST(ExpectedSparsityTest, AllOpenIsZero) {
  const ModelConfig c = twelve_head_config();
  const auto g = StructuredGates::init(c, 20.0);
  EXPECT_NEAR(expected_sparsity(c, g).item(), 0.0, 1e-6);
}

TEST(ExpectedSparsityTest, ClosedLayerGatesGiveOne) {
  const ModelConfig c = twelve_head_config();
  auto g = StructuredGates::init(c, 20.0);
  for (int l = 0; l < 2; ++l) {
    g.mha[l].mutable_data()[0] = -20.0;
    g.ffn[l].mutable_data()[0] = -20.0;
  }
  EXPECT_NEAR(expected_sparsity(c, g).item(), 1.0, 1e-6);
}

TEST(ExpectedSparsityTest, OneClosedHeadMatchesParameterArithmetic) {
  const ModelConfig c = twelve_head_config();
  auto g = StructuredGates::init(c, 20.0);
  for (int l = 0; l < 2; ++l) g.head[l].mutable_data()[5] = -20.0;
  const double per_layer = 4.0 * 48 * 48 + 2.0 * 48 * 96;
  const double one_head = 4.0 * 48 * 4;
  EXPECT_NEAR(expected_sparsity(c, g).item(), one_head / per_layer, 1e-6);
}

TEST(ExpectedSparsityTest, MonotoneInLogAlpha) {
  const ModelConfig c = testing::tiny_config();
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto g = StructuredGates::init(c, 0.0);
    for (auto& p : g.parameters()) {
      for (auto& v : p.mutable_data()) v = rng.normal() * 3.0;
    }
    const double before = expected_sparsity(c, g).item();
    auto params = g.parameters();
    auto& target = params[rng.below(params.size())];
    target.mutable_data()[rng.below(target.numel())] -= 0.5;
    EXPECT_GE(expected_sparsity(c, g).item(), before - 1e-15);
  }
}

TEST(ExpectedSparsityTest, GradientMatchesFiniteDifferences) {
  const ModelConfig c = testing::tiny_config();
  Rng rng(5);
  auto g = StructuredGates::init(c, 0.0);
  for (auto& p : g.parameters()) {
    for (auto& v : p.mutable_data()) v = rng.normal();
  }
  const auto r = testing::grad_check([&] { return expected_sparsity(c, g); }, g.parameters());
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(ExpectedSparsityTest, BinarizedGatesMatchRealizedSparsity) {
  const ModelConfig c = testing::tiny_config();
  auto g = StructuredGates::init(c, 20.0);
  g.head[0].mutable_data()[1] = -20.0;
  g.intermediate[1].mutable_data()[3] = -20.0;
  const StructuredMasks m = g.binarized();
  EXPECT_NEAR(expected_sparsity(c, g).item(), realized_sparsity(c, m), 1e-6);
}

TEST(LagrangianTest, ZeroAtTarget) {
  LagrangianState s;
  s.mu1 = 3;
  s.mu2 = 2;
  s.target = 0.6;
  EXPECT_DOUBLE_EQ(l0_lagrangian(s, Tensor::scalar(0.6)).item(), 0.0);
}

TEST(LagrangianTest, Arithmetic) {
  LagrangianState s;
  s.mu1 = 1;
  s.mu2 = 0;
  s.target = 0.6;
  EXPECT_NEAR(l0_lagrangian(s, Tensor::scalar(0.5)).item(), 0.1, 1e-15);
}

TEST(LagrangianTest, MultipliersUnchangedAtTarget) {
  LagrangianState s;
  s.mu1 = 0.3;
  s.mu2 = 0.2;
  s.target = s.current = 0.8;
  update_multipliers(s, 0.1);
  EXPECT_EQ(s.mu1, 0.3);
  EXPECT_EQ(s.mu2, 0.2);
}

TEST(LagrangianTest, MuOneGrowsWhileBelowTarget) {
  LagrangianState s;
  s.target = 0.9;
  s.current = 0.2;
  double previous = s.mu1;
  for (int i = 0; i < 10; ++i) {
    update_multipliers(s, 0.05);
    EXPECT_GT(s.mu1, previous);
    EXPECT_GE(s.mu2, 0.0);
    previous = s.mu1;
  }
}

double run_controller(const ModelConfig& c, double target, int steps) {
  auto gates = StructuredGates::init(c, 3.0);
  AdamWConfig ac;
  ac.learning_rate = 0.05;
  AdamW opt(gates.parameters(), ac);
  LagrangianState state;
  state.target = target;
  for (int step = 0; step < steps; ++step) {
    opt.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    Tensor s = expected_sparsity(c, gates);
    state.current = s.item();
    tape.backward(l0_lagrangian(state, s));
    opt.step();
    update_multipliers(state, 0.5);
  }
  NoGradScope ng;
  return expected_sparsity(c, gates).item();
}

TEST(LagrangianTest, ControllerReachesTarget) {
  const ModelConfig c = testing::tiny_config();
  for (double target : {0.6, 0.95}) {
    const double s = run_controller(c, target, 2000);
    EXPECT_LT(std::abs(s - target), 0.02) << target;
  }
}

TEST(DistillTest, IdenticalLogitsGiveZero) {
  Tensor a = Tensor::matrix({{0.3, -1.2, 2.0}});
  EXPECT_NEAR(prediction_distill_loss(a, a, 2.0).item(), 0.0, 1e-15);
}

TEST(DistillTest, KlIsNonNegative) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor s = Tensor::randn({4, 3}, rng, 2.0), t = Tensor::randn({4, 3}, rng, 2.0);
    EXPECT_GE(prediction_distill_loss(s, t, 1.5).item(), 0.0);
  }
}

TEST(DistillTest, HandCase) {
  Tensor teacher = Tensor::matrix({{0, std::log(3.0)}});
  Tensor student = Tensor::matrix({{0, 0}});
  const double expected = 0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
  EXPECT_NEAR(prediction_distill_loss(student, teacher, 1.0).item(), expected, 1e-15);
  EXPECT_NEAR(expected, 0.1308, 1e-4);
}

TEST(DistillTest, ArityMismatchIsContractError) {
  EXPECT_THROW(prediction_distill_loss(Tensor::zeros({1, 2}), Tensor::zeros({1, 3}), 1.0), ContractError);
}

TEST(DistillTest, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  Tensor s = Tensor::randn({3, 4}, rng), t = Tensor::randn({3, 4}, rng);
  const auto r = testing::grad_check([&] { return prediction_distill_loss(s, t, 2.0); }, {s});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(LayerwiseDistillTest, SameStatesGiveZero) {
  Rng rng(8);
  std::vector<Tensor> h{Tensor::randn({3, 4}, rng), Tensor::randn({3, 4}, rng)};
  EXPECT_EQ(layerwise_distill_loss(h, h, DistillConfig::identity(2)).item(), 0.0);
}

TEST(LayerwiseDistillTest, ConstantOffsetGivesSquare) {
  Rng rng(9);
  std::vector<Tensor> teacher{Tensor::randn({3, 4}, rng), Tensor::randn({3, 4}, rng)};
  std::vector<Tensor> student{teacher[0], add_scalar(teacher[1], 0.7)};
  EXPECT_NEAR(layerwise_distill_loss(student, teacher, DistillConfig::identity(2)).item(), 0.49, 1e-14);
}

TEST(LayerwiseDistillTest, EmptyMapWarnsAndGivesZero) {
  Rng rng(10);
  std::vector<Tensor> h{Tensor::randn({2, 2}, rng)};
  DistillConfig cfg;
  ::testing::internal::CaptureStderr();
  const double v = layerwise_distill_loss(h, h, cfg).item();
  const std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_EQ(v, 0.0);
  EXPECT_NE(err.find("warning"), std::string::npos);
}

TEST(LayerwiseDistillTest, WidthMismatchIsContractError) {
  std::vector<Tensor> a{Tensor::zeros({2, 3})}, b{Tensor::zeros({2, 4})};
  EXPECT_THROW(layerwise_distill_loss(a, b, DistillConfig::identity(1)), ContractError);
}

TEST(LayerwiseDistillTest, NonInjectiveMapRejected) {
  DistillConfig cfg;
  cfg.layer_map = {{0, 1}, {1, 1}};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

}  // namespace
}  // namespace ibprune
