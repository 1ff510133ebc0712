#include "ibprune/static_sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <set>

#include "ibprune/errors.hpp"
#include "ibprune/ops.hpp"

namespace ibprune {

namespace {

Tensor gate_param(std::size_t n, double value) {
  Tensor t = Tensor::full({n}, value);
  t.set_requires_grad(true);
  return t;
}

double sigmoid_value(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

Tensor clamp_log_alpha(const Tensor& log_alpha) {
  return clamp(log_alpha, -kLogAlphaClamp, kLogAlphaClamp, ClampGrad::kPassThrough);
}

StructuredMasks map_gates(const StructuredGates& g, const std::function<Tensor(const Tensor&)>& fn) {
  StructuredMasks m;
  m.z_hidden = fn(g.hidden);
  for (std::size_t l = 0; l < g.head.size(); ++l) {
    m.z_head.push_back(fn(g.head[l]));
    m.z_int.push_back(fn(g.intermediate[l]));
    m.z_mha.push_back(fn(g.mha[l]));
    m.z_ffn.push_back(fn(g.ffn[l]));
  }
  return m;
}

}  // namespace

void HardConcreteParams::validate() const {
  if (!(beta > 0.0) || !(gamma < 0.0) || !(zeta > 1.0)) {
    throw ConfigError("hard concrete: need beta > 0, gamma < 0 < 1 < zeta");
  }
}

Tensor hc_sample(const Tensor& log_alpha, Rng& rng, const HardConcreteParams& params) {
  const std::size_t n = log_alpha.numel();
  std::vector<double> noise(n);
  for (auto& v : noise) {
    const double u = rng.uniform();
    v = std::log(u) - std::log1p(-u);
  }
  Tensor s = sigmoid(mul_scalar(add(clamp_log_alpha(log_alpha), Tensor(log_alpha.shape(), std::move(noise))),
                                1.0 / params.beta));
  Tensor stretched = add_scalar(mul_scalar(s, params.zeta - params.gamma), params.gamma);
  return clamp(stretched, 0.0, 1.0, ClampGrad::kPassThrough);
}

Tensor hc_deterministic(const Tensor& log_alpha, const HardConcreteParams& params) {
  Tensor stretched = add_scalar(mul_scalar(sigmoid(clamp_log_alpha(log_alpha)), params.zeta - params.gamma),
                                params.gamma);
  return clamp(stretched, 0.0, 1.0, ClampGrad::kPassThrough);
}

Tensor hc_open_probability(const Tensor& log_alpha, const HardConcreteParams& params) {
  return sigmoid(add_scalar(clamp_log_alpha(log_alpha), -params.beta * std::log(-params.gamma / params.zeta)));
}

double hc_open_probability(double log_alpha, const HardConcreteParams& params) {
  const double la = std::clamp(log_alpha, -kLogAlphaClamp, kLogAlphaClamp);
  return sigmoid_value(la - params.beta * std::log(-params.gamma / params.zeta));
}

StructuredGates StructuredGates::init(const ModelConfig& config, double initial) {
  config.validate();
  StructuredGates g;
  g.hidden = gate_param(static_cast<std::size_t>(config.hidden_dim), initial);
  for (int l = 0; l < config.num_layers; ++l) {
    g.head.push_back(gate_param(static_cast<std::size_t>(config.num_heads), initial));
    g.intermediate.push_back(gate_param(static_cast<std::size_t>(config.ffn_dim), initial));
    g.mha.push_back(gate_param(1, initial));
    g.ffn.push_back(gate_param(1, initial));
  }
  return g;
}

std::vector<Tensor> StructuredGates::parameters() const {
  std::vector<Tensor> out{hidden};
  for (std::size_t l = 0; l < head.size(); ++l) {
    out.insert(out.end(), {head[l], intermediate[l], mha[l], ffn[l]});
  }
  return out;
}

StructuredMasks StructuredGates::sample(Rng& rng) const {
  return map_gates(*this, [&](const Tensor& la) { return hc_sample(la, rng, params); });
}

StructuredMasks StructuredGates::deterministic() const {
  return map_gates(*this, [&](const Tensor& la) { return hc_deterministic(la, params); });
}

StructuredMasks StructuredGates::binarized() const {
  NoGradScope no_grad;
  return deterministic().binarized(0.5);
}

Tensor expected_sparsity(const ModelConfig& config, const StructuredGates& gates) {
  const auto& p = gates.params;
  const double total = static_cast<double>(prunable_parameters(Architecture::dense(config)));
  const double dh = config.head_dim();
  Tensor dims = sum(hc_open_probability(gates.hidden, p));
  Tensor remaining;
  for (std::size_t l = 0; l < gates.head.size(); ++l) {
    Tensor heads = mul(sum(hc_open_probability(gates.head[l], p)), sum(hc_open_probability(gates.mha[l], p)));
    Tensor units = mul(sum(hc_open_probability(gates.intermediate[l], p)), sum(hc_open_probability(gates.ffn[l], p)));
    Tensor layer = add(mul_scalar(heads, 4.0 * dh), mul_scalar(units, 2.0));
    remaining = remaining.defined() ? add(remaining, layer) : layer;
  }
  return add_scalar(mul_scalar(mul(remaining, dims), -1.0 / total), 1.0);
}

double realized_sparsity(const ModelConfig& config, const StructuredMasks& binary_masks) {
  const double total = static_cast<double>(prunable_parameters(Architecture::dense(config)));
  const double kept = static_cast<double>(prunable_parameters(Architecture::from_masks(config, binary_masks)));
  return 1.0 - kept / total;
}

void LagrangianState::validate() const {
  if (!(target >= 0.0 && target < 1.0)) throw ConfigError("lagrangian: target sparsity must be in [0, 1)");
}

Tensor l0_lagrangian(const LagrangianState& state, const Tensor& expected) {
  Tensor gap = add_scalar(neg(expected), state.target);
  return add(mul_scalar(gap, state.mu1), mul_scalar(mul(gap, gap), state.mu2));
}

void update_multipliers(LagrangianState& state, double learning_rate) {
  const double gap = state.target - state.current;
  state.mu1 += learning_rate * gap;
  state.mu2 = std::max(0.0, state.mu2 + learning_rate * gap * gap);
}

void DistillConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("distillation temperature must be > 0");
  std::set<int> students, teachers;
  for (const auto& [s, t] : layer_map) {
    if (!students.insert(s).second || !teachers.insert(t).second) {
      throw ConfigError("distillation layer map must be injective");
    }
  }
}

DistillConfig DistillConfig::identity(int num_layers) {
  DistillConfig c;
  for (int i = 0; i < num_layers; ++i) c.layer_map.emplace_back(i, i);
  return c;
}

Tensor prediction_distill_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("distillation temperature must be > 0");
  if (student_logits.shape() != teacher_logits.shape() || student_logits.rank() != 2) {
    throw ContractError("prediction distillation: student " + shape_to_string(student_logits.shape()) +
                        " vs teacher " + shape_to_string(teacher_logits.shape()));
  }
  const double inv_t = 1.0 / temperature;
  Tensor teacher_log = log_softmax(mul_scalar(teacher_logits.detach(), inv_t), -1);
  Tensor teacher_p = exp(teacher_log);
  Tensor student_log = log_softmax(mul_scalar(student_logits, inv_t), -1);
  Tensor kl = sum(mul(teacher_p, sub(teacher_log, student_log)));
  return mul_scalar(kl, temperature * temperature / static_cast<double>(student_logits.dim(0)));
}

Tensor layerwise_distill_loss(const std::vector<Tensor>& student, const std::vector<Tensor>& teacher,
                              const DistillConfig& config) {
  config.validate();
  if (config.layer_map.empty()) {
    std::cerr << "warning: layerwise distillation has an empty layer map; loss is 0\n";
    return Tensor::scalar(0.0);
  }
  Tensor total;
  for (const auto& [s, t] : config.layer_map) {
    if (s < 0 || t < 0 || static_cast<std::size_t>(s) >= student.size() ||
        static_cast<std::size_t>(t) >= teacher.size()) {
      throw ContractError("layerwise distillation: layer pair (" + std::to_string(s) + ", " + std::to_string(t) +
                          ") out of range");
    }
    const Tensor& a = student[static_cast<std::size_t>(s)];
    const Tensor& b = teacher[static_cast<std::size_t>(t)];
    if (a.shape() != b.shape()) {
      throw ContractError("layerwise distillation: width mismatch " + shape_to_string(a.shape()) + " vs " +
                          shape_to_string(b.shape()));
    }
    Tensor diff = sub(a, b.detach());
    Tensor term = mul_scalar(frobenius_sq(diff), 1.0 / static_cast<double>(a.numel()));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

}  // namespace ibprune
