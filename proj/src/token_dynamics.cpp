#include "ibprune/token_dynamics.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "ibprune/errors.hpp"
#include "ibprune/ops.hpp"
#include "json.hpp"

namespace ibprune {

namespace {

void require_vector(const Tensor& t, const char* op) {
  if (!t.defined() || t.rank() != 1) {
    throw ShapeError(std::string(op) + ": expected a rank-1 tensor, got " +
                     (t.defined() ? shape_to_string(t.shape()) : std::string("undefined")));
  }
}

}  // namespace

void GumbelConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("gumbel temperature must be > 0");
}

Tensor sampler_logits(const SamplerWeights& sampler, const Tensor& h) {
  Tensor hidden = gelu(add(matmul(h, sampler.w1), sampler.b1));
  return add(matmul(hidden, sampler.w2), sampler.b2);
}

Tensor keep_probs_from_logits(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) != 2) {
    throw ShapeError("keep_probs_from_logits: expected [L, 2], got " + shape_to_string(logits.shape()));
  }
  Tensor probs = softmax(logits, -1);
  return reshape(narrow(probs, 1, 1, 1), {logits.dim(0)});
}

Tensor sampler_forward(const Encoder& model, const Tensor& h, int layer) {
  const auto& sampler = model.layers.at(static_cast<std::size_t>(layer)).sampler;
  if (!sampler) throw ContractError("sampler_forward: layer " + std::to_string(layer) + " has no sampler");
  return keep_probs_from_logits(sampler_logits(*sampler, h));
}

Tensor gumbel_sample(const Tensor& keep_probs, const GumbelConfig& config, Rng& rng) {
  require_vector(keep_probs, "gumbel_sample");
  config.validate();
  const double floor = std::exp(-kLogitClamp);
  Tensor log_keep = log(clamp(keep_probs, floor, 1.0, ClampGrad::kZero));
  Tensor log_drop = log(clamp(add_scalar(neg(keep_probs), 1.0), floor, 1.0, ClampGrad::kZero));
  const std::size_t n = keep_probs.numel();
  std::vector<double> noise(n);
  for (auto& g : noise) g = rng.gumbel() - rng.gumbel();
  Tensor perturbed = add(sub(log_keep, log_drop), Tensor({n}, std::move(noise)));
  Tensor soft = sigmoid(mul_scalar(perturbed, 1.0 / config.temperature));
  if (!config.straight_through) return soft;
  return straight_through(hard_decisions(soft), soft);
}

Tensor hard_decisions(const Tensor& keep_probs) {
  require_vector(keep_probs, "hard_decisions");
  const std::size_t n = keep_probs.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = keep_probs[i] > 0.5 ? 1.0 : 0.0;
  return Tensor({n}, std::move(out));
}

Tensor to_attention_mask(const Tensor& z) {
  require_vector(z, "to_attention_mask");
  return outer(z, z);
}

PhysicalPrune prune_physical(const Tensor& h, std::span<const std::size_t> positions, const Tensor& z,
                             int layer) {
  require_vector(z, "prune_physical");
  const std::size_t rows = h.dim(0);
  if (z.numel() != rows || positions.size() != rows) {
    throw ShapeError("prune_physical: mask length " + std::to_string(z.numel()) + " and " +
                     std::to_string(positions.size()) + " positions for " + std::to_string(rows) + " rows");
  }
  PhysicalPrune out;
  std::vector<std::size_t> keep_rows;
  const std::size_t d = h.dim(1);
  for (std::size_t r = 0; r < rows; ++r) {
    const double v = z[r];
    if (v != 0.0 && v != 1.0) throw ContractError("prune_physical: mask must be hard (0 or 1)");
    if (v == 1.0) {
      keep_rows.push_back(r);
      out.kept_positions.push_back(positions[r]);
    } else {
      DroppedToken t;
      t.position = positions[r];
      t.layer = layer;
      t.state.assign(h.data().begin() + static_cast<std::ptrdiff_t>(r * d),
                     h.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
      out.dropped.push_back(std::move(t));
    }
  }
  if (keep_rows.empty()) throw ContractError("prune_physical: every token was dropped");
  out.hidden = keep_rows.size() == rows ? h : gather_rows(h, keep_rows);
  return out;
}

Tensor forward_to_final(const Tensor& final_hidden, std::span<const std::size_t> kept_positions,
                        const std::vector<DroppedToken>& dropped, std::size_t length) {
  if (final_hidden.dim(0) != kept_positions.size()) {
    throw ShapeError("forward_to_final: " + std::to_string(final_hidden.dim(0)) + " rows but " +
                     std::to_string(kept_positions.size()) + " kept positions");
  }
  const std::size_t d = final_hidden.dim(1);
  std::vector<bool> taken(length, false);
  auto claim = [&](std::size_t pos) {
    if (pos >= length) throw ContractError("forward_to_final: position " + std::to_string(pos) + " out of range");
    if (taken[pos]) throw ContractError("forward_to_final: position " + std::to_string(pos) + " filled twice");
    taken[pos] = true;
  };
  for (std::size_t p : kept_positions) claim(p);
  std::vector<double> dropped_rows(length * d, 0.0);
  for (const auto& t : dropped) {
    claim(t.position);
    if (t.state.size() != d) throw ShapeError("forward_to_final: dropped state width mismatch");
    std::copy(t.state.begin(), t.state.end(), dropped_rows.begin() + static_cast<std::ptrdiff_t>(t.position * d));
  }
  Tensor kept = scatter_rows(final_hidden, kept_positions, length);
  if (dropped.empty()) return kept;
  return add(kept, Tensor({length, d}, std::move(dropped_rows)));
}

std::string trace_to_json_line(const PruneTrace& trace) {
  nlohmann::json j;
  j["example"] = trace.example;
  j["original_length"] = trace.original_length;
  j["kept_counts"] = trace.kept_counts;
  j["kept_indices"] = trace.kept_indices;
  return j.dump();
}

PruneTrace trace_from_json_line(const std::string& line) {
  PruneTrace t;
  try {
    const auto j = nlohmann::json::parse(line);
    t.example = j.at("example").get<std::size_t>();
    t.original_length = j.at("original_length").get<std::size_t>();
    t.kept_counts = j.at("kept_counts").get<std::vector<std::size_t>>();
    if (j.contains("kept_indices")) t.kept_indices = j.at("kept_indices").get<std::vector<std::vector<std::size_t>>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("pruning trace: ") + e.what());
  }
  std::size_t previous = t.original_length;
  for (std::size_t c : t.kept_counts) {
    if (c > previous) throw FormatError("pruning trace: kept counts must be nonincreasing");
    previous = c;
  }
  return t;
}

void write_traces(std::ostream& out, const std::vector<PruneTrace>& traces) {
  for (const auto& t : traces) out << trace_to_json_line(t) << '\n';
}

std::vector<PruneTrace> read_traces(std::istream& in) {
  std::vector<PruneTrace> traces;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      traces.push_back(trace_from_json_line(line));
    } catch (const FormatError& e) {
      throw FormatError("line " + std::to_string(number) + ": " + e.what());
    }
  }
  return traces;
}

void write_traces_file(const std::string& path, const std::vector<PruneTrace>& traces) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  write_traces(out, traces);
}

std::vector<PruneTrace> read_traces_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  return read_traces(in);
}

}  // namespace ibprune
