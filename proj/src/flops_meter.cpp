#include "ibprune/flops_meter.hpp"

#include <algorithm>

#include "ibprune/errors.hpp"
#include "json.hpp"

namespace ibprune {

namespace {

FlopCount attention_cost(std::uint64_t tokens, std::uint64_t d, std::uint64_t heads, std::uint64_t head_dim) {
  if (heads == 0 || tokens == 0) return 0;
  const std::uint64_t inner = heads * head_dim;
  FlopCount f = kLayerNormFlopsPerElement * tokens * d;
  f += 3 * flops_linear(tokens, d, inner);
  f += heads * 2 * tokens * tokens * head_dim;          // scores
  f += heads * kSoftmaxFlopsPerEntry * tokens * tokens;  // softmax
  f += heads * 2 * tokens * tokens * head_dim;          // context
  f += flops_linear(tokens, inner, d);
  return f;
}

FlopCount feed_forward_cost(std::uint64_t tokens, std::uint64_t d, std::uint64_t units) {
  if (units == 0 || tokens == 0) return 0;
  return kLayerNormFlopsPerElement * tokens * d + flops_linear(tokens, d, units) +
         kGeluFlopsPerElement * tokens * units + flops_linear(tokens, units, d);
}

const LayerShape& layer_shape(const Architecture& arch, int layer) {
  if (layer < 0 || layer >= arch.num_layers()) throw IndexError("flops: layer " + std::to_string(layer) + " out of range");
  return arch.layers[static_cast<std::size_t>(layer)];
}

}  // namespace

FlopCount flops_linear(std::uint64_t tokens, std::uint64_t d_in, std::uint64_t d_out) {
  return 2 * tokens * d_in * d_out;
}

FlopCount flops_mha(std::uint64_t tokens, const Architecture& arch, int layer) {
  return attention_cost(tokens, static_cast<std::uint64_t>(arch.hidden_dim),
                        static_cast<std::uint64_t>(layer_shape(arch, layer).num_heads),
                        static_cast<std::uint64_t>(arch.head_dim));
}

FlopCount flops_mha(std::uint64_t tokens, const ModelConfig& config, const StructuredMasks& masks, int layer) {
  return flops_mha(tokens, Architecture::from_masks(config, masks), layer);
}

FlopCount flops_ffn(std::uint64_t tokens, const Architecture& arch, int layer) {
  return feed_forward_cost(tokens, static_cast<std::uint64_t>(arch.hidden_dim),
                           static_cast<std::uint64_t>(layer_shape(arch, layer).ffn_dim));
}

FlopCount flops_ffn(std::uint64_t tokens, const ModelConfig& config, const StructuredMasks& masks, int layer) {
  return flops_ffn(tokens, Architecture::from_masks(config, masks), layer);
}

FlopCount flops_sampler(std::uint64_t tokens, const Architecture& arch) {
  if (arch.sampler_dim <= 0) return 0;
  const std::uint64_t d = static_cast<std::uint64_t>(arch.hidden_dim);
  const std::uint64_t ds = static_cast<std::uint64_t>(arch.sampler_dim);
  return flops_linear(tokens, d, ds) + kGeluFlopsPerElement * tokens * ds + flops_linear(tokens, ds, 2) +
         kSoftmaxFlopsPerEntry * tokens * 2;
}

FlopCount flops_classifier(const Architecture& arch) {
  const std::uint64_t d = static_cast<std::uint64_t>(arch.hidden_dim);
  return kLayerNormFlopsPerElement * d + flops_linear(1, d, static_cast<std::uint64_t>(arch.num_labels));
}

const std::map<std::string, std::size_t>& PaddingStrategy::fixed_lengths() {
  static const std::map<std::string, std::size_t> table{
      {"MRPC", 128}, {"MNLI", 128}, {"QNLI", 128}, {"SST2", 64}};
  return table;
}

std::size_t PaddingStrategy::fixed_length() const {
  const auto& table = fixed_lengths();
  const auto it = table.find(dataset);
  if (it == table.end()) throw ConfigError("no fixed padding length for dataset '" + dataset + "'");
  return it->second;
}

PaddingMode PaddingStrategy::parse_mode(const std::string& text) {
  if (text == "batch") return PaddingMode::kBatch;
  if (text == "sequence") return PaddingMode::kSequence;
  throw ConfigError("padding mode must be 'batch' or 'sequence', got '" + text + "'");
}

std::string PaddingStrategy::mode_name(PaddingMode mode) {
  return mode == PaddingMode::kBatch ? "batch" : "sequence";
}

double FlopsReport::mean_total() const {
  return examples == 0 ? 0.0 : static_cast<double>(total) / static_cast<double>(examples);
}

double FlopsReport::mean_baseline() const {
  return examples == 0 ? 0.0 : static_cast<double>(baseline) / static_cast<double>(examples);
}

std::string FlopsReport::to_json() const {
  nlohmann::json j;
  j["padding"] = padding;
  j["examples"] = examples;
  j["mha_per_layer"] = mha;
  j["ffn_per_layer"] = ffn;
  j["sampler"] = sampler;
  j["classifier"] = classifier;
  j["total"] = total;
  j["baseline"] = baseline;
  j["mean_total"] = mean_total();
  j["mean_baseline"] = mean_baseline();
  j["speedup"] = speedup;
  return j.dump(2);
}

FlopsReport FlopsReport::from_json(const std::string& text) {
  FlopsReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    r.padding = j.at("padding").get<std::string>();
    r.examples = j.at("examples").get<std::size_t>();
    r.mha = j.at("mha_per_layer").get<std::vector<FlopCount>>();
    r.ffn = j.at("ffn_per_layer").get<std::vector<FlopCount>>();
    r.sampler = j.at("sampler").get<FlopCount>();
    r.classifier = j.at("classifier").get<FlopCount>();
    r.total = j.at("total").get<FlopCount>();
    r.baseline = j.at("baseline").get<FlopCount>();
    r.speedup = j.at("speedup").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("flops report: ") + e.what());
  }
  return r;
}

FlopsReport model_flops(const std::vector<PruneTrace>& traces, const ModelConfig& dense_config,
                        const Architecture& arch, const PaddingStrategy& strategy) {
  const Architecture dense = Architecture::dense(dense_config);
  const std::size_t layers = static_cast<std::size_t>(arch.num_layers());
  if (strategy.mode == PaddingMode::kBatch && strategy.batch_size == 0) throw ConfigError("batch size must be >= 1");

  std::vector<std::size_t> padded(traces.size());
  if (strategy.mode == PaddingMode::kSequence) {
    const std::size_t fixed = strategy.fixed_length();
    for (std::size_t e = 0; e < traces.size(); ++e) {
      if (traces[e].original_length > fixed) {
        throw ConfigError("example " + std::to_string(traces[e].example) + " has " +
                          std::to_string(traces[e].original_length) + " tokens, more than the fixed length " +
                          std::to_string(fixed));
      }
      padded[e] = fixed;
    }
  } else {
    for (std::size_t start = 0; start < traces.size(); start += strategy.batch_size) {
      const std::size_t end = std::min(traces.size(), start + strategy.batch_size);
      std::size_t longest = 0;
      for (std::size_t e = start; e < end; ++e) longest = std::max(longest, traces[e].original_length);
      for (std::size_t e = start; e < end; ++e) padded[e] = longest;
    }
  }

  FlopsReport r;
  r.padding = PaddingStrategy::mode_name(strategy.mode);
  r.examples = traces.size();
  r.mha.assign(layers, 0);
  r.ffn.assign(layers, 0);
  const bool dynamic = arch.sampler_dim > 0;
  for (std::size_t e = 0; e < traces.size(); ++e) {
    const PruneTrace& t = traces[e];
    const std::uint64_t length = padded[e];
    if (dynamic && t.kept_counts.size() != layers) {
      throw FormatError("trace of example " + std::to_string(t.example) + " has " +
                        std::to_string(t.kept_counts.size()) + " layers, model has " + std::to_string(layers));
    }
    for (int i = 0; i < dense.num_layers(); ++i) {
      r.baseline += flops_mha(length, dense, i) + flops_ffn(length, dense, i);
    }
    r.baseline += flops_classifier(dense);

    std::uint64_t incoming = length;
    for (std::size_t i = 0; i < layers; ++i) {
      std::uint64_t tokens = length;
      if (dynamic) {
        r.sampler += flops_sampler(incoming, arch);
        tokens = t.kept_counts[i];
        incoming = tokens;
      }
      r.mha[i] += flops_mha(tokens, arch, static_cast<int>(i));
      r.ffn[i] += flops_ffn(tokens, arch, static_cast<int>(i));
    }
    r.classifier += flops_classifier(arch);
  }
  r.total = r.sampler + r.classifier;
  for (std::size_t i = 0; i < layers; ++i) r.total += r.mha[i] + r.ffn[i];
  r.speedup = r.total == 0 ? 1.0 : static_cast<double>(r.baseline) / static_cast<double>(r.total);
  return r;
}

}  // namespace ibprune
