#include "ibprune/encoder.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>

#include "ibprune/errors.hpp"
#include "ibprune/ops.hpp"

namespace ibprune {

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

Tensor param(Shape shape, Rng& rng, double stddev) {
  Tensor t = Tensor::randn(std::move(shape), rng, stddev);
  t.set_requires_grad(true);
  return t;
}

Tensor constant_param(Shape shape, double value) {
  Tensor t = Tensor::full(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

Tensor fresh_copy(const Tensor& t) {
  Tensor c = t.detach();
  c.set_requires_grad(t.requires_grad());
  return c;
}

bool is_constant_ones(const Tensor& t) {
  if (t.requires_grad()) return false;
  for (double v : t.data()) {
    if (v != 1.0) return false;
  }
  return true;
}

std::vector<std::size_t> nonzero_indices(const Tensor& t) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (t[i] != 0.0) idx.push_back(i);
  }
  return idx;
}

// Plain (non-differentiable) slicing used by compaction.
Tensor select_rows(const Tensor& m, const std::vector<std::size_t>& rows) {
  const std::size_t cols = m.dim(1);
  std::vector<double> out;
  out.reserve(rows.size() * cols);
  for (std::size_t r : rows) {
    for (std::size_t c = 0; c < cols; ++c) out.push_back(m.at(r, c));
  }
  return Tensor({rows.size(), cols}, std::move(out), true);
}

Tensor select_cols(const Tensor& m, const std::vector<std::size_t>& cols) {
  const std::size_t rows = m.dim(0);
  std::vector<double> out;
  out.reserve(rows * cols.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c : cols) out.push_back(m.at(r, c));
  }
  return Tensor({rows, cols.size()}, std::move(out), true);
}

Tensor select_entries(const Tensor& v, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return Tensor({idx.size()}, std::move(out), true);
}

Tensor select_block(const Tensor& m, const std::vector<std::size_t>& rows,
                    const std::vector<std::size_t>& cols) {
  return select_cols(select_rows(m, rows), cols);
}

std::vector<std::size_t> head_columns(const std::vector<std::size_t>& heads, int head_dim) {
  std::vector<std::size_t> cols;
  for (std::size_t h : heads) {
    for (std::size_t j = 0; j < sz(head_dim); ++j) cols.push_back(h * sz(head_dim) + j);
  }
  return cols;
}

Tensor gate_at(const Tensor& gates, std::size_t i) { return narrow(gates, 0, i, 1); }

Tensor layer_norm_gated(const Tensor& x, const Tensor& gain, const Tensor& bias,
                        const StructuredMasks* masks) {
  if (masks == nullptr || is_constant_ones(masks->z_hidden)) return layer_norm(x, gain, bias, kLayerNormEpsilon);
  return masked_layer_norm(x, gain, bias, masks->z_hidden);
}

void check_masks_apply(const Encoder& model, const StructuredMasks* masks) {
  if (masks == nullptr) return;
  if (!model.is_dense()) throw ContractError("structured masks apply only to an uncompacted model");
}

}  // namespace

void ModelConfig::validate() const {
  if (num_layers < 1 || hidden_dim < 1 || num_heads < 1 || ffn_dim < 1 || vocab_size < 1 ||
      max_seq_len < 1 || num_labels < 1) {
    throw ConfigError("model config: every dimension must be >= 1");
  }
  if (hidden_dim % num_heads != 0) {
    throw ConfigError("model config: hidden_dim " + std::to_string(hidden_dim) +
                      " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model config: dropout must be in [0, 1)");
}

StructuredMasks StructuredMasks::ones(const ModelConfig& config) {
  StructuredMasks m;
  m.z_hidden = Tensor::ones({sz(config.hidden_dim)});
  for (int l = 0; l < config.num_layers; ++l) {
    m.z_head.push_back(Tensor::ones({sz(config.num_heads)}));
    m.z_int.push_back(Tensor::ones({sz(config.ffn_dim)}));
    m.z_mha.push_back(Tensor::ones({1}));
    m.z_ffn.push_back(Tensor::ones({1}));
  }
  return m;
}

void StructuredMasks::validate(const ModelConfig& config) const {
  const std::size_t layers = sz(config.num_layers);
  if (z_head.size() != layers || z_int.size() != layers || z_mha.size() != layers ||
      z_ffn.size() != layers) {
    throw ShapeError("structured masks: expected " + std::to_string(layers) + " layers");
  }
  auto check = [](const Tensor& t, Shape shape, const char* what) {
    if (t.shape() != shape) {
      throw ShapeError(std::string("structured masks: ") + what + " has shape " +
                       shape_to_string(t.shape()) + ", expected " + shape_to_string(shape));
    }
    for (double v : t.data()) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ContractError(std::string("structured masks: ") + what + " value outside [0, 1]");
      }
    }
  };
  check(z_hidden, {sz(config.hidden_dim)}, "z_hidden");
  for (std::size_t l = 0; l < layers; ++l) {
    check(z_head[l], {sz(config.num_heads)}, "z_head");
    check(z_int[l], {sz(config.ffn_dim)}, "z_int");
    check(z_mha[l], {1}, "z_mha");
    check(z_ffn[l], {1}, "z_ffn");
  }
}

bool StructuredMasks::is_binary() const {
  auto binary = [](const Tensor& t) {
    for (double v : t.data()) {
      if (v != 0.0 && v != 1.0) return false;
    }
    return true;
  };
  if (!binary(z_hidden)) return false;
  for (std::size_t l = 0; l < z_head.size(); ++l) {
    if (!binary(z_head[l]) || !binary(z_int[l]) || !binary(z_mha[l]) || !binary(z_ffn[l])) return false;
  }
  return true;
}

StructuredMasks StructuredMasks::binarized(double threshold) const {
  auto bin = [threshold](const Tensor& t) {
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = t[i] > threshold ? 1.0 : 0.0;
    return Tensor(t.shape(), std::move(out));
  };
  StructuredMasks m;
  m.z_hidden = bin(z_hidden);
  for (std::size_t l = 0; l < z_head.size(); ++l) {
    m.z_head.push_back(bin(z_head[l]));
    m.z_int.push_back(bin(z_int[l]));
    m.z_mha.push_back(bin(z_mha[l]));
    m.z_ffn.push_back(bin(z_ffn[l]));
  }
  return m;
}

Architecture Architecture::dense(const ModelConfig& config) {
  config.validate();
  Architecture a;
  a.hidden_dim = config.hidden_dim;
  a.head_dim = config.head_dim();
  a.vocab_size = config.vocab_size;
  a.max_seq_len = config.max_seq_len;
  a.num_labels = config.num_labels;
  a.layers.assign(sz(config.num_layers), LayerShape{config.num_heads, config.ffn_dim});
  return a;
}

Architecture Architecture::from_masks(const ModelConfig& config, const StructuredMasks& masks) {
  masks.validate(config);
  const StructuredMasks bin = masks.binarized(0.0);
  Architecture a = dense(config);
  a.hidden_dim = static_cast<int>(nonzero_indices(bin.z_hidden).size());
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const bool mha_on = bin.z_mha[l][0] != 0.0;
    const bool ffn_on = bin.z_ffn[l][0] != 0.0;
    a.layers[l].num_heads = mha_on ? static_cast<int>(nonzero_indices(bin.z_head[l]).size()) : 0;
    a.layers[l].ffn_dim = ffn_on ? static_cast<int>(nonzero_indices(bin.z_int[l]).size()) : 0;
  }
  return a;
}

std::size_t prunable_parameters(const Architecture& arch) {
  std::size_t total = 0;
  const std::size_t d = sz(arch.hidden_dim);
  for (const auto& layer : arch.layers) {
    total += 4 * d * sz(layer.num_heads) * sz(arch.head_dim);
    total += 2 * d * sz(layer.ffn_dim);
  }
  return total;
}

Encoder Encoder::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  Encoder m;
  m.base_config_ = config;
  m.arch_ = Architecture::dense(config);
  const std::size_t d = sz(config.hidden_dim), f = sz(config.ffn_dim);
  const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double sd_f = 1.0 / std::sqrt(static_cast<double>(f));
  m.token_embedding = param({sz(config.vocab_size), d}, rng, 1.0);
  m.position_embedding = param({sz(config.max_seq_len), d}, rng, 0.1);
  for (int l = 0; l < config.num_layers; ++l) {
    EncoderLayer layer;
    AttentionWeights a;
    a.num_heads = config.num_heads;
    a.ln_gain = constant_param({d}, 1.0);
    a.ln_bias = constant_param({d}, 0.0);
    a.wq = param({d, d}, rng, sd_d);
    a.bq = constant_param({d}, 0.0);
    a.wk = param({d, d}, rng, sd_d);
    a.bk = constant_param({d}, 0.0);
    a.wv = param({d, d}, rng, sd_d);
    a.bv = constant_param({d}, 0.0);
    a.wo = param({d, d}, rng, sd_d);
    layer.attention = std::move(a);
    FeedForwardWeights ff;
    ff.ln_gain = constant_param({d}, 1.0);
    ff.ln_bias = constant_param({d}, 0.0);
    ff.w1 = param({d, f}, rng, sd_d);
    ff.b1 = constant_param({f}, 0.0);
    ff.w2 = param({f, d}, rng, sd_f);
    layer.ffn = std::move(ff);
    m.layers.push_back(std::move(layer));
  }
  m.final_ln_gain = constant_param({d}, 1.0);
  m.final_ln_bias = constant_param({d}, 0.0);
  m.classifier_weight = param({d, sz(config.num_labels)}, rng, sd_d);
  m.classifier_bias = constant_param({sz(config.num_labels)}, 0.0);
  return m;
}

bool Encoder::is_dense() const {
  if (arch_.hidden_dim != base_config_.hidden_dim) return false;
  if (arch_.num_layers() != base_config_.num_layers) return false;
  for (const auto& layer : arch_.layers) {
    if (layer.num_heads != base_config_.num_heads || layer.ffn_dim != base_config_.ffn_dim) return false;
  }
  return true;
}

void Encoder::add_samplers(Rng& rng, int sampler_dim) {
  const std::size_t d = sz(arch_.hidden_dim);
  const int ds = sampler_dim > 0 ? sampler_dim : std::max(1, arch_.hidden_dim / 2);
  arch_.sampler_dim = ds;
  for (auto& layer : layers) {
    SamplerWeights s;
    s.w1 = param({d, sz(ds)}, rng, 0.02);
    s.b1 = constant_param({sz(ds)}, 0.0);
    // Zero output weights make the initial decision input-independent:
    // logits (0, 4.6) give a keep probability of sigmoid(4.6) ~ 0.990.
    s.w2 = constant_param({sz(ds), 2}, 0.0);
    s.b2 = Tensor({2}, {0.0, 4.6}, true);
    layer.sampler = std::move(s);
  }
}

void Encoder::remove_samplers() {
  arch_.sampler_dim = 0;
  for (auto& layer : layers) layer.sampler.reset();
}

Encoder Encoder::clone() const {
  Encoder c = *this;
  c.token_embedding = fresh_copy(token_embedding);
  c.position_embedding = fresh_copy(position_embedding);
  for (auto& layer : c.layers) {
    if (layer.attention) {
      auto& a = *layer.attention;
      for (Tensor* t : {&a.ln_gain, &a.ln_bias, &a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo}) {
        *t = fresh_copy(*t);
      }
    }
    if (layer.ffn) {
      auto& f = *layer.ffn;
      for (Tensor* t : {&f.ln_gain, &f.ln_bias, &f.w1, &f.b1, &f.w2}) *t = fresh_copy(*t);
    }
    if (layer.sampler) {
      auto& s = *layer.sampler;
      for (Tensor* t : {&s.w1, &s.b1, &s.w2, &s.b2}) *t = fresh_copy(*t);
    }
  }
  c.final_ln_gain = fresh_copy(final_ln_gain);
  c.final_ln_bias = fresh_copy(final_ln_bias);
  c.classifier_weight = fresh_copy(classifier_weight);
  c.classifier_bias = fresh_copy(classifier_bias);
  return c;
}

std::vector<std::pair<std::string, Tensor>> Encoder::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embeddings.token", token_embedding);
  out.emplace_back("embeddings.position", position_embedding);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    if (const auto& a = layers[l].attention) {
      out.emplace_back(p + "attention.ln_gain", a->ln_gain);
      out.emplace_back(p + "attention.ln_bias", a->ln_bias);
      out.emplace_back(p + "attention.wq", a->wq);
      out.emplace_back(p + "attention.bq", a->bq);
      out.emplace_back(p + "attention.wk", a->wk);
      out.emplace_back(p + "attention.bk", a->bk);
      out.emplace_back(p + "attention.wv", a->wv);
      out.emplace_back(p + "attention.bv", a->bv);
      out.emplace_back(p + "attention.wo", a->wo);
    }
    if (const auto& f = layers[l].ffn) {
      out.emplace_back(p + "ffn.ln_gain", f->ln_gain);
      out.emplace_back(p + "ffn.ln_bias", f->ln_bias);
      out.emplace_back(p + "ffn.w1", f->w1);
      out.emplace_back(p + "ffn.b1", f->b1);
      out.emplace_back(p + "ffn.w2", f->w2);
    }
    if (const auto& s = layers[l].sampler) {
      out.emplace_back(p + "sampler.w1", s->w1);
      out.emplace_back(p + "sampler.b1", s->b1);
      out.emplace_back(p + "sampler.w2", s->w2);
      out.emplace_back(p + "sampler.b2", s->b2);
    }
  }
  out.emplace_back("final_ln.gain", final_ln_gain);
  out.emplace_back("final_ln.bias", final_ln_bias);
  out.emplace_back("classifier.weight", classifier_weight);
  out.emplace_back("classifier.bias", classifier_bias);
  return out;
}

std::vector<Tensor> Encoder::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::vector<Tensor> Encoder::sampler_parameters() const {
  std::vector<Tensor> out;
  for (const auto& layer : layers) {
    if (layer.sampler) {
      out.insert(out.end(), {layer.sampler->w1, layer.sampler->b1, layer.sampler->w2, layer.sampler->b2});
    }
  }
  return out;
}

ParameterCount Encoder::parameter_count() const {
  ParameterCount c;
  const std::size_t d = sz(arch_.hidden_dim), dh = sz(arch_.head_dim);
  c.embedding = token_embedding.numel() + position_embedding.numel();
  for (const auto& shape : arch_.layers) {
    const std::size_t inner = sz(shape.num_heads) * dh;
    if (shape.num_heads > 0) {
      c.attention += 4 * d * inner + 3 * inner;
      c.layer_norm += 2 * d;
    }
    if (shape.ffn_dim > 0) {
      c.ffn += 2 * d * sz(shape.ffn_dim) + sz(shape.ffn_dim);
      c.layer_norm += 2 * d;
    }
    if (arch_.sampler_dim > 0) {
      const std::size_t ds = sz(arch_.sampler_dim);
      c.sampler += d * ds + ds + 2 * ds + 2;
    }
  }
  c.layer_norm += 2 * d;
  c.classifier = d * sz(arch_.num_labels) + sz(arch_.num_labels);
  return c;
}

Encoder Encoder::from_named(const ModelConfig& base, const Architecture& arch,
                            const std::vector<std::pair<std::string, Tensor>>& named) {
  std::map<std::string, Tensor> lookup(named.begin(), named.end());
  auto take = [&](const std::string& name, Shape shape) {
    auto it = lookup.find(name);
    if (it == lookup.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " +
                        shape_to_string(it->second.shape()) + ", expected " + shape_to_string(shape));
    }
    Tensor t = it->second.detach();
    t.set_requires_grad(true);
    lookup.erase(it);
    return t;
  };
  Encoder m;
  m.base_config_ = base;
  m.arch_ = arch;
  const std::size_t d = sz(arch.hidden_dim), dh = sz(arch.head_dim);
  m.token_embedding = take("embeddings.token", {sz(arch.vocab_size), d});
  m.position_embedding = take("embeddings.position", {sz(arch.max_seq_len), d});
  for (std::size_t l = 0; l < arch.layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    const auto& shape = arch.layers[l];
    EncoderLayer layer;
    if (shape.num_heads > 0) {
      const std::size_t inner = sz(shape.num_heads) * dh;
      AttentionWeights a;
      a.num_heads = shape.num_heads;
      a.ln_gain = take(p + "attention.ln_gain", {d});
      a.ln_bias = take(p + "attention.ln_bias", {d});
      a.wq = take(p + "attention.wq", {d, inner});
      a.bq = take(p + "attention.bq", {inner});
      a.wk = take(p + "attention.wk", {d, inner});
      a.bk = take(p + "attention.bk", {inner});
      a.wv = take(p + "attention.wv", {d, inner});
      a.bv = take(p + "attention.bv", {inner});
      a.wo = take(p + "attention.wo", {inner, d});
      layer.attention = std::move(a);
    }
    if (shape.ffn_dim > 0) {
      const std::size_t f = sz(shape.ffn_dim);
      FeedForwardWeights ff;
      ff.ln_gain = take(p + "ffn.ln_gain", {d});
      ff.ln_bias = take(p + "ffn.ln_bias", {d});
      ff.w1 = take(p + "ffn.w1", {d, f});
      ff.b1 = take(p + "ffn.b1", {f});
      ff.w2 = take(p + "ffn.w2", {f, d});
      layer.ffn = std::move(ff);
    }
    if (arch.sampler_dim > 0) {
      const std::size_t ds = sz(arch.sampler_dim);
      SamplerWeights s;
      s.w1 = take(p + "sampler.w1", {d, ds});
      s.b1 = take(p + "sampler.b1", {ds});
      s.w2 = take(p + "sampler.w2", {ds, 2});
      s.b2 = take(p + "sampler.b2", {2});
      layer.sampler = std::move(s);
    }
    m.layers.push_back(std::move(layer));
  }
  m.final_ln_gain = take("final_ln.gain", {d});
  m.final_ln_bias = take("final_ln.bias", {d});
  m.classifier_weight = take("classifier.weight", {d, sz(arch.num_labels)});
  m.classifier_bias = take("classifier.bias", {sz(arch.num_labels)});
  if (!lookup.empty()) throw FormatError("checkpoint has unexpected tensor '" + lookup.begin()->first + "'");
  return m;
}

Tensor masked_layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         const Tensor& feature_gate, double epsilon) {
  Tensor count = sum(feature_gate);
  if (count.item() <= 0.0) throw ContractError("masked_layer_norm: every feature is gated off");
  Tensor mu = div(sum(mul(x, feature_gate), -1, true), count);
  Tensor centered = sub(x, mu);
  Tensor var = div(sum(mul(mul(centered, centered), feature_gate), -1, true), count);
  Tensor normalized = mul(centered, pow_scalar(add_scalar(var, epsilon), -0.5));
  return mul(add(mul(normalized, gain), bias), feature_gate);
}

Tensor embed(const Encoder& model, std::span<const int> token_ids, const StructuredMasks* masks) {
  check_masks_apply(model, masks);
  const std::size_t length = token_ids.size();
  if (length == 0) throw ContractError("embed: empty token sequence");
  if (length > sz(model.architecture().max_seq_len)) {
    throw ContractError("embed: sequence length " + std::to_string(length) + " exceeds max_seq_len " +
                        std::to_string(model.architecture().max_seq_len));
  }
  Tensor x = add(embedding(model.token_embedding, token_ids), narrow(model.position_embedding, 0, 0, length));
  if (masks && !is_constant_ones(masks->z_hidden)) x = mul(x, masks->z_hidden);
  return x;
}

Tensor mha_forward(const Encoder& model, const Tensor& h, const Tensor& attn_mask,
                   const StructuredMasks* masks, int layer, std::span<const bool> query_kept,
                   const DropoutContext& dropout) {
  check_masks_apply(model, masks);
  const auto& maybe = model.layers.at(sz(layer)).attention;
  if (!maybe) return h;
  const AttentionWeights& a = *maybe;
  const std::size_t length = h.dim(0);
  if (attn_mask.defined() && attn_mask.shape() != Shape{length, length}) {
    throw ShapeError("mha_forward: attention mask " + shape_to_string(attn_mask.shape()) +
                     " for sequence of length " + std::to_string(length));
  }
  const std::size_t dh = sz(model.architecture().head_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor normed = layer_norm_gated(h, a.ln_gain, a.ln_bias, masks);
  Tensor q = add(matmul(normed, a.wq), a.bq);
  Tensor k = add(matmul(normed, a.wk), a.bk);
  Tensor v = add(matmul(normed, a.wv), a.bv);
  std::vector<Tensor> contexts;
  contexts.reserve(sz(a.num_heads));
  for (std::size_t head = 0; head < sz(a.num_heads); ++head) {
    Tensor qh = narrow(q, 1, head * dh, dh);
    Tensor kh = narrow(k, 1, head * dh, dh);
    Tensor vh = narrow(v, 1, head * dh, dh);
    Tensor scores = mul_scalar(matmul(qh, transpose(kh)), scale);
    Tensor weights = attn_mask.defined() ? masked_softmax(scores, attn_mask, query_kept) : softmax(scores, -1);
    Tensor ctx = matmul(weights, vh);
    if (masks) ctx = mul(ctx, gate_at(masks->z_head[sz(layer)], head));
    contexts.push_back(std::move(ctx));
  }
  Tensor update = matmul(contexts.size() == 1 ? contexts.front() : concat(contexts, 1), a.wo);
  if (masks) {
    if (!is_constant_ones(masks->z_hidden)) update = mul(update, masks->z_hidden);
    update = mul(update, masks->z_mha[sz(layer)]);
  }
  if (dropout.active()) update = ibprune::dropout(update, dropout.rate, *dropout.rng);
  return add(h, update);
}

Tensor ffn_forward(const Encoder& model, const Tensor& h, const StructuredMasks* masks, int layer,
                   const DropoutContext& dropout) {
  check_masks_apply(model, masks);
  const auto& maybe = model.layers.at(sz(layer)).ffn;
  if (!maybe) return h;
  const FeedForwardWeights& f = *maybe;
  Tensor normed = layer_norm_gated(h, f.ln_gain, f.ln_bias, masks);
  Tensor inner = gelu(add(matmul(normed, f.w1), f.b1));
  if (masks) inner = mul(inner, masks->z_int[sz(layer)]);
  Tensor update = matmul(inner, f.w2);
  if (masks) {
    if (!is_constant_ones(masks->z_hidden)) update = mul(update, masks->z_hidden);
    update = mul(update, masks->z_ffn[sz(layer)]);
  }
  if (dropout.active()) update = ibprune::dropout(update, dropout.rate, *dropout.rng);
  return add(h, update);
}

Tensor classify(const Encoder& model, const Tensor& final_hidden, const StructuredMasks* masks) {
  check_masks_apply(model, masks);
  const std::array<std::size_t, 1> first{0};
  Tensor pooled = gather_rows(final_hidden, first);
  Tensor normed = layer_norm_gated(pooled, model.final_ln_gain, model.final_ln_bias, masks);
  return add(matmul(normed, model.classifier_weight), model.classifier_bias);
}

Encoder finalize_prune(const Encoder& model, const StructuredMasks& masks) {
  if (!model.is_dense()) throw ContractError("finalize_prune: model is already compacted");
  const ModelConfig& config = model.base_config();
  masks.validate(config);
  if (!masks.is_binary()) throw ContractError("finalize_prune: masks must be binarized first");

  const std::vector<std::size_t> dims = nonzero_indices(masks.z_hidden);
  if (dims.empty()) throw ContractError("finalize_prune: every hidden dimension is pruned");
  std::size_t total_heads = 0;
  bool any_mha_open = false;
  for (std::size_t l = 0; l < masks.z_head.size(); ++l) {
    total_heads += nonzero_indices(masks.z_head[l]).size();
    any_mha_open = any_mha_open || masks.z_mha[l][0] != 0.0;
  }
  if (total_heads == 0 && any_mha_open) {
    throw ContractError("finalize_prune: all heads of all layers removed while an attention layer gate is open");
  }

  Encoder out;
  out.base_config_ = config;
  out.arch_ = Architecture::from_masks(config, masks);
  out.arch_.sampler_dim = model.architecture().sampler_dim;
  const std::size_t dh = sz(config.head_dim());
  const std::vector<std::size_t> all_pos = [&] {
    std::vector<std::size_t> v(model.position_embedding.dim(0));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
    return v;
  }();
  const std::vector<std::size_t> all_tok = [&] {
    std::vector<std::size_t> v(model.token_embedding.dim(0));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
    return v;
  }();
  out.token_embedding = select_block(model.token_embedding, all_tok, dims);
  out.position_embedding = select_block(model.position_embedding, all_pos, dims);

  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const EncoderLayer& src = model.layers[l];
    EncoderLayer dst;
    const auto heads = nonzero_indices(masks.z_head[l]);
    if (src.attention && masks.z_mha[l][0] != 0.0 && !heads.empty()) {
      const auto& a = *src.attention;
      const auto cols = head_columns(heads, static_cast<int>(dh));
      AttentionWeights b;
      b.num_heads = static_cast<int>(heads.size());
      b.ln_gain = select_entries(a.ln_gain, dims);
      b.ln_bias = select_entries(a.ln_bias, dims);
      b.wq = select_block(a.wq, dims, cols);
      b.bq = select_entries(a.bq, cols);
      b.wk = select_block(a.wk, dims, cols);
      b.bk = select_entries(a.bk, cols);
      b.wv = select_block(a.wv, dims, cols);
      b.bv = select_entries(a.bv, cols);
      b.wo = select_block(a.wo, cols, dims);
      dst.attention = std::move(b);
    }
    const auto units = nonzero_indices(masks.z_int[l]);
    if (src.ffn && masks.z_ffn[l][0] != 0.0 && !units.empty()) {
      const auto& f = *src.ffn;
      FeedForwardWeights g;
      g.ln_gain = select_entries(f.ln_gain, dims);
      g.ln_bias = select_entries(f.ln_bias, dims);
      g.w1 = select_block(f.w1, dims, units);
      g.b1 = select_entries(f.b1, units);
      g.w2 = select_block(f.w2, units, dims);
      dst.ffn = std::move(g);
    }
    if (src.sampler) {
      const auto& s = *src.sampler;
      SamplerWeights t;
      t.w1 = select_rows(s.w1, dims);
      t.b1 = fresh_copy(s.b1);
      t.w2 = fresh_copy(s.w2);
      t.b2 = fresh_copy(s.b2);
      dst.sampler = std::move(t);
    }
    out.layers.push_back(std::move(dst));
  }
  out.final_ln_gain = select_entries(model.final_ln_gain, dims);
  out.final_ln_bias = select_entries(model.final_ln_bias, dims);
  out.classifier_weight = select_rows(model.classifier_weight, dims);
  out.classifier_bias = fresh_copy(model.classifier_bias);
  return out;
}

}  // namespace ibprune
