#include "ibprune/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "ibprune/errors.hpp"

namespace ibprune {

namespace {

using nlohmann::json;

/// Reads optional fields of one JSON object and rejects unknown keys.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void read_model(const json& j, ModelConfig& c) {
  Reader r(j, "model");
  r.get("num_layers", c.num_layers);
  r.get("hidden_dim", c.hidden_dim);
  r.get("num_heads", c.num_heads);
  r.get("ffn_dim", c.ffn_dim);
  r.get("vocab_size", c.vocab_size);
  r.get("max_seq_len", c.max_seq_len);
  r.get("num_labels", c.num_labels);
  r.get("dropout", c.dropout);
  r.finish();
}

void read_synth(const json& j, SynthSpec& s) {
  Reader r(j, "synthetic");
  r.get("vocab_size", s.vocab_size);
  r.get("num_classes", s.num_classes);
  r.get("min_length", s.min_length);
  r.get("max_length", s.max_length);
  r.get("num_signal", s.num_signal);
  r.get("signal_ids_per_class", s.signal_ids_per_class);
  r.finish();
}

}  // namespace

void SynthSpec::validate() const {
  if (num_classes < 2) throw ConfigError("synthetic: num_classes must be >= 2");
  if (num_signal < 1) throw ConfigError("synthetic: num_signal must be >= 1");
  if (signal_ids_per_class < 1) throw ConfigError("synthetic: signal_ids_per_class must be >= 1");
  if (vocab_size < 2 + num_classes * signal_ids_per_class) {
    throw ConfigError("synthetic: vocab_size " + std::to_string(vocab_size) +
                      " leaves no distractor ids after the classification token and " +
                      std::to_string(num_classes * signal_ids_per_class) + " signal ids");
  }
  if (min_length < 1 + num_signal) throw ConfigError("synthetic: min_length cannot hold the planted tokens");
  if (max_length < min_length) throw ConfigError("synthetic: max_length < min_length");
}

void DatasetSpec::validate() const {
  if (metric != "accuracy" && metric != "f1") throw ConfigError("dataset.metric must be 'accuracy' or 'f1'");
  if (is_synthetic()) {
    synthetic.validate();
    if (split_sizes.train == 0) throw ConfigError("dataset.split_sizes.train must be >= 1");
  } else if (validation_path.empty() || test_path.empty()) {
    throw ConfigError("dataset: JSONL datasets need train_path, validation_path and test_path");
  }
}

void OptimizerSettings::validate() const {
  if (!(learning_rate > 0) || !(sampler_learning_rate > 0) || !(gate_learning_rate > 0) ||
      !(multiplier_learning_rate > 0)) {
    throw ConfigError("optimizer: learning rates must be > 0");
  }
  if (weight_decay < 0) throw ConfigError("optimizer.weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("optimizer.batch_size must be >= 1");
}

void StageSchedule::validate() const {
  if (teacher_epochs < 0 || stage2_warmup_max_epochs < 0 || stage2_epochs < 0) {
    throw ConfigError("schedule: epoch counts must be >= 0");
  }
  if (stage1_min_steps < 0 || stage1_max_steps < stage1_min_steps) {
    throw ConfigError("schedule: need 0 <= stage1_min_steps <= stage1_max_steps");
  }
  if (stage1_patience < 1 || plateau_patience < 1 || eval_every < 1) {
    throw ConfigError("schedule: patience and eval_every must be >= 1");
  }
  if (!(sparsity_tolerance > 0) || plateau_tolerance < 0) throw ConfigError("schedule: bad tolerance");
  if (keep_rate_floor < 0 || keep_rate_floor >= 1) throw ConfigError("schedule.keep_rate_floor must be in [0, 1)");
}

void SweepGrid::validate() const {
  if (arms.empty() || loss_variants.empty() || gamma2.empty() || targets.empty()) {
    throw ConfigError("sweep: every grid axis needs at least one value");
  }
  for (const auto& a : arms) {
    if (a != "dynamic" && a != "structured" && a != "joint") throw ConfigError("sweep: unknown arm '" + a + "'");
  }
  for (const auto& v : loss_variants) {
    if (v != "ib" && v != "skim") throw ConfigError("sweep: unknown loss variant '" + v + "'");
  }
  for (double g : gamma2) {
    if (g < 0) throw ConfigError("sweep: gamma2 values must be >= 0");
  }
  for (double t : targets) {
    if (t < 0 || t >= 1) throw ConfigError("sweep: targets must be in [0, 1)");
  }
}

void RunConfig::validate() const {
  model.validate();
  loss_weights.validate();
  lagrangian.validate();
  gumbel.validate();
  distill.validate();
  optimizer.validate();
  schedule.validate();
  dataset.validate();
  if (loss_variant != "ib" && loss_variant != "skim") throw ConfigError("loss_variant must be 'ib' or 'skim'");
  sweep.validate();
  if (dataset.is_synthetic()) {
    const SynthSpec& s = dataset.synthetic;
    if (s.vocab_size > model.vocab_size) throw ConfigError("synthetic vocab_size exceeds model.vocab_size");
    if (s.num_classes != model.num_labels) throw ConfigError("synthetic num_classes differs from model.num_labels");
    if (s.max_length > model.max_seq_len) throw ConfigError("synthetic max_length exceeds model.max_seq_len");
  }
  for (const auto& [student, teacher] : distill.layer_map) {
    if (student < 0 || student >= model.num_layers || teacher < 0 || teacher >= model.num_layers) {
      throw ConfigError("distill.layer_map entry out of range");
    }
  }
}

RunConfig RunConfig::desk_default() {
  RunConfig c;
  c.model.num_labels = c.dataset.synthetic.num_classes;
  c.distill = DistillConfig::identity(c.model.num_layers);
  return c;
}

json to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers}, {"hidden_dim", c.hidden_dim}, {"num_heads", c.num_heads},
          {"ffn_dim", c.ffn_dim},       {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
          {"num_labels", c.num_labels}, {"dropout", c.dropout}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  read_model(j, c);
  return c;
}

json to_json(const Architecture& a) {
  json layers = json::array();
  for (const auto& l : a.layers) layers.push_back({{"num_heads", l.num_heads}, {"ffn_dim", l.ffn_dim}});
  return {{"hidden_dim", a.hidden_dim}, {"head_dim", a.head_dim},       {"vocab_size", a.vocab_size},
          {"max_seq_len", a.max_seq_len}, {"num_labels", a.num_labels}, {"sampler_dim", a.sampler_dim},
          {"layers", layers}};
}

Architecture architecture_from_json(const json& j) {
  Architecture a;
  try {
    a.hidden_dim = j.at("hidden_dim").get<int>();
    a.head_dim = j.at("head_dim").get<int>();
    a.vocab_size = j.at("vocab_size").get<int>();
    a.max_seq_len = j.at("max_seq_len").get<int>();
    a.num_labels = j.at("num_labels").get<int>();
    a.sampler_dim = j.at("sampler_dim").get<int>();
    for (const auto& l : j.at("layers")) {
      a.layers.push_back({l.at("num_heads").get<int>(), l.at("ffn_dim").get<int>()});
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("architecture: ") + e.what());
  }
  return a;
}

json to_json(const SynthSpec& s) {
  return {{"vocab_size", s.vocab_size}, {"num_classes", s.num_classes}, {"min_length", s.min_length},
          {"max_length", s.max_length}, {"num_signal", s.num_signal},
          {"signal_ids_per_class", s.signal_ids_per_class}};
}

SynthSpec synth_spec_from_json(const json& j) {
  SynthSpec s;
  read_synth(j, s);
  return s;
}

json to_json(const RunConfig& c) {
  json j;
  j["model"] = to_json(c.model);
  j["loss_weights"] = {{"gamma1", c.loss_weights.gamma1}, {"gamma2", c.loss_weights.gamma2},
                       {"beta", c.loss_weights.beta}};
  j["lagrangian"] = {{"target", c.lagrangian.target}, {"mu1", c.lagrangian.mu1}, {"mu2", c.lagrangian.mu2}};
  j["gumbel"] = {{"temperature", c.gumbel.temperature}, {"straight_through", c.gumbel.straight_through}};
  j["distill"] = {{"temperature", c.distill.temperature},
                  {"layer_map", c.distill.layer_map},
                  {"prediction_weight", c.distill.prediction_weight},
                  {"layerwise_weight", c.distill.layerwise_weight}};
  const auto& o = c.optimizer;
  j["optimizer"] = {{"learning_rate", o.learning_rate},
                    {"sampler_learning_rate", o.sampler_learning_rate},
                    {"gate_learning_rate", o.gate_learning_rate},
                    {"multiplier_learning_rate", o.multiplier_learning_rate},
                    {"weight_decay", o.weight_decay},
                    {"batch_size", o.batch_size}};
  const auto& s = c.schedule;
  j["schedule"] = {{"teacher_epochs", s.teacher_epochs},
                   {"stage1_min_steps", s.stage1_min_steps},
                   {"stage1_max_steps", s.stage1_max_steps},
                   {"stage1_patience", s.stage1_patience},
                   {"stage2_warmup_max_epochs", s.stage2_warmup_max_epochs},
                   {"stage2_epochs", s.stage2_epochs},
                   {"eval_every", s.eval_every},
                   {"plateau_tolerance", s.plateau_tolerance},
                   {"plateau_patience", s.plateau_patience},
                   {"sparsity_tolerance", s.sparsity_tolerance},
                   {"keep_rate_floor", s.keep_rate_floor}};
  const auto& d = c.dataset;
  j["dataset"] = {{"name", d.name},
                  {"train_path", d.train_path},
                  {"validation_path", d.validation_path},
                  {"test_path", d.test_path},
                  {"vocab_path", d.vocab_path},
                  {"metric", d.metric},
                  {"synthetic", to_json(d.synthetic)},
                  {"split_sizes",
                   {{"train", d.split_sizes.train},
                    {"validation", d.split_sizes.validation},
                    {"test", d.split_sizes.test}}}};
  j["loss_variant"] = c.loss_variant;
  j["sweep"] = {{"arms", c.sweep.arms},
                {"loss_variants", c.sweep.loss_variants},
                {"gamma2", c.sweep.gamma2},
                {"targets", c.sweep.targets},
                {"padding_dataset", c.sweep.padding_dataset}};
  j["seed"] = c.seed;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c = RunConfig::desk_default();
  Reader top(j, "config");
  if (const json* m = top.child("model")) read_model(*m, c.model);
  if (const json* lw = top.child("loss_weights")) {
    Reader r(*lw, "loss_weights");
    r.get("gamma1", c.loss_weights.gamma1);
    r.get("gamma2", c.loss_weights.gamma2);
    r.get("beta", c.loss_weights.beta);
    r.finish();
  }
  if (const json* lg = top.child("lagrangian")) {
    Reader r(*lg, "lagrangian");
    r.get("target", c.lagrangian.target);
    r.get("mu1", c.lagrangian.mu1);
    r.get("mu2", c.lagrangian.mu2);
    r.finish();
  }
  if (const json* g = top.child("gumbel")) {
    Reader r(*g, "gumbel");
    r.get("temperature", c.gumbel.temperature);
    r.get("straight_through", c.gumbel.straight_through);
    r.finish();
  }
  bool explicit_map = false;
  if (const json* d = top.child("distill")) {
    Reader r(*d, "distill");
    r.get("temperature", c.distill.temperature);
    explicit_map = d->contains("layer_map");
    r.get("layer_map", c.distill.layer_map);
    r.get("prediction_weight", c.distill.prediction_weight);
    r.get("layerwise_weight", c.distill.layerwise_weight);
    r.finish();
  }
  if (const json* o = top.child("optimizer")) {
    Reader r(*o, "optimizer");
    r.get("learning_rate", c.optimizer.learning_rate);
    r.get("sampler_learning_rate", c.optimizer.sampler_learning_rate);
    r.get("gate_learning_rate", c.optimizer.gate_learning_rate);
    r.get("multiplier_learning_rate", c.optimizer.multiplier_learning_rate);
    r.get("weight_decay", c.optimizer.weight_decay);
    r.get("batch_size", c.optimizer.batch_size);
    r.finish();
  }
  if (const json* s = top.child("schedule")) {
    Reader r(*s, "schedule");
    auto& sc = c.schedule;
    r.get("teacher_epochs", sc.teacher_epochs);
    r.get("stage1_min_steps", sc.stage1_min_steps);
    r.get("stage1_max_steps", sc.stage1_max_steps);
    r.get("stage1_patience", sc.stage1_patience);
    r.get("stage2_warmup_max_epochs", sc.stage2_warmup_max_epochs);
    r.get("stage2_epochs", sc.stage2_epochs);
    r.get("eval_every", sc.eval_every);
    r.get("plateau_tolerance", sc.plateau_tolerance);
    r.get("plateau_patience", sc.plateau_patience);
    r.get("sparsity_tolerance", sc.sparsity_tolerance);
    r.get("keep_rate_floor", sc.keep_rate_floor);
    r.finish();
  }
  if (const json* d = top.child("dataset")) {
    Reader r(*d, "dataset");
    auto& ds = c.dataset;
    r.get("name", ds.name);
    r.get("train_path", ds.train_path);
    r.get("validation_path", ds.validation_path);
    r.get("test_path", ds.test_path);
    r.get("vocab_path", ds.vocab_path);
    r.get("metric", ds.metric);
    if (const json* s = r.child("synthetic")) read_synth(*s, ds.synthetic);
    if (const json* s = r.child("split_sizes")) {
      Reader rs(*s, "dataset.split_sizes");
      rs.get("train", ds.split_sizes.train);
      rs.get("validation", ds.split_sizes.validation);
      rs.get("test", ds.split_sizes.test);
      rs.finish();
    }
    r.finish();
  }
  top.get("loss_variant", c.loss_variant);
  if (const json* sw = top.child("sweep")) {
    Reader r(*sw, "sweep");
    r.get("arms", c.sweep.arms);
    r.get("loss_variants", c.sweep.loss_variants);
    r.get("gamma2", c.sweep.gamma2);
    r.get("targets", c.sweep.targets);
    r.get("padding_dataset", c.sweep.padding_dataset);
    r.finish();
  }
  top.get("seed", c.seed);
  top.finish();
  if (!explicit_map) c.distill = [&] {
    DistillConfig d = DistillConfig::identity(c.model.num_layers);
    d.temperature = c.distill.temperature;
    d.prediction_weight = c.distill.prediction_weight;
    d.layerwise_weight = c.distill.layerwise_weight;
    return d;
  }();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  json j;
  try {
    j = json::parse(ss.str());
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const std::string& path, const RunConfig& config) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write config file '" + path + "'");
  out << to_json(config).dump(2) << "\n";
}

}  // namespace ibprune
