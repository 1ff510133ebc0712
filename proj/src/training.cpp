#include "ibprune/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "ibprune/errors.hpp"
#include "ibprune/forward.hpp"
#include "ibprune/ops.hpp"
#include "ibprune/optim.hpp"
#include "ibprune/static_sparsity.hpp"

namespace ibprune {

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : ""; }

int argmax(const Tensor& logits) {
  const auto d = logits.data();
  return static_cast<int>(std::max_element(d.begin(), d.end()) - d.begin());
}

std::vector<int> labels_of(const std::vector<Example>& examples) {
  std::vector<int> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(ex.label);
  return out;
}

double pick_metric(const std::vector<int>& predictions, const std::vector<int>& labels, const std::string& metric) {
  return metric == "f1" ? f1_score(predictions, labels) : accuracy_score(predictions, labels);
}

/// Shuffled index batches over one epoch.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

/// Running means of loss components between two logged rows.
class LossAverager {
 public:
  void add(const LossBreakdown& b) {
    ++count_;
    sum_.ce += b.ce;
    sum_.entropy += b.entropy;
    sum_.norm += b.norm;
    sum_.total += b.total;
    accumulate(sum_.skim, b.skim);
    accumulate(sum_.l0, b.l0);
    accumulate(sum_.distill, b.distill);
  }

  LossBreakdown take() {
    LossBreakdown m = sum_;
    if (count_ > 0) {
      const double n = static_cast<double>(count_);
      m.ce /= n;
      m.entropy /= n;
      m.norm /= n;
      m.total /= n;
      if (m.skim) *m.skim /= n;
      if (m.l0) *m.l0 /= n;
      if (m.distill) *m.distill /= n;
    }
    sum_ = {};
    count_ = 0;
    return m;
  }

 private:
  static void accumulate(std::optional<double>& into, const std::optional<double>& v) {
    if (v) into = into.value_or(0.0) + *v;
  }
  LossBreakdown sum_;
  std::size_t count_ = 0;
};

PaddingStrategy batch_padding(int batch_size) {
  PaddingStrategy s;
  s.mode = PaddingMode::kBatch;
  s.batch_size = static_cast<std::size_t>(batch_size);
  return s;
}

DropoutContext dropout_for(const RunConfig& config, Rng& rng) {
  return DropoutContext{config.model.dropout, &rng};
}

void emit(std::vector<MetricsRow>& rows, MetricsRow row, const MetricsCallback& on_row) {
  if (on_row) on_row(row);
  rows.push_back(std::move(row));
}

std::vector<PruneTrace> full_traces(const std::vector<Example>& examples, int layers) {
  std::vector<PruneTrace> out;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    PruneTrace t;
    t.example = i;
    t.original_length = examples[i].ids.size();
    t.kept_counts.assign(static_cast<std::size_t>(layers), t.original_length);
    out.push_back(std::move(t));
  }
  return out;
}

/// Accuracy or F1 of masked execution with static masks and no token pruning.
double masked_metric(const Encoder& model, const StructuredMasks& masks, const std::vector<Example>& examples,
                     const std::string& metric) {
  NoGradScope no_grad;
  std::vector<int> predictions;
  ForwardOptions o;
  o.masks = &masks;
  for (const auto& ex : examples) predictions.push_back(argmax(encoder_forward(model, ex.ids, o).logits));
  return pick_metric(predictions, labels_of(examples), metric);
}

}  // namespace

std::string metrics_csv_header(int num_layers) {
  std::string h = "step,stage,ce,entropy,norm,skim,l0,distill,total,metric,s,mu1,mu2,speedup";
  for (int l = 0; l < num_layers; ++l) h += ",keep_rate_" + std::to_string(l);
  return h;
}

std::string metrics_csv_line(const MetricsRow& r, int num_layers) {
  std::string line = std::to_string(r.step) + "," + r.stage + "," + num(r.losses.ce) + "," + num(r.losses.entropy) +
                     "," + num(r.losses.norm) + "," + opt_num(r.losses.skim) + "," + opt_num(r.losses.l0) + "," +
                     opt_num(r.losses.distill) + "," + num(r.losses.total) + "," + num(r.metric) + "," +
                     num(r.expected_sparsity) + "," + num(r.mu1) + "," + num(r.mu2) + "," + num(r.speedup);
  for (int l = 0; l < num_layers; ++l) {
    line += ",";
    if (static_cast<std::size_t>(l) < r.keep_rates.size()) line += num(r.keep_rates[static_cast<std::size_t>(l)]);
  }
  return line;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows, int num_layers) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write metrics file '" + path + "'");
  out << metrics_csv_header(num_layers) << "\n";
  for (const auto& r : rows) out << metrics_csv_line(r, num_layers) << "\n";
}

double accuracy_score(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) throw ContractError("accuracy: prediction and label counts differ");
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double f1_score(const std::vector<int>& predictions, const std::vector<int>& labels, int positive) {
  if (predictions.size() != labels.size()) throw ContractError("f1: prediction and label counts differ");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predictions[i] == positive, y = labels[i] == positive;
    tp += p && y;
    fp += p && !y;
    fn += !p && y;
  }
  if (tp == 0) return 0.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

EvalResult evaluate(const Encoder& model, const std::vector<Example>& examples, const PaddingStrategy& padding,
                    const std::string& metric) {
  NoGradScope no_grad;
  EvalResult r;
  ForwardOptions o;
  o.physical = true;
  o.token_mode = model.has_samplers() ? TokenMode::kDeterministic : TokenMode::kNone;
  const std::size_t layers = static_cast<std::size_t>(model.num_layers());
  r.keep_rates.assign(layers, 0.0);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    EncoderActivations a = encoder_forward(model, examples[i].ids, o);
    r.predictions.push_back(argmax(a.logits));
    a.trace.example = i;
    for (std::size_t l = 0; l < layers; ++l) {
      r.keep_rates[l] += static_cast<double>(a.trace.kept_counts[l]) / static_cast<double>(a.trace.original_length);
    }
    r.traces.push_back(std::move(a.trace));
  }
  if (!examples.empty()) {
    for (auto& k : r.keep_rates) k /= static_cast<double>(examples.size());
  }
  r.mean_keep_rate =
      layers == 0 ? 1.0 : std::accumulate(r.keep_rates.begin(), r.keep_rates.end(), 0.0) / static_cast<double>(layers);
  const auto labels = labels_of(examples);
  r.accuracy = accuracy_score(r.predictions, labels);
  r.f1 = f1_score(r.predictions, labels);
  r.metric = metric == "f1" ? r.f1 : r.accuracy;
  r.flops = model_flops(r.traces, model.base_config(), model.architecture(), padding);
  return r;
}

std::vector<int> predict_masked(const Encoder& model, const std::vector<Example>& examples) {
  NoGradScope no_grad;
  ForwardOptions o;
  o.token_mode = model.has_samplers() ? TokenMode::kDeterministic : TokenMode::kNone;
  std::vector<int> out;
  for (const auto& ex : examples) out.push_back(argmax(encoder_forward(model, ex.ids, o).logits));
  return out;
}

TeacherResult finetune_teacher(const RunConfig& config, const Dataset& data, const MetricsCallback& on_row) {
  config.validate();
  Rng rng(config.seed);
  Encoder model = Encoder::init(config.model, rng);
  AdamW opt(model.parameters(), {config.optimizer.learning_rate, 0.9, 0.999, 1e-8, config.optimizer.weight_decay});
  TeacherResult result;
  LossAverager avg;
  std::size_t step = 0;
  const auto log_row = [&] {
    MetricsRow row;
    row.step = step;
    row.stage = "teacher";
    row.losses = avg.take();
    row.metric = evaluate(model, data.validation, batch_padding(config.optimizer.batch_size), config.dataset.metric).metric;
    row.keep_rates.assign(static_cast<std::size_t>(config.model.num_layers), 1.0);
    emit(result.metrics, std::move(row), on_row);
  };
  for (int epoch = 0; epoch < config.schedule.teacher_epochs; ++epoch) {
    for (const auto& batch : epoch_batches(data.train.size(), config.optimizer.batch_size, rng)) {
      opt.zero_grad();
      Tape tape;
      Tensor total = Tensor::scalar(0.0);
      {
        TapeScope scope(tape);
        ForwardOptions o;
        o.dropout = dropout_for(config, rng);
        for (std::size_t idx : batch) {
          const Example& ex = data.train[idx];
          Tensor ce = cross_entropy(encoder_forward(model, ex.ids, o).logits, std::vector<int>{ex.label});
          total = add(total, ce);
        }
        total = mul_scalar(total, 1.0 / static_cast<double>(batch.size()));
      }
      tape.backward(total);
      opt.step();
      ++step;
      LossBreakdown b;
      b.ce = b.total = total.item();
      avg.add(b);
      if (step % static_cast<std::size_t>(config.schedule.eval_every) == 0) log_row();
    }
  }
  if (step == 0 || step % static_cast<std::size_t>(config.schedule.eval_every) != 0) log_row();
  result.validation_metric = result.metrics.back().metric;
  result.checkpoint = Checkpoint{std::move(model), std::nullopt, "teacher"};
  return result;
}

Stage1Result stage1_train(const RunConfig& config, const Dataset& data, const Encoder& teacher,
                          const MetricsCallback& on_row) {
  config.validate();
  if (!(teacher.base_config() == config.model)) throw ConfigError("stage1: teacher config differs from model config");
  if (!teacher.is_dense()) throw ContractError("stage1: teacher must be an uncompacted model");
  Rng rng(config.seed);
  Encoder student = teacher.clone();
  if (student.has_samplers()) student.remove_samplers();
  const int layers = config.model.num_layers;
  const bool use_gates = config.lagrangian.target > 0.0;
  const StageSchedule& sched = config.schedule;

  // Teacher targets are fixed, so compute them once.
  std::vector<Tensor> teacher_logits;
  std::vector<std::vector<Tensor>> teacher_hidden;
  {
    NoGradScope no_grad;
    for (const auto& ex : data.train) {
      EncoderActivations a = encoder_forward(teacher, ex.ids, {});
      teacher_logits.push_back(a.logits);
      teacher_hidden.push_back(a.layer_outputs);
    }
  }

  StructuredGates gates = StructuredGates::init(config.model, 3.0);
  AdamW opt(student.parameters(), {config.optimizer.learning_rate, 0.9, 0.999, 1e-8, config.optimizer.weight_decay});
  AdamW gate_opt(gates.parameters(), {config.optimizer.gate_learning_rate, 0.9, 0.999, 1e-8, 0.0});
  LagrangianState state = config.lagrangian;
  const DistillConfig& dc = config.distill;

  Stage1Result result;
  LossAverager avg;
  std::size_t step = 0;
  int on_target = 0;
  bool done = false;
  const std::size_t max_steps = static_cast<std::size_t>(sched.stage1_max_steps);
  const std::size_t min_steps = static_cast<std::size_t>(sched.stage1_min_steps);

  while (!done && step < max_steps) {
    for (const auto& batch : epoch_batches(data.train.size(), config.optimizer.batch_size, rng)) {
      opt.zero_grad();
      gate_opt.zero_grad();
      Tape tape;
      Tensor total;
      LossBreakdown b;
      {
        TapeScope scope(tape);
        StructuredMasks masks;
        if (use_gates) masks = gates.sample(rng);
        ForwardOptions o;
        o.masks = use_gates ? &masks : nullptr;
        o.dropout = dropout_for(config, rng);
        Tensor ce_sum = Tensor::scalar(0.0), distill_sum = Tensor::scalar(0.0);
        for (std::size_t idx : batch) {
          const Example& ex = data.train[idx];
          EncoderActivations a = encoder_forward(student, ex.ids, o);
          ce_sum = add(ce_sum, cross_entropy(a.logits, std::vector<int>{ex.label}));
          Tensor d = mul_scalar(prediction_distill_loss(a.logits, teacher_logits[idx], dc.temperature),
                                dc.prediction_weight);
          if (dc.layerwise_weight > 0.0) {
            d = add(d, mul_scalar(layerwise_distill_loss(a.layer_outputs, teacher_hidden[idx], dc), dc.layerwise_weight));
          }
          distill_sum = add(distill_sum, d);
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        Tensor ce = mul_scalar(ce_sum, inv), distill = mul_scalar(distill_sum, inv);
        total = add(ce, distill);
        b.ce = ce.item();
        b.distill = distill.item();
        if (use_gates) {
          Tensor s = expected_sparsity(config.model, gates);
          state.current = s.item();
          Tensor lag = l0_lagrangian(state, s);
          b.l0 = lag.item();
          total = add(total, lag);
        }
        b.total = total.item();
      }
      tape.backward(total);
      opt.step();
      if (use_gates) {
        gate_opt.step();
        update_multipliers(state, config.optimizer.multiplier_learning_rate);
      }
      ++step;
      avg.add(b);

      const bool log_now = step % static_cast<std::size_t>(sched.eval_every) == 0 || step >= max_steps;
      if (log_now) {
        MetricsRow row;
        row.step = step;
        row.stage = "stage1";
        row.losses = avg.take();
        row.mu1 = state.mu1;
        row.mu2 = state.mu2;
        row.keep_rates.assign(static_cast<std::size_t>(layers), 1.0);
        StructuredMasks binary = StructuredMasks::ones(config.model);
        double expected = 0.0, realized = 0.0;
        if (use_gates) {
          NoGradScope no_grad;
          expected = expected_sparsity(config.model, gates).item();
          binary = gates.binarized();
          realized = realized_sparsity(config.model, binary);
        }
        row.expected_sparsity = expected;
        row.metric = masked_metric(student, binary, data.validation, config.dataset.metric);
        const auto arch = Architecture::from_masks(config.model, binary);
        row.speedup = model_flops(full_traces(data.validation, layers), config.model, arch,
                                  batch_padding(config.optimizer.batch_size))
                          .speedup;
        emit(result.metrics, std::move(row), on_row);
        const double tol = sched.sparsity_tolerance;
        const double target = config.lagrangian.target;
        on_target = (std::abs(expected - target) < tol && std::abs(realized - target) < tol) ? on_target + 1 : 0;
        result.expected_sparsity = expected;
        result.realized_sparsity = realized;
        if (step >= min_steps && on_target >= sched.stage1_patience) done = true;
      }
      if (done || step >= max_steps) break;
    }
  }

  result.steps = step;
  result.converged = done;
  if (!done) {
    std::ostringstream report;
    report << "stage1 did not reach target sparsity " << config.lagrangian.target << " within " << max_steps
           << " steps: expected sparsity " << result.expected_sparsity << ", binarized sparsity "
           << result.realized_sparsity << ", tolerance " << sched.sparsity_tolerance << ", mu1 " << state.mu1
           << ", mu2 " << state.mu2;
    result.report = report.str();
  }
  StructuredMasks final_masks = use_gates ? gates.binarized() : StructuredMasks::ones(config.model);
  Encoder compact = finalize_prune(student, final_masks);
  result.checkpoint = Checkpoint{std::move(compact), std::move(final_masks), "stage1"};
  result.student = std::move(student);
  return result;
}

Stage2Result stage2_train(const Checkpoint& start, const RunConfig& config, const Dataset& data,
                          const MetricsCallback& on_row) {
  config.validate();
  if (!(start.model.base_config() == config.model)) throw ConfigError("stage2: checkpoint config differs from model config");
  Rng rng(config.seed);
  Encoder model = start.model.clone();
  if (!model.has_samplers()) model.add_samplers(rng);
  const Architecture structure = model.architecture();

  std::set<const detail::TensorImpl*> sampler_ids;
  for (const auto& t : model.sampler_parameters()) sampler_ids.insert(t.impl());
  std::vector<Tensor> main_params;
  for (const auto& t : model.parameters()) {
    if (!sampler_ids.count(t.impl())) main_params.push_back(t);
  }
  AdamW opt(main_params, {config.optimizer.learning_rate, 0.9, 0.999, 1e-8, config.optimizer.weight_decay});
  AdamW sampler_opt(model.sampler_parameters(), {config.optimizer.sampler_learning_rate, 0.9, 0.999, 1e-8, 0.0});

  const StageSchedule& sched = config.schedule;
  const LossWeights& w = config.loss_weights;
  const bool skim_variant = config.loss_variant == "skim";
  const int layers = model.num_layers();
  const PaddingStrategy padding = batch_padding(config.optimizer.batch_size);

  Stage2Result result;
  LossAverager avg;
  std::size_t step = 0;
  bool phase_b = false;

  // Validation objective for the warmup plateau rule (deterministic decisions).
  const auto validation_objective = [&] {
    NoGradScope no_grad;
    ForwardOptions o;
    o.token_mode = TokenMode::kDeterministic;
    double sum = 0.0;
    for (const auto& ex : data.validation) {
      EncoderActivations a = encoder_forward(model, ex.ids, o);
      sum += cross_entropy(a.logits, std::vector<int>{ex.label}).item() + w.gamma1 * entropy_loss(a.keep_probs).item();
    }
    return data.validation.empty() ? 0.0 : sum / static_cast<double>(data.validation.size());
  };

  const auto log_row = [&](const std::string& stage) {
    EvalResult ev = evaluate(model, data.validation, padding, config.dataset.metric);
    MetricsRow row;
    row.step = step;
    row.stage = stage;
    row.losses = avg.take();
    row.metric = ev.metric;
    row.keep_rates = ev.keep_rates;
    row.speedup = ev.flops.speedup;
    emit(result.metrics, std::move(row), on_row);
    for (int l = 0; l < layers; ++l) {
      if (ev.keep_rates[static_cast<std::size_t>(l)] < sched.keep_rate_floor) {
        std::ostringstream msg;
        msg << "stage2 aborted at step " << step << " (" << stage << "): validation keep rate at layer " << l << " is "
            << ev.keep_rates[static_cast<std::size_t>(l)] << ", below the floor " << sched.keep_rate_floor
            << "; per-layer keep rates:";
        for (double k : ev.keep_rates) msg << " " << k;
        msg << "; lower gamma2 (" << w.gamma2 << ")";
        throw KeepRateCollapse(msg.str());
      }
    }
    return ev;
  };

  const auto train_epoch = [&](const std::function<bool()>& after_eval) {
    for (const auto& batch : epoch_batches(data.train.size(), config.optimizer.batch_size, rng)) {
      opt.zero_grad();
      sampler_opt.zero_grad();
      Tape tape;
      Tensor total;
      LossBreakdown b;
      {
        TapeScope scope(tape);
        ForwardOptions o;
        o.token_mode = TokenMode::kSampled;
        o.gumbel = config.gumbel;
        o.rng = &rng;
        o.dropout = dropout_for(config, rng);
        Tensor ce_sum = Tensor::scalar(0.0), ent_sum = Tensor::scalar(0.0), norm_sum = Tensor::scalar(0.0),
               skim_sum = Tensor::scalar(0.0);
        for (std::size_t idx : batch) {
          const Example& ex = data.train[idx];
          EncoderActivations a = encoder_forward(model, ex.ids, o);
          ce_sum = add(ce_sum, cross_entropy(a.logits, std::vector<int>{ex.label}));
          ent_sum = add(ent_sum, entropy_loss(a.keep_probs));
          if (phase_b) {
            if (skim_variant) {
              skim_sum = add(skim_sum, skim_loss(a.keep_probs));
            } else {
              norm_sum = add(norm_sum, norm_loss(a.layer_inputs, a.keep_probs));
            }
          }
        }
        const double inv = 1.0 / static_cast<double>(batch.size());
        Tensor ce = mul_scalar(ce_sum, inv), ent = mul_scalar(ent_sum, inv), norm = mul_scalar(norm_sum, inv);
        ObjectiveValue v = ib_total(ce, ent, norm, LossWeights{w.gamma1, phase_b && !skim_variant ? w.gamma2 : 0.0, w.beta});
        total = v.total;
        b = v.breakdown;
        if (skim_variant) {
          Tensor skim = mul_scalar(skim_sum, inv);
          b.skim = skim.item();
          if (phase_b) total = add(total, mul_scalar(skim, w.gamma2));
          b.total = total.item();
        }
      }
      tape.backward(total);
      opt.step();
      sampler_opt.step();
      ++step;
      avg.add(b);
      if (step % static_cast<std::size_t>(sched.eval_every) == 0 && after_eval()) return true;
    }
    return false;
  };

  // Phase A: warmup until the validation objective plateaus.
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;
  for (int epoch = 0; epoch < sched.stage2_warmup_max_epochs; ++epoch) {
    const bool plateau = train_epoch([&] {
      log_row("stage2_warmup");
      const double v = validation_objective();
      if (v < best - sched.plateau_tolerance) {
        best = v;
        stale = 0;
      } else {
        ++stale;
      }
      return stale >= sched.plateau_patience;
    });
    if (plateau) break;
  }
  result.warmup_steps = step;

  // Phase B: add the compression term.
  phase_b = true;
  for (int epoch = 0; epoch < sched.stage2_epochs; ++epoch) {
    train_epoch([&] {
      log_row("stage2");
      return false;
    });
  }
  result.validation = log_row("stage2_final");
  result.steps = step;
  if (!(model.architecture().layers == structure.layers) || model.architecture().hidden_dim != structure.hidden_dim) {
    throw ContractError("stage2 changed the static structure");
  }
  result.checkpoint = Checkpoint{std::move(model), start.masks, "stage2"};
  return result;
}

PaddingStrategy sequence_padding_for(const std::string& dataset, const std::string& fallback) {
  PaddingStrategy s;
  s.mode = PaddingMode::kSequence;
  s.dataset = PaddingStrategy::fixed_lengths().count(dataset) ? dataset : fallback;
  s.fixed_length();
  return s;
}

std::vector<SweepRow> sweep(const RunConfig& config, const Dataset& data, const Checkpoint& teacher,
                            const std::string& out_dir, const MetricsCallback& on_row) {
  config.validate();
  const SweepGrid& grid = config.sweep;
  const PaddingStrategy batch = batch_padding(config.optimizer.batch_size);
  const PaddingStrategy sequence = sequence_padding_for(config.dataset.name, grid.padding_dataset);
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  const bool needs_stage1 = std::any_of(grid.arms.begin(), grid.arms.end(), [](const std::string& a) {
    return a == "structured" || a == "joint";
  });
  std::map<double, Checkpoint> stage1_models;
  std::map<double, std::string> stage1_errors;
  if (needs_stage1) {
    for (double target : grid.targets) {
      RunConfig c = config;
      c.lagrangian.target = target;
      try {
        Stage1Result s1 = stage1_train(c, data, teacher.model, on_row);
        if (!s1.converged) stage1_errors[target] = "warning: " + s1.report;
        stage1_models.emplace(target, std::move(s1.checkpoint));
      } catch (const std::exception& e) {
        stage1_errors[target] = std::string("error: ") + e.what();
      }
    }
  }

  std::vector<SweepRow> rows;
  const auto finish_row = [&](SweepRow& row, const Encoder& model) {
    EvalResult eb = evaluate(model, data.test, batch, config.dataset.metric);
    EvalResult es = evaluate(model, data.test, sequence, config.dataset.metric);
    row.metric = eb.metric;
    row.speedup_batch = eb.flops.speedup;
    row.speedup_sequence = es.flops.speedup;
    row.keep_rates = eb.keep_rates;
    row.mean_keep_rate = eb.mean_keep_rate;
    row.architecture = model.architecture();
    row.traces = eb.traces;
    if (!out_dir.empty()) {
      const std::string stem = out_dir + "/row" + std::to_string(rows.size());
      row.trace_path = stem + "_traces.jsonl";
      row.checkpoint_path = stem + ".ckpt";
      write_traces_file(row.trace_path, row.traces);
      save_checkpoint(row.checkpoint_path, Checkpoint{model, std::nullopt, row.arm});
    }
  };

  for (const std::string& arm : grid.arms) {
    const std::vector<double> targets = arm == "dynamic" ? std::vector<double>{0.0} : grid.targets;
    const std::vector<std::string> variants = arm == "structured" ? std::vector<std::string>{"-"} : grid.loss_variants;
    const std::vector<double> gammas = arm == "structured" ? std::vector<double>{0.0} : grid.gamma2;
    for (double target : targets) {
      for (const std::string& variant : variants) {
        for (double gamma2 : gammas) {
          SweepRow row;
          row.arm = arm;
          row.loss_variant = variant;
          row.target = target;
          row.gamma1 = config.loss_weights.gamma1;
          row.gamma2 = gamma2;
          try {
            if (arm != "dynamic" && !stage1_models.count(target)) {
              throw std::runtime_error(stage1_errors.count(target) ? stage1_errors[target] : "stage1 unavailable");
            }
            if (arm != "dynamic" && stage1_errors.count(target)) row.status = stage1_errors[target];
            if (arm == "structured") {
              finish_row(row, stage1_models.at(target).model);
            } else {
              RunConfig c = config;
              c.loss_variant = variant;
              c.loss_weights.gamma2 = gamma2;
              const Checkpoint& start = arm == "dynamic" ? teacher : stage1_models.at(target);
              Stage2Result s2 = stage2_train(start, c, data, on_row);
              finish_row(row, s2.checkpoint.model);
            }
          } catch (const std::exception& e) {
            row.status = std::string("error: ") + e.what();
          }
          rows.push_back(std::move(row));
        }
      }
    }
  }
  return rows;
}

std::string tradeoff_csv_header(int num_layers) {
  std::string h = "arm,loss_variant,target,gamma1,gamma2,metric,speedup_batch,speedup_sequence,mean_keep_rate";
  for (int l = 0; l < num_layers; ++l) h += ",keep_rate_" + std::to_string(l);
  return h + ",trace_path,status";
}

std::string tradeoff_csv_line(const SweepRow& r, int num_layers) {
  std::string status = r.status;
  std::replace(status.begin(), status.end(), ',', ';');
  std::replace(status.begin(), status.end(), '\n', ' ');
  std::string line = r.arm + "," + r.loss_variant + "," + num(r.target) + "," + num(r.gamma1) + "," + num(r.gamma2) +
                     "," + num(r.metric) + "," + num(r.speedup_batch) + "," + num(r.speedup_sequence) + "," +
                     num(r.mean_keep_rate);
  for (int l = 0; l < num_layers; ++l) {
    line += ",";
    if (static_cast<std::size_t>(l) < r.keep_rates.size()) line += num(r.keep_rates[static_cast<std::size_t>(l)]);
  }
  return line + "," + r.trace_path + "," + status;
}

void write_tradeoff_csv(const std::string& path, const std::vector<SweepRow>& rows, int num_layers) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write tradeoff file '" + path + "'");
  out << tradeoff_csv_header(num_layers) << "\n";
  for (const auto& r : rows) out << tradeoff_csv_line(r, num_layers) << "\n";
}

}  // namespace ibprune
