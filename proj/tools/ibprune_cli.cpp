#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "ibprune/checkpoint.hpp"
#include "ibprune/config.hpp"
#include "ibprune/data.hpp"
#include "ibprune/errors.hpp"
#include "ibprune/flops_meter.hpp"
#include "ibprune/training.hpp"

namespace fs = std::filesystem;
using namespace ibprune;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNotConverged = 3;
constexpr int kExitCollapse = 4;

struct Common {
  std::string config_path;
  std::uint64_t seed = 42;
  std::string out_dir = "out";
  bool quiet = false;
  CLI::Option* seed_option = nullptr;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "RunConfig JSON file (desk defaults when omitted)")->check(CLI::ExistingFile);
  c.seed_option = sub->add_option("--seed", c.seed, "Random seed; overrides the config file")->capture_default_str();
  sub->add_option("--out-dir", c.out_dir, "Directory for all outputs")->capture_default_str();
  sub->add_flag("--quiet,-q", c.quiet, "Suppress per-step progress");
}

RunConfig resolve_config(const Common& c) {
  RunConfig config = c.config_path.empty() ? RunConfig::desk_default() : load_run_config(c.config_path);
  if (c.config_path.empty() || c.seed_option->count() > 0) config.seed = c.seed;
  config.validate();
  return config;
}

fs::path prepare_out_dir(const Common& c) {
  fs::path dir(c.out_dir);
  fs::create_directories(dir);
  return dir;
}

MetricsCallback progress(const Common& c, int layers) {
  if (c.quiet) return {};
  return [layers](const MetricsRow& row) {
    std::fprintf(stderr, "[%s] step %zu total %.5f ce %.5f metric %.4f s %.4f speedup %.3f keep", row.stage.c_str(),
                 row.step, row.losses.total, row.losses.ce, row.metric, row.expected_sparsity, row.speedup);
    for (int l = 0; l < layers && static_cast<std::size_t>(l) < row.keep_rates.size(); ++l) {
      std::fprintf(stderr, " %.3f", row.keep_rates[static_cast<std::size_t>(l)]);
    }
    std::fprintf(stderr, "\n");
  };
}

Dataset load_data(const RunConfig& config) {
  return load_dataset(config.dataset, config.model.num_labels, config.model.vocab_size, config.seed);
}

const std::vector<Example>& pick_split(const Dataset& data, const std::string& split) {
  if (split == "train") return data.train;
  if (split == "validation") return data.validation;
  if (split == "test") return data.test;
  throw ConfigError("unknown split '" + split + "' (expected train, validation or test)");
}

PaddingStrategy padding_from_flags(const RunConfig& config, const std::string& mode, const std::string& dataset_name,
                                   std::size_t batch_size) {
  PaddingStrategy p;
  p.mode = PaddingStrategy::parse_mode(mode);
  p.batch_size = batch_size;
  if (p.mode == PaddingMode::kSequence) {
    if (!dataset_name.empty()) {
      p.dataset = dataset_name;
      p.fixed_length();  // rejects unknown names early
    } else {
      p = sequence_padding_for(config.dataset.name, config.sweep.padding_dataset);
      p.batch_size = batch_size;
    }
  }
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  out << text;
}

// ------------------------------------------------------------- subcommands

int run_gen_data(const Common& c) {
  RunConfig config = resolve_config(c);
  if (!config.dataset.is_synthetic()) throw ConfigError("gen-data needs a synthetic dataset (empty train_path)");
  const fs::path dir = prepare_out_dir(c);
  const Dataset data = load_data(config);
  write_jsonl_file((dir / "train.jsonl").string(), data.train);
  write_jsonl_file((dir / "validation.jsonl").string(), data.validation);
  write_jsonl_file((dir / "test.jsonl").string(), data.test);
  write_vocabulary_file((dir / "vocab.txt").string(), data.vocabulary);

  RunConfig file_config = config;
  file_config.dataset.train_path = fs::absolute(dir / "train.jsonl").string();
  file_config.dataset.validation_path = fs::absolute(dir / "validation.jsonl").string();
  file_config.dataset.test_path = fs::absolute(dir / "test.jsonl").string();
  file_config.dataset.vocab_path = fs::absolute(dir / "vocab.txt").string();
  save_run_config((dir / "config.json").string(), file_config);

  std::cout << "wrote " << data.train.size() << "/" << data.validation.size() << "/" << data.test.size()
            << " examples to " << dir.string() << " (majority baseline "
            << majority_baseline(data.test, config.model.num_labels) << ")\n";
  return 0;
}

int run_finetune_teacher(const Common& c) {
  const RunConfig config = resolve_config(c);
  const fs::path dir = prepare_out_dir(c);
  const Dataset data = load_data(config);
  const int layers = config.model.num_layers;
  const TeacherResult r = finetune_teacher(config, data, progress(c, layers));
  save_checkpoint((dir / "teacher.ckpt").string(), r.checkpoint);
  write_metrics_csv((dir / "metrics.csv").string(), r.metrics, layers);
  std::cout << "teacher validation " << config.dataset.metric << " " << r.validation_metric << "\n";
  return 0;
}

int run_stage1(const Common& c, const std::string& teacher_path) {
  const RunConfig config = resolve_config(c);
  const fs::path dir = prepare_out_dir(c);
  const Dataset data = load_data(config);
  const Checkpoint teacher = load_checkpoint(teacher_path);
  const int layers = config.model.num_layers;
  const Stage1Result r = stage1_train(config, data, teacher.model, progress(c, layers));
  save_checkpoint((dir / "stage1.ckpt").string(), r.checkpoint);
  write_metrics_csv((dir / "metrics.csv").string(), r.metrics, layers);
  std::cout << "stage1 steps " << r.steps << " expected sparsity " << r.expected_sparsity << " binarized sparsity "
            << r.realized_sparsity << "\n";
  if (!r.converged) {
    write_text(dir / "stage1_report.txt", r.report + "\n");
    std::cerr << r.report << "\n";
    return kExitNotConverged;
  }
  return 0;
}

int run_stage2(const Common& c, const std::string& checkpoint_path) {
  const RunConfig config = resolve_config(c);
  const fs::path dir = prepare_out_dir(c);
  const Dataset data = load_data(config);
  const Checkpoint start = load_checkpoint(checkpoint_path);
  const int layers = config.model.num_layers;
  const Stage2Result r = stage2_train(start, config, data, progress(c, layers));
  save_checkpoint((dir / "stage2.ckpt").string(), r.checkpoint);
  write_metrics_csv((dir / "metrics.csv").string(), r.metrics, layers);
  std::cout << "stage2 warmup steps " << r.warmup_steps << " total steps " << r.steps << " validation "
            << config.dataset.metric << " " << r.validation.metric << " mean keep rate " << r.validation.mean_keep_rate
            << " speedup " << r.validation.flops.speedup << "\n";
  return 0;
}

nlohmann::json eval_json(const EvalResult& r, const std::string& metric) {
  nlohmann::json j;
  j["metric_name"] = metric;
  j["metric"] = r.metric;
  j["accuracy"] = r.accuracy;
  j["f1"] = r.f1;
  j["keep_rates"] = r.keep_rates;
  j["mean_keep_rate"] = r.mean_keep_rate;
  j["flops"] = nlohmann::json::parse(r.flops.to_json());
  return j;
}

int run_evaluate(const Common& c, const std::string& checkpoint_path, const std::string& split,
                 const std::string& padding, const std::string& dataset_name, std::size_t batch_size) {
  const RunConfig config = resolve_config(c);
  const fs::path dir = prepare_out_dir(c);
  const Dataset data = load_data(config);
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const PaddingStrategy p = padding_from_flags(config, padding, dataset_name, batch_size);
  const EvalResult r = evaluate(ckpt.model, pick_split(data, split), p, config.dataset.metric);
  write_traces_file((dir / "traces.jsonl").string(), r.traces);
  const std::string text = eval_json(r, config.dataset.metric).dump(2);
  write_text(dir / "eval.json", text + "\n");
  std::cout << text << "\n";
  return 0;
}

int run_flops(const Common& c, const std::string& checkpoint_path, const std::string& traces_path,
              const std::string& padding, const std::string& dataset_name, std::size_t batch_size) {
  const RunConfig config = resolve_config(c);
  const fs::path dir = prepare_out_dir(c);
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const PaddingStrategy p = padding_from_flags(config, padding, dataset_name, batch_size);
  std::vector<PruneTrace> traces;
  if (!traces_path.empty()) {
    traces = read_traces_file(traces_path);
  } else {
    traces = evaluate(ckpt.model, load_data(config).test, p, config.dataset.metric).traces;
  }
  const FlopsReport report = model_flops(traces, ckpt.model.base_config(), ckpt.model.architecture(), p);
  const std::string text = report.to_json();
  write_text(dir / "flops.json", text + "\n");
  std::cout << text << "\n";
  return 0;
}

int run_sweep(const Common& c, const std::string& teacher_path) {
  const RunConfig config = resolve_config(c);
  const fs::path dir = prepare_out_dir(c);
  const Dataset data = load_data(config);
  const int layers = config.model.num_layers;
  Checkpoint teacher = [&] {
    if (!teacher_path.empty()) return load_checkpoint(teacher_path);
    TeacherResult t = finetune_teacher(config, data, progress(c, layers));
    save_checkpoint((dir / "teacher.ckpt").string(), t.checkpoint);
    write_metrics_csv((dir / "teacher_metrics.csv").string(), t.metrics, layers);
    return std::move(t.checkpoint);
  }();
  const fs::path runs = dir / "runs";
  fs::create_directories(runs);
  const auto rows = sweep(config, data, teacher, runs.string(), progress(c, layers));
  write_tradeoff_csv((dir / "tradeoff.csv").string(), rows, layers);
  std::cout << tradeoff_csv_header(layers) << "\n";
  for (const auto& row : rows) std::cout << tradeoff_csv_line(row, layers) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage static and dynamic pruning of a small transformer encoder"};
  app.require_subcommand(1);

  Common common;
  std::string teacher_path, checkpoint_path, traces_path, split = "test", padding = "batch", dataset_name;
  std::size_t batch_size = 32;

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset as JSONL splits plus a vocabulary");
  auto* teacher = app.add_subcommand("finetune-teacher", "Train the dense teacher");
  auto* stage1 = app.add_subcommand("stage1", "Static structured pruning with distillation");
  auto* stage2 = app.add_subcommand("stage2", "Token-pruning training on a stage-1 or teacher checkpoint");
  auto* eval = app.add_subcommand("evaluate", "Hard-decision inference with physical token dropping");
  auto* flops = app.add_subcommand("flops", "FLOPs report for a checkpoint and its pruning traces");
  auto* sw = app.add_subcommand("sweep", "Tradeoff sweep over arms, gamma2 and targets");
  for (auto* sub : {gen, teacher, stage1, stage2, eval, flops, sw}) add_common(sub, common);

  stage1->add_option("--teacher", teacher_path, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
  stage2->add_option("--checkpoint", checkpoint_path, "Starting checkpoint")->required()->check(CLI::ExistingFile);
  sw->add_option("--teacher", teacher_path, "Teacher checkpoint (trained first when omitted)")->check(CLI::ExistingFile);
  for (auto* sub : {eval, flops}) {
    sub->add_option("--checkpoint", checkpoint_path, "Checkpoint to measure")->required()->check(CLI::ExistingFile);
    sub->add_option("--padding", padding, "Padding strategy")
        ->check(CLI::IsMember({"batch", "sequence"}))
        ->capture_default_str();
    sub->add_option("--dataset-name", dataset_name, "Fixed-length table entry for sequence padding");
    sub->add_option("--batch-size", batch_size, "Batch size for batch padding")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
  }
  eval->add_option("--split", split, "Dataset split")
      ->check(CLI::IsMember({"train", "validation", "test"}))
      ->capture_default_str();
  flops->add_option("--traces", traces_path, "Pruning-trace JSONL (evaluates the test split when omitted)")
      ->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return run_gen_data(common);
    if (*teacher) return run_finetune_teacher(common);
    if (*stage1) return run_stage1(common, teacher_path);
    if (*stage2) return run_stage2(common, checkpoint_path);
    if (*eval) return run_evaluate(common, checkpoint_path, split, padding, dataset_name, batch_size);
    if (*flops) return run_flops(common, checkpoint_path, traces_path, padding, dataset_name, batch_size);
    if (*sw) return run_sweep(common, teacher_path);
  } catch (const KeepRateCollapse& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCollapse;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
