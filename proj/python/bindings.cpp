#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "ibprune/checkpoint.hpp"
#include "ibprune/config.hpp"
#include "ibprune/data.hpp"
#include "ibprune/errors.hpp"
#include "ibprune/flops_meter.hpp"
#include "ibprune/forward.hpp"
#include "ibprune/ib_objective.hpp"
#include "ibprune/static_sparsity.hpp"
#include "ibprune/training.hpp"

namespace py = pybind11;
using namespace ibprune;

namespace {

using ExampleTuple = std::pair<std::vector<int>, int>;

std::vector<Example> to_examples(const std::vector<ExampleTuple>& items) {
  std::vector<Example> out;
  out.reserve(items.size());
  for (const auto& [ids, label] : items) out.push_back({ids, label});
  return out;
}

std::vector<ExampleTuple> from_examples(const std::vector<Example>& items) {
  std::vector<ExampleTuple> out;
  out.reserve(items.size());
  for (const auto& e : items) out.emplace_back(e.ids, e.label);
  return out;
}

RunConfig parse_config(const std::string& text) {
  return text.empty() ? RunConfig::desk_default() : run_config_from_json(nlohmann::json::parse(text));
}

std::string metrics_csv(const std::vector<MetricsRow>& rows, int layers) {
  std::ostringstream s;
  s << metrics_csv_header(layers) << "\n";
  for (const auto& r : rows) s << metrics_csv_line(r, layers) << "\n";
  return s.str();
}

Tensor vector_tensor(const std::vector<double>& v) { return Tensor::vector(v); }

std::string eval_json(const EvalResult& r) {
  nlohmann::json j;
  j["metric"] = r.metric;
  j["accuracy"] = r.accuracy;
  j["f1"] = r.f1;
  j["predictions"] = r.predictions;
  j["keep_rates"] = r.keep_rates;
  j["mean_keep_rate"] = r.mean_keep_rate;
  j["flops"] = nlohmann::json::parse(r.flops.to_json());
  std::vector<std::string> traces;
  for (const auto& t : r.traces) traces.push_back(trace_to_json_line(t));
  j["traces"] = traces;
  return j.dump();
}

PaddingStrategy make_padding(const std::string& mode, const std::string& dataset, std::size_t batch_size) {
  PaddingStrategy p;
  p.mode = PaddingStrategy::parse_mode(mode);
  p.dataset = dataset;
  p.batch_size = batch_size;
  return p;
}

Dataset make_dataset(const RunConfig& c, const std::vector<ExampleTuple>& train,
                     const std::vector<ExampleTuple>& validation) {
  Dataset d;
  d.name = c.dataset.name;
  d.num_labels = c.model.num_labels;
  d.vocab_size = c.model.vocab_size;
  d.train = to_examples(train);
  d.validation = to_examples(validation);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the ibprune pruning library";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
  py::register_exception<KeepRateCollapse>(m, "KeepRateCollapse", PyExc_RuntimeError);

  m.def("default_config_json", [] { return to_json(RunConfig::desk_default()).dump(); });
  m.def(
      "normalize_config_json",
      [](const std::string& text) {
        RunConfig c = parse_config(text);
        c.validate();
        return to_json(c).dump();
      },
      "Fill defaults and validate a RunConfig JSON document");

  m.def(
      "synth_generate",
      [](const std::string& synth_json, std::size_t count, std::uint64_t seed) {
        Rng rng(seed);
        return from_examples(synth_task_generate(synth_spec_from_json(nlohmann::json::parse(synth_json)), count, rng));
      },
      py::arg("synth_json"), py::arg("count"), py::arg("seed") = 42);
  m.def(
      "synth_label",
      [](const std::string& synth_json, const std::vector<int>& ids) {
        return synth_label(synth_spec_from_json(nlohmann::json::parse(synth_json)), ids);
      });
  m.def(
      "load_dataset",
      [](const std::string& config_json) {
        const RunConfig c = parse_config(config_json);
        const Dataset d = load_dataset(c.dataset, c.model.num_labels, c.model.vocab_size, c.seed);
        return py::make_tuple(from_examples(d.train), from_examples(d.validation), from_examples(d.test));
      },
      "Train, validation and test splits as lists of (ids, label)");

  m.def("entropy_loss", [](const std::vector<std::vector<double>>& keep_probs, bool normalize) {
    std::vector<Tensor> t;
    for (const auto& p : keep_probs) t.push_back(vector_tensor(p));
    return entropy_loss(t, normalize).item();
  }, py::arg("keep_probs"), py::arg("normalize") = true);
  m.def("skim_loss", [](const std::vector<std::vector<double>>& keep_probs) {
    std::vector<Tensor> t;
    for (const auto& p : keep_probs) t.push_back(vector_tensor(p));
    return skim_loss(t).item();
  });
  m.def("hc_open_probability", [](double log_alpha) { return hc_open_probability(log_alpha); });
  m.def("fixed_lengths", [] { return PaddingStrategy::fixed_lengths(); });

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def_static("from_bytes", [](const py::bytes& b) { return deserialize_checkpoint(std::string(b)); })
      .def("save", [](const Checkpoint& c, const std::string& path) { save_checkpoint(path, c); })
      .def("to_bytes", [](const Checkpoint& c) { return py::bytes(serialize_checkpoint(c)); })
      .def_readonly("stage", &Checkpoint::stage)
      .def_property_readonly("has_masks", [](const Checkpoint& c) { return c.masks.has_value(); })
      .def_property_readonly("has_samplers", [](const Checkpoint& c) { return c.model.has_samplers(); })
      .def_property_readonly("config_json", [](const Checkpoint& c) { return to_json(c.model.base_config()).dump(); })
      .def_property_readonly("architecture_json",
                             [](const Checkpoint& c) { return to_json(c.model.architecture()).dump(); })
      .def_property_readonly("prunable_parameters",
                             [](const Checkpoint& c) { return prunable_parameters(c.model.architecture()); })
      .def(
          "logits",
          [](const Checkpoint& c, const std::vector<int>& ids) {
            NoGradScope ng;
            ForwardOptions o;
            o.token_mode = c.model.has_samplers() ? TokenMode::kDeterministic : TokenMode::kNone;
            o.physical = true;
            const Tensor logits = encoder_forward(c.model, ids, o).logits;
            return std::vector<double>(logits.data().begin(), logits.data().end());
          },
          "Hard-decision logits with physical token dropping")
      .def(
          "evaluate",
          [](const Checkpoint& c, const std::vector<ExampleTuple>& examples, const std::string& padding,
             const std::string& dataset_name, std::size_t batch_size, const std::string& metric) {
            return eval_json(evaluate(c.model, to_examples(examples), make_padding(padding, dataset_name, batch_size),
                                      metric));
          },
          py::arg("examples"), py::arg("padding") = "batch", py::arg("dataset_name") = "", py::arg("batch_size") = 32,
          py::arg("metric") = "accuracy", "Evaluation result as a JSON document");

  m.def(
      "finetune_teacher",
      [](const std::string& config_json, const std::vector<ExampleTuple>& train,
         const std::vector<ExampleTuple>& validation) {
        const RunConfig c = parse_config(config_json);
        TeacherResult r = finetune_teacher(c, make_dataset(c, train, validation));
        return py::make_tuple(std::move(r.checkpoint), metrics_csv(r.metrics, c.model.num_layers));
      },
      "Returns (checkpoint, metrics CSV text)");
  m.def(
      "stage1",
      [](const std::string& config_json, const std::vector<ExampleTuple>& train,
         const std::vector<ExampleTuple>& validation, const Checkpoint& teacher) {
        const RunConfig c = parse_config(config_json);
        Stage1Result r = stage1_train(c, make_dataset(c, train, validation), teacher.model);
        return py::make_tuple(std::move(r.checkpoint), metrics_csv(r.metrics, c.model.num_layers), r.converged,
                              r.report);
      },
      "Returns (checkpoint, metrics CSV text, converged, report)");
  m.def(
      "stage2",
      [](const std::string& config_json, const std::vector<ExampleTuple>& train,
         const std::vector<ExampleTuple>& validation, const Checkpoint& start) {
        const RunConfig c = parse_config(config_json);
        Stage2Result r = stage2_train(start, c, make_dataset(c, train, validation));
        return py::make_tuple(std::move(r.checkpoint), metrics_csv(r.metrics, c.model.num_layers));
      },
      "Returns (checkpoint, metrics CSV text)");

  m.def(
      "model_flops",
      [](const Checkpoint& c, const std::vector<std::string>& trace_lines, const std::string& padding,
         const std::string& dataset_name, std::size_t batch_size) {
        std::vector<PruneTrace> traces;
        for (const auto& line : trace_lines) traces.push_back(trace_from_json_line(line));
        return model_flops(traces, c.model.base_config(), c.model.architecture(),
                           make_padding(padding, dataset_name, batch_size))
            .to_json();
      },
      py::arg("checkpoint"), py::arg("trace_lines"), py::arg("padding") = "batch", py::arg("dataset_name") = "",
      py::arg("batch_size") = 32, "FLOPs report as a JSON document");
}
