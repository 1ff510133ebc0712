#include "ibprune/data.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>

#include "ibprune/errors.hpp"

namespace ibprune {

using nlohmann::json;

bool is_signal_token(const SynthSpec& spec, int id) {
  return id >= 1 && id <= spec.num_classes * spec.signal_ids_per_class;
}

int signal_value(const SynthSpec& spec, int id) {
  if (!is_signal_token(spec, id)) throw ContractError("token " + std::to_string(id) + " is not a signal token");
  return (id - 1) % spec.num_classes;
}

int synth_label(const SynthSpec& spec, const std::vector<int>& ids) {
  int total = 0;
  for (int id : ids) {
    if (is_signal_token(spec, id)) total += signal_value(spec, id);
  }
  return total % spec.num_classes;
}

double expected_signal_fraction(const SynthSpec& spec) {
  double sum = 0.0;
  for (int len = spec.min_length; len <= spec.max_length; ++len) sum += static_cast<double>(spec.num_signal) / len;
  return sum / (spec.max_length - spec.min_length + 1);
}

std::vector<Example> synth_task_generate(const SynthSpec& spec, std::size_t count, Rng& rng) {
  spec.validate();
  const int k = spec.num_classes;
  const int first_distractor = 1 + k * spec.signal_ids_per_class;
  const int distractors = spec.vocab_size - first_distractor;

  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(k));
  rng.shuffle(labels);

  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int span = spec.max_length - spec.min_length + 1;
    const int length = spec.min_length + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
    Example ex;
    ex.label = labels[i];
    ex.ids.assign(static_cast<std::size_t>(length), 0);
    ex.ids[0] = kClsTokenId;
    for (int p = 1; p < length; ++p) {
      ex.ids[static_cast<std::size_t>(p)] = first_distractor + static_cast<int>(rng.below(static_cast<std::uint64_t>(distractors)));
    }
    // Free signal values for all but the last; the last closes the sum.
    std::vector<int> values(static_cast<std::size_t>(spec.num_signal));
    int partial = 0;
    for (int s = 0; s + 1 < spec.num_signal; ++s) {
      values[static_cast<std::size_t>(s)] = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
      partial += values[static_cast<std::size_t>(s)];
    }
    values.back() = ((ex.label - partial) % k + k) % k;
    std::vector<int> positions(static_cast<std::size_t>(length - 1));
    for (int p = 1; p < length; ++p) positions[static_cast<std::size_t>(p - 1)] = p;
    rng.shuffle(positions);
    for (int s = 0; s < spec.num_signal; ++s) {
      const int variant = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.signal_ids_per_class)));
      ex.ids[static_cast<std::size_t>(positions[static_cast<std::size_t>(s)])] =
          1 + values[static_cast<std::size_t>(s)] + variant * k;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<Example> read_jsonl(std::istream& in, int vocab_size, int num_labels) {
  std::vector<Example> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(number) + ": ";
    Example ex;
    try {
      const json j = json::parse(line);
      ex.ids = j.at("ids").get<std::vector<int>>();
      ex.label = j.at("label").get<int>();
    } catch (const json::exception& e) {
      throw FormatError(where + e.what());
    }
    if (ex.ids.empty()) throw FormatError(where + "empty token list");
    for (int id : ex.ids) {
      if (id < 0 || id >= vocab_size) {
        throw FormatError(where + "token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(vocab_size));
      }
    }
    if (ex.label < 0 || ex.label >= num_labels) {
      throw FormatError(where + "label " + std::to_string(ex.label) + " outside [0, " + std::to_string(num_labels) + ")");
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<Example> read_jsonl_file(const std::string& path, int vocab_size, int num_labels) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open dataset file '" + path + "'");
  try {
    return read_jsonl(in, vocab_size, num_labels);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

void write_jsonl(std::ostream& out, const std::vector<Example>& examples) {
  for (const auto& ex : examples) out << json{{"ids", ex.ids}, {"label", ex.label}}.dump() << "\n";
}

void write_jsonl_file(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write dataset file '" + path + "'");
  write_jsonl(out, examples);
}

std::vector<std::string> read_vocabulary_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open vocabulary file '" + path + "'");
  std::vector<std::string> vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    vocab.push_back(line);
  }
  return vocab;
}

void write_vocabulary_file(const std::string& path, const std::vector<std::string>& vocabulary) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write vocabulary file '" + path + "'");
  for (const auto& token : vocabulary) out << token << "\n";
}

std::vector<std::string> synth_vocabulary(const SynthSpec& spec) {
  std::vector<std::string> vocab(static_cast<std::size_t>(spec.vocab_size));
  for (int id = 0; id < spec.vocab_size; ++id) {
    if (id == kClsTokenId) {
      vocab[0] = "[CLS]";
    } else if (is_signal_token(spec, id)) {
      vocab[static_cast<std::size_t>(id)] = "sig" + std::to_string(id) + "_v" + std::to_string(signal_value(spec, id));
    } else {
      vocab[static_cast<std::size_t>(id)] = "tok" + std::to_string(id);
    }
  }
  return vocab;
}

Dataset load_dataset(const DatasetSpec& spec, int num_labels, int vocab_size, std::uint64_t seed) {
  spec.validate();
  Dataset d;
  d.name = spec.name;
  d.num_labels = num_labels;
  d.vocab_size = vocab_size;
  if (!spec.vocab_path.empty()) {
    d.vocabulary = read_vocabulary_file(spec.vocab_path);
    if (static_cast<int>(d.vocabulary.size()) > vocab_size) {
      throw ConfigError("vocabulary file has " + std::to_string(d.vocabulary.size()) +
                        " entries, more than the model vocabulary " + std::to_string(vocab_size));
    }
    d.vocab_size = static_cast<int>(d.vocabulary.size());
  }
  if (spec.is_synthetic()) {
    const SynthSpec& s = spec.synthetic;
    if (s.num_classes != num_labels) throw ConfigError("synthetic num_classes differs from the model's label count");
    if (s.vocab_size > d.vocab_size) throw ConfigError("synthetic vocab_size exceeds the vocabulary");
    Rng rng(seed);
    d.train = synth_task_generate(s, spec.split_sizes.train, rng);
    d.validation = synth_task_generate(s, spec.split_sizes.validation, rng);
    d.test = synth_task_generate(s, spec.split_sizes.test, rng);
    if (d.vocabulary.empty()) d.vocabulary = synth_vocabulary(s);
  } else {
    d.train = read_jsonl_file(spec.train_path, d.vocab_size, num_labels);
    d.validation = read_jsonl_file(spec.validation_path, d.vocab_size, num_labels);
    d.test = read_jsonl_file(spec.test_path, d.vocab_size, num_labels);
    if (d.train.empty()) throw FormatError("training split '" + spec.train_path + "' is empty");
  }
  return d;
}

double majority_baseline(const std::vector<Example>& examples, int num_labels) {
  if (examples.empty()) return 0.0;
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_labels), 0);
  for (const auto& ex : examples) ++counts.at(static_cast<std::size_t>(ex.label));
  return static_cast<double>(*std::max_element(counts.begin(), counts.end())) / static_cast<double>(examples.size());
}

}  // namespace ibprune
