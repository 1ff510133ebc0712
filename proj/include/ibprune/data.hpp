#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ibprune/config.hpp"
#include "ibprune/rng.hpp"

namespace ibprune {

/// Token id of the classification token that opens every synthetic sequence.
inline constexpr int kClsTokenId = 0;

struct Example {
  std::vector<int> ids;
  int label = 0;
  bool operator==(const Example&) const = default;
};

struct Dataset {
  std::string name;
  int num_labels = 0;
  int vocab_size = 0;
  std::vector<std::string> vocabulary;  // optional id -> string map
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test;
};

/// Synthetic id layout: 0 is the classification token, ids
/// 1 .. num_classes * signal_ids_per_class are signal tokens whose value is
/// (id - 1) % num_classes, every larger id is a distractor.
bool is_signal_token(const SynthSpec& spec, int id);
int signal_value(const SynthSpec& spec, int id);
/// Label rule: sum of the signal values modulo num_classes.
int synth_label(const SynthSpec& spec, const std::vector<int>& ids);
/// E[num_signal / length] with the length uniform over [min_length, max_length].
double expected_signal_fraction(const SynthSpec& spec);

/// `count` sequences whose labels cycle through every class before being
/// shuffled, so class counts differ by at most one. Each sequence is the
/// classification token followed by distractors with num_signal signal
/// tokens planted at random positions; the signal values are drawn uniformly
/// subject to their sum matching the label.
std::vector<Example> synth_task_generate(const SynthSpec& spec, std::size_t count, Rng& rng);

/// Builds every split of `spec` (synthetic splits come from one generator
/// seeded with `seed`). Throws ConfigError for inconsistent specs and
/// FormatError for unreadable or invalid files.
Dataset load_dataset(const DatasetSpec& spec, int num_labels, int vocab_size, std::uint64_t seed);

/// JSONL with one {"ids": [...], "label": k} object per line. Errors name the
/// 1-based line number.
std::vector<Example> read_jsonl(std::istream& in, int vocab_size, int num_labels);
std::vector<Example> read_jsonl_file(const std::string& path, int vocab_size, int num_labels);
void write_jsonl(std::ostream& out, const std::vector<Example>& examples);
void write_jsonl_file(const std::string& path, const std::vector<Example>& examples);

std::vector<std::string> read_vocabulary_file(const std::string& path);
void write_vocabulary_file(const std::string& path, const std::vector<std::string>& vocabulary);
/// Readable names for the synthetic layout ("[CLS]", "sig3_v1", "tok40").
std::vector<std::string> synth_vocabulary(const SynthSpec& spec);

/// Fraction of examples carrying the most common label.
double majority_baseline(const std::vector<Example>& examples, int num_labels);

}  // namespace ibprune
