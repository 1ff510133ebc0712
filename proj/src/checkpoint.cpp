#include "ibprune/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "ibprune/config.hpp"
#include "ibprune/errors.hpp"

namespace ibprune {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'I', 'B', 'P', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kMaxRank = 8;

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return v;
  }

  std::string raw(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what + " at byte " + std::to_string(pos_));
    }
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::pair<std::string, Tensor>> mask_tensors(const StructuredMasks& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("masks.z_hidden", m.z_hidden);
  for (std::size_t l = 0; l < m.z_head.size(); ++l) {
    const std::string p = "masks." + std::to_string(l) + ".";
    out.emplace_back(p + "z_head", m.z_head[l]);
    out.emplace_back(p + "z_int", m.z_int[l]);
    out.emplace_back(p + "z_mha", m.z_mha[l]);
    out.emplace_back(p + "z_ffn", m.z_ffn[l]);
  }
  return out;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  const Encoder& m = checkpoint.model;
  json header;
  header["base_config"] = to_json(m.base_config());
  header["architecture"] = to_json(m.architecture());
  header["stage"] = checkpoint.stage;
  header["has_masks"] = checkpoint.masks.has_value();
  const std::string header_text = header.dump();

  auto tensors = m.named_parameters();
  if (checkpoint.masks) {
    for (auto& entry : mask_tensors(*checkpoint.masks)) tensors.push_back(std::move(entry));
  }

  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, header_text.size());
  out += header_text;
  put_le<std::uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t dim : t.shape()) put_le<std::uint64_t>(out, dim);
    for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  ByteReader r(bytes);
  if (r.raw(sizeof(kMagic), "magic") != std::string(kMagic, sizeof(kMagic))) {
    throw FormatError("not a checkpoint archive (bad magic)");
  }
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = r.le<std::uint64_t>("header length");
  const std::string header_text = r.raw(header_len, "header");
  ModelConfig base;
  Architecture arch;
  std::string stage;
  bool has_masks = false;
  try {
    const json header = json::parse(header_text);
    base = model_config_from_json(header.at("base_config"));
    arch = architecture_from_json(header.at("architecture"));
    stage = header.at("stage").get<std::string>();
    has_masks = header.at("has_masks").get<bool>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  if (static_cast<int>(arch.layers.size()) != base.num_layers) {
    throw FormatError("checkpoint architecture has " + std::to_string(arch.layers.size()) + " layers, config has " +
                      std::to_string(base.num_layers));
  }

  const auto count = r.le<std::uint64_t>("tensor count");
  std::vector<std::pair<std::string, Tensor>> model_tensors;
  std::map<std::string, Tensor> mask_lookup;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.le<std::uint32_t>("tensor name length");
    std::string name = r.raw(name_len, "tensor name");
    const auto rank = r.le<std::uint32_t>("tensor rank");
    if (rank > kMaxRank) throw FormatError("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& dim : shape) {
      dim = r.le<std::uint64_t>("tensor dims");
      if (dim != 0 && numel > (bytes.size() / 8) / dim) throw FormatError("tensor '" + name + "' is larger than the file");
      numel *= dim;
    }
    std::vector<double> values(numel);
    for (auto& v : values) v = std::bit_cast<double>(r.le<std::uint64_t>("tensor data"));
    Tensor t(std::move(shape), std::move(values));
    if (name.rfind("masks.", 0) == 0) {
      if (!mask_lookup.emplace(name, t).second) throw FormatError("duplicate tensor '" + name + "'");
    } else {
      model_tensors.emplace_back(std::move(name), std::move(t));
    }
  }
  if (!r.done()) throw FormatError("checkpoint has trailing bytes");

  Checkpoint c{Encoder::from_named(base, arch, model_tensors), std::nullopt, stage};
  if (has_masks) {
    StructuredMasks masks;
    auto take = [&](const std::string& name) {
      const auto it = mask_lookup.find(name);
      if (it == mask_lookup.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
      Tensor t = it->second;
      mask_lookup.erase(it);
      return t;
    };
    masks.z_hidden = take("masks.z_hidden");
    for (int l = 0; l < base.num_layers; ++l) {
      const std::string p = "masks." + std::to_string(l) + ".";
      masks.z_head.push_back(take(p + "z_head"));
      masks.z_int.push_back(take(p + "z_int"));
      masks.z_mha.push_back(take(p + "z_mha"));
      masks.z_ffn.push_back(take(p + "z_ffn"));
    }
    try {
      masks.validate(base);
    } catch (const std::exception& e) {
      throw FormatError(std::string("checkpoint masks: ") + e.what());
    }
    c.masks = std::move(masks);
  }
  if (!mask_lookup.empty()) throw FormatError("checkpoint has unexpected tensor '" + mask_lookup.begin()->first + "'");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  const std::string bytes = serialize_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize_checkpoint(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace ibprune
