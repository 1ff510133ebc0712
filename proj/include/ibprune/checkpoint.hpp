#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "ibprune/encoder.hpp"

namespace ibprune {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A model plus the binary structured masks it was compacted with (when a
/// static pruning stage ran) and the name of the stage that produced it.
struct Checkpoint {
  Encoder model;
  std::optional<StructuredMasks> masks;
  std::string stage;
};

/// Binary archive: magic "IBPCKPT1", u32 version, u64 length plus JSON header
/// (base config, architecture, stage, mask presence), u64 tensor count, then
/// per tensor u32 name length, name, u32 rank, u64 dims, little-endian f64
/// data. Masks are stored as tensors named "masks.*".
std::string serialize_checkpoint(const Checkpoint& checkpoint);
/// Throws FormatError on a wrong magic or version, truncation, trailing
/// bytes, or tensors inconsistent with the header. Nothing is returned on
/// failure.
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ibprune
