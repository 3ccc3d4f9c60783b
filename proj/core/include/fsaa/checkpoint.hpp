#pragma once

// Checkpoint byte layout (all integers unsigned 32-bit little-endian):
//
//   "FSAA"  version
//   config: input_channels input_size feature_channels level_count levels...
//           combine_mode classifier_enabled map_activation
//   entry_count, then per entry:
//           name_length name_bytes rank dims... float32 LE payload
//   crc32 of every preceding byte
//
// Entries cover every trainable tensor and the BN running statistics.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fsaa/model.hpp"

namespace fsaa {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams<float> params;
};

std::vector<std::uint8_t> serialize_checkpoint(const ModelConfig& config, const ModelParams<float>& params);

/// Throws LoadError on bad magic, version, checksum, truncation or entries
/// that do not fit the stored config. `source` names the input in messages.
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source = "checkpoint");

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams<float>& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// CRC32 of the serialized config record.
std::uint32_t config_hash(const ModelConfig& config);

}  // namespace fsaa
