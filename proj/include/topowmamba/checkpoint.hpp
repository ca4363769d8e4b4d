#pragma once

#include <memory>

#include "topowmamba/network.hpp"

namespace twm {

struct CheckpointMeta {
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  double best_metric = 0.0;
};

using NamedBuffers = std::vector<std::pair<std::string, std::vector<float>>>;

struct LoadedCheckpoint {
  ModelConfig config;
  std::shared_ptr<Model<float>> model;
  NamedBuffers optimizer_state;
  CheckpointMeta meta;
};

// Binary layout: magic "TWMB" | u32 version=1 | u64 json length + config JSON
// | u32 tensor count | per tensor: u16 name length, name, u8 dtype (0 = f32),
// u8 rank, rank x u64 extents, raw little-endian payload | u32 CRC32 of all
// preceding bytes. Writes are atomic (temp file + rename).
void checkpoint_save(const Model<float>& model, const NamedBuffers& optimizer_state, const CheckpointMeta& meta,
                     const std::string& path);

LoadedCheckpoint checkpoint_load(const std::string& path);

// Raises ConfigError naming every differing key.
void require_config_match(const ModelConfig& requested, const ModelConfig& loaded);

}  // namespace twm
