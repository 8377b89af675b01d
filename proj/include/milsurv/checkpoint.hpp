#pragma once

// Checkpoint files (little-endian):
//   "MILC" | u16 version = 1 | u32 header length | header JSON
//   ({"config", "seed", "epoch", ...}) | u32 parameter count |
//   per parameter: u16 name length | name | u8 rank | rank × u32 extent |
//   float32 values | u32 CRC-32 of every preceding byte

#include <cstdint>
#include <filesystem>
#include <memory>

#include <nlohmann/json.hpp>

#include "milsurv/heads.hpp"

namespace milsurv {

struct CheckpointMeta {
  std::uint64_t seed = 0;
  int epoch = 0;
  nlohmann::json extra = nlohmann::json::object();
};

template <class T>
void save_checkpoint(const MilHead<T>& head, const CheckpointMeta& meta, const std::filesystem::path& path);

struct LoadedCheckpoint {
  HeadConfig config;
  CheckpointMeta meta;
  std::unique_ptr<MilHead<float>> head;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace milsurv
