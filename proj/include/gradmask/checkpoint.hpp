#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "gradmask/model.hpp"

namespace gradmask {

struct CheckpointMeta {
  std::uint64_t epoch = 0;
  std::uint64_t seed = 0;
  double lambda = 0.0;
};

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  CheckpointMeta meta;
};

// GMCK layout (little-endian): magic "GMCK", u16 version, u32-length config
// JSON, u32 tensor count, per tensor {u32-length name, u32 rank, u32 dims...,
// f64 data}, then u64 epoch, u64 seed, f64 lambda.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace gradmask
