#pragma once

#include <cstdint>
#include <filesystem>

#include "hitl/nn.hpp"

namespace hitl {

struct TrainingCounters {
  std::uint64_t global_step = 0;
  std::uint64_t episodes = 0;
  std::uint64_t train_steps = 0;

  friend bool operator==(const TrainingCounters&, const TrainingCounters&) = default;
};

/// Binary checkpoint: magic "HITLCKPT", format version, the four dueling nets,
/// both Adam states and the counters. Little-endian IEEE doubles; writing the
/// same state twice yields identical bytes.
void save_checkpoint(const std::filesystem::path& path, const nn::DuelingNetPair& nets,
                     const TrainingCounters& counters);

struct Checkpoint {
  nn::DuelingNetPair nets;
  TrainingCounters counters;
};

/// Throws StorageError on I/O problems and ConfigError on a bad header.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace hitl
