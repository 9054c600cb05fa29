#pragma once

// Little-endian binary checkpoint:
//   "ASGE" | version u32 | arch hash (32 bytes, SHA-256 of the canonical arch JSON)
//   record count u32, then records: name_len u32 | name | kind u8 | payload
//     kind 0: f32 tensor  ndim u32 | dims u32[ndim] | data
//     kind 1: f64 tensor  ndim u32 | dims u32[ndim] | data
//     kind 2: projection head  seed u64 | in_dim u32 | n_classes u32
//     kind 3: blob  length u64 | bytes (JSON metadata)
// Projection matrices are never stored; they are regenerated from the seed.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "asge/config.hpp"
#include "asge/network.hpp"

namespace asge {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using ArchHash = std::array<std::uint8_t, 32>;

ArchHash arch_hash(const ArchSpec& spec);
std::string to_hex(const ArchHash& hash);

struct TrainPosition {
  Index epoch = 0;             // epoch currently in progress (0-based)
  Index batch = 0;             // next batch within that epoch
  std::int64_t global_step = 0;

  friend bool operator==(const TrainPosition&, const TrainPosition&) = default;
};

struct EpochAccumulator {
  std::vector<double> loss_sums;  // per layer, sample-weighted
  double classifier_loss_sum = 0.0;
  double samples = 0.0;

  friend bool operator==(const EpochAccumulator&, const EpochAccumulator&) = default;
};

struct Checkpoint {
  Network<float> network;
  TrainPosition position;
  EpochAccumulator accumulator;
  double best_val_acc = -1.0;
  Index best_epoch = -1;
  std::optional<double> last_val_acc;
  Json training;  // resolved training section of the run config
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

// Throws FormatError on a bad header or a hash that does not match the
// stored architecture.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Reads only the header hash.
ArchHash read_checkpoint_hash(const std::filesystem::path& path);

// Order-sensitive FNV-1a over every conv and classifier parameter bit pattern,
// one value per layer plus one for the classifier (0 when absent).
std::vector<std::uint64_t> parameter_checksums(const Network<float>& net);

}  // namespace asge
