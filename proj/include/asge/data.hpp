#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "asge/rng.hpp"
#include "asge/tensor.hpp"

namespace asge {

enum class Split { train, val, test };

const char* to_string(Split split);

struct Dataset {
  Tensor<float> images;  // [N, C, H, W]
  std::vector<int> labels;
  Index n_classes = 10;
  Split split = Split::train;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index channels() const { return images.dim(1); }
  Index height() const { return images.dim(2); }
  Index width() const { return images.dim(3); }
};

struct Batch {
  Tensor<float> images;
  std::vector<int> labels;
};

// MNIST-style IDX pair: images magic 0x00000803, labels 0x00000801, all
// header integers big-endian. Pixels scaled to [0, 1]. `limit` keeps only the
// first `limit` samples when non-zero.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 Index n_classes = 10, Index limit = 0);

// Writes the IDX pair; pixel bytes are round(255 * x) clamped to [0, 255].
void write_idx(const Dataset& dataset, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

// CIFAR binary batches: 1 label byte (CIFAR-10) or coarse+fine label bytes
// (CIFAR-100, fine kept) followed by 3072 channel-planar pixel bytes.
Dataset load_cifar(std::span<const std::filesystem::path> batch_files, Index n_classes, Index limit = 0);

void write_cifar(const Dataset& dataset, const std::filesystem::path& path);

// Deterministic shuffled split; the first result holds size() - val_count samples.
std::pair<Dataset, Dataset> split(const Dataset& dataset, Index val_count, std::uint64_t seed);

Dataset subset(const Dataset& dataset, std::span<const std::size_t> indices);

Batch gather(const Dataset& dataset, std::span<const std::size_t> indices);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;

  friend bool operator==(const ChannelStats&, const ChannelStats&) = default;
};

ChannelStats compute_channel_stats(const Dataset& dataset);

// JSON sidecar {"mean": [...], "std": [...]}.
void save_channel_stats(const ChannelStats& stats, const std::filesystem::path& path);
ChannelStats load_channel_stats(const std::filesystem::path& path);

// (x - mean[c]) / std[c] per channel.
Dataset normalize(const Dataset& dataset, const ChannelStats& stats);

struct AugmentationPolicy {
  Index pad_crop = 0;      // reflect-pad then random crop back to size; 0 disables
  double flip_prob = 0.0;  // horizontal flip probability

  bool enabled() const { return pad_crop > 0 || flip_prob > 0.0; }
};

Tensor<float> horizontal_flip(const Tensor<float>& image);

// Per-sample pad-reflect crop then flip, drawing from `rng`.
Tensor<float> augment(const Tensor<float>& batch, const AugmentationPolicy& policy, Rng& rng);

}  // namespace asge
