#include "asge/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "asge/errors.hpp"

namespace asge {

namespace fs = std::filesystem;

const char* to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

namespace {

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset) {
  return (std::uint32_t(bytes[offset]) << 24) | (std::uint32_t(bytes[offset + 1]) << 16) |
         (std::uint32_t(bytes[offset + 2]) << 8) | std::uint32_t(bytes[offset + 3]);
}

void put_be32(std::vector<unsigned char>& bytes, std::uint32_t v) {
  bytes.push_back(static_cast<unsigned char>(v >> 24));
  bytes.push_back(static_cast<unsigned char>(v >> 16));
  bytes.push_back(static_cast<unsigned char>(v >> 8));
  bytes.push_back(static_cast<unsigned char>(v));
}

unsigned char to_byte(float x) {
  return static_cast<unsigned char>(std::clamp(std::lround(x * 255.0f), 0L, 255L));
}

constexpr float kInv255 = 1.0f / 255.0f;

}  // namespace

Dataset load_idx(const fs::path& images_path, const fs::path& labels_path, Index n_classes, Index limit) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  const std::string ipath = images_path.string();
  const std::string lpath = labels_path.string();
  if (img.size() < 16) throw FormatError(ipath + ": header truncated (" + std::to_string(img.size()) + " bytes)");
  if (lab.size() < 8) throw FormatError(lpath + ": header truncated (" + std::to_string(lab.size()) + " bytes)");
  if (read_be32(img, 0) != 0x00000803) throw FormatError(ipath + ": bad magic, expected 0x00000803");
  if (read_be32(lab, 0) != 0x00000801) throw FormatError(lpath + ": bad magic, expected 0x00000801");
  const std::size_t count = read_be32(img, 4);
  const std::size_t rows = read_be32(img, 8);
  const std::size_t cols = read_be32(img, 12);
  const std::size_t label_count = read_be32(lab, 4);
  if (count != label_count) {
    throw FormatError("sample count mismatch: " + ipath + " has " + std::to_string(count) + ", " + lpath +
                      " has " + std::to_string(label_count));
  }
  if (rows == 0 || cols == 0 || count == 0) throw FormatError(ipath + ": zero extent in header");
  const std::size_t expected_img = 16 + count * rows * cols;
  if (img.size() != expected_img) {
    throw FormatError(ipath + ": pixel data size mismatch, expected " + std::to_string(expected_img) +
                      " bytes, got " + std::to_string(img.size()));
  }
  if (lab.size() != 8 + count) {
    throw FormatError(lpath + ": label data size mismatch, expected " + std::to_string(8 + count) +
                      " bytes, got " + std::to_string(lab.size()));
  }
  const std::size_t keep = limit > 0 ? std::min<std::size_t>(count, static_cast<std::size_t>(limit)) : count;
  Dataset ds;
  ds.n_classes = n_classes;
  ds.images = Tensor<float>({static_cast<Index>(keep), 1, static_cast<Index>(rows), static_cast<Index>(cols)});
  for (std::size_t i = 0; i < keep * rows * cols; ++i) ds.images[static_cast<Index>(i)] = img[16 + i] * kInv255;
  ds.labels.resize(keep);
  for (std::size_t i = 0; i < keep; ++i) {
    const int label = lab[8 + i];
    if (label >= n_classes) {
      throw FormatError(lpath + ": label " + std::to_string(label) + " at index " + std::to_string(i) +
                        " outside [0, " + std::to_string(n_classes) + ")");
    }
    ds.labels[i] = label;
  }
  return ds;
}

void write_idx(const Dataset& dataset, const fs::path& images_path, const fs::path& labels_path) {
  if (dataset.channels() != 1) throw UsageError("IDX images must be single-channel");
  std::vector<unsigned char> img;
  img.reserve(16 + static_cast<std::size_t>(dataset.images.size()));
  put_be32(img, 0x00000803);
  put_be32(img, static_cast<std::uint32_t>(dataset.size()));
  put_be32(img, static_cast<std::uint32_t>(dataset.height()));
  put_be32(img, static_cast<std::uint32_t>(dataset.width()));
  for (Index i = 0; i < dataset.images.size(); ++i) img.push_back(to_byte(dataset.images[i]));
  std::vector<unsigned char> lab;
  put_be32(lab, 0x00000801);
  put_be32(lab, static_cast<std::uint32_t>(dataset.size()));
  for (int label : dataset.labels) lab.push_back(static_cast<unsigned char>(label));
  write_file(images_path, img);
  write_file(labels_path, lab);
}

Dataset load_cifar(std::span<const fs::path> batch_files, Index n_classes, Index limit) {
  if (n_classes != 10 && n_classes != 100) throw ConfigError("CIFAR n_classes must be 10 or 100");
  if (batch_files.empty()) throw ConfigError("no CIFAR batch files given");
  const std::size_t label_bytes = n_classes == 100 ? 2 : 1;
  constexpr std::size_t pixels = 3 * 32 * 32;
  const std::size_t record = label_bytes + pixels;
  std::vector<std::vector<unsigned char>> files;
  std::size_t total = 0;
  for (const auto& path : batch_files) {
    files.push_back(read_file(path));
    if (files.back().empty() || files.back().size() % record != 0) {
      throw FormatError(path.string() + ": size " + std::to_string(files.back().size()) +
                        " is not a multiple of the " + std::to_string(record) + "-byte record");
    }
    total += files.back().size() / record;
  }
  const std::size_t keep = limit > 0 ? std::min<std::size_t>(total, static_cast<std::size_t>(limit)) : total;
  Dataset ds;
  ds.n_classes = n_classes;
  ds.images = Tensor<float>({static_cast<Index>(keep), 3, 32, 32});
  ds.labels.reserve(keep);
  std::size_t n = 0;
  for (std::size_t f = 0; f < files.size() && n < keep; ++f) {
    const auto& bytes = files[f];
    for (std::size_t off = 0; off < bytes.size() && n < keep; off += record, ++n) {
      const int label = bytes[off + label_bytes - 1];
      if (label >= n_classes) {
        throw FormatError(batch_files[f].string() + ": label " + std::to_string(label) + " in record " +
                          std::to_string(off / record) + " outside [0, " + std::to_string(n_classes) + ")");
      }
      ds.labels.push_back(label);
      float* dst = ds.images.data() + n * pixels;
      for (std::size_t p = 0; p < pixels; ++p) dst[p] = bytes[off + label_bytes + p] * kInv255;
    }
  }
  return ds;
}

void write_cifar(const Dataset& dataset, const fs::path& path) {
  if (dataset.channels() != 3 || dataset.height() != 32 || dataset.width() != 32) {
    throw UsageError("CIFAR records are 3x32x32");
  }
  const bool fine = dataset.n_classes == 100;
  constexpr Index pixels = 3 * 32 * 32;
  std::vector<unsigned char> bytes;
  for (Index i = 0; i < dataset.size(); ++i) {
    if (fine) bytes.push_back(0);  // coarse label unused
    bytes.push_back(static_cast<unsigned char>(dataset.labels[static_cast<std::size_t>(i)]));
    for (Index p = 0; p < pixels; ++p) bytes.push_back(to_byte(dataset.images[i * pixels + p]));
  }
  write_file(path, bytes);
}

Dataset subset(const Dataset& dataset, std::span<const std::size_t> indices) {
  Dataset out;
  out.n_classes = dataset.n_classes;
  out.split = dataset.split;
  Batch b = gather(dataset, indices);
  out.images = std::move(b.images);
  out.labels = std::move(b.labels);
  return out;
}

Batch gather(const Dataset& dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) throw UsageError("cannot gather an empty batch");
  const Index per = dataset.images.size() / dataset.size();
  Batch batch;
  batch.images = Tensor<float>({static_cast<Index>(indices.size()), dataset.channels(), dataset.height(),
                                dataset.width()});
  batch.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= static_cast<std::size_t>(dataset.size())) throw UsageError("sample index out of range");
    std::copy_n(dataset.images.data() + static_cast<Index>(i) * per, per,
                batch.images.data() + static_cast<Index>(k) * per);
    batch.labels.push_back(dataset.labels[i]);
  }
  return batch;
}

std::pair<Dataset, Dataset> split(const Dataset& dataset, Index val_count, std::uint64_t seed) {
  if (val_count < 0 || val_count >= dataset.size()) {
    throw ConfigError("val_count " + std::to_string(val_count) + " must be in [0, " +
                      std::to_string(dataset.size()) + ")");
  }
  Rng rng(seed);
  const std::vector<std::size_t> order = rng.permutation(static_cast<std::size_t>(dataset.size()));
  const auto n_train = static_cast<std::size_t>(dataset.size() - val_count);
  std::vector<std::size_t> train_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> val_idx(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  // Keep original order within each side so the split is a pure partition.
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  Dataset train = subset(dataset, train_idx);
  train.split = Split::train;
  Dataset val;
  if (!val_idx.empty()) {
    val = subset(dataset, val_idx);
  } else {
    val.n_classes = dataset.n_classes;
  }
  val.split = Split::val;
  return {std::move(train), std::move(val)};
}

ChannelStats compute_channel_stats(const Dataset& dataset) {
  const Index n = dataset.size(), c = dataset.channels();
  const Index area = dataset.height() * dataset.width();
  ChannelStats stats{std::vector<double>(static_cast<std::size_t>(c), 0.0),
                     std::vector<double>(static_cast<std::size_t>(c), 0.0)};
  for (Index ch = 0; ch < c; ++ch) {
    double sum = 0.0, sq = 0.0;
    for (Index i = 0; i < n; ++i) {
      const float* plane = dataset.images.data() + (i * c + ch) * area;
      for (Index p = 0; p < area; ++p) {
        sum += plane[p];
        sq += static_cast<double>(plane[p]) * plane[p];
      }
    }
    const double count = static_cast<double>(n * area);
    const double mean = sum / count;
    stats.mean[static_cast<std::size_t>(ch)] = mean;
    stats.std[static_cast<std::size_t>(ch)] = std::sqrt(std::max(sq / count - mean * mean, 0.0));
  }
  return stats;
}

void save_channel_stats(const ChannelStats& stats, const fs::path& path) {
  nlohmann::json j{{"mean", stats.mean}, {"std", stats.std}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

ChannelStats load_channel_stats(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    ChannelStats stats{j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
    if (stats.mean.size() != stats.std.size()) throw FormatError("mean/std length mismatch");
    return stats;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Dataset normalize(const Dataset& dataset, const ChannelStats& stats) {
  const Index c = dataset.channels();
  if (static_cast<Index>(stats.mean.size()) != c || static_cast<Index>(stats.std.size()) != c) {
    throw ConfigError("channel stats have " + std::to_string(stats.mean.size()) + " entries for " +
                      std::to_string(c) + " channels");
  }
  for (double s : stats.std) {
    if (!(s > 0.0)) throw ConfigError("channel std must be > 0");
  }
  Dataset out = dataset;
  const Index area = dataset.height() * dataset.width();
  for (Index i = 0; i < dataset.size(); ++i) {
    for (Index ch = 0; ch < c; ++ch) {
      const float mean = static_cast<float>(stats.mean[static_cast<std::size_t>(ch)]);
      const float inv = static_cast<float>(1.0 / stats.std[static_cast<std::size_t>(ch)]);
      float* plane = out.images.data() + (i * c + ch) * area;
      for (Index p = 0; p < area; ++p) plane[p] = (plane[p] - mean) * inv;
    }
  }
  return out;
}

Tensor<float> horizontal_flip(const Tensor<float>& image) {
  Tensor<float> out(image.shape());
  const Index w = image.dim(image.rank() - 1);
  const Index rows = image.size() / w;
  out.matrix(rows, w) = image.matrix(rows, w).rowwise().reverse();
  return out;
}

namespace {

Index reflect(Index i, Index n) {
  // n >= 2; reflection without repeating the border pixel
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

}  // namespace

Tensor<float> augment(const Tensor<float>& batch, const AugmentationPolicy& policy, Rng& rng) {
  if (policy.flip_prob < 0.0 || policy.flip_prob > 1.0) throw ConfigError("flip probability must be in [0, 1]");
  if (!policy.enabled()) return batch;
  const Index n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  const Index pad = policy.pad_crop;
  if (pad > 0 && (pad >= h || pad >= w)) throw ConfigError("pad_crop must be smaller than the image");
  Tensor<float> out(batch.shape());
  for (Index i = 0; i < n; ++i) {
    Index dy = 0, dx = 0;
    if (pad > 0) {
      dy = static_cast<Index>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
      dx = static_cast<Index>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
    }
    const bool flip = policy.flip_prob > 0.0 && rng.uniform() < policy.flip_prob;
    for (Index ch = 0; ch < c; ++ch) {
      for (Index y = 0; y < h; ++y) {
        const Index sy = reflect(y + dy, h);
        for (Index x = 0; x < w; ++x) {
          const Index tx = flip ? w - 1 - x : x;
          out.at(i, ch, y, tx) = batch.at(i, ch, sy, reflect(x + dx, w));
        }
      }
    }
  }
  return out;
}

}  // namespace asge
