#pragma once

// Run configuration: a JSON document with sections dataset / arch / training /
// output. Every field has a default except the dataset paths; unknown keys
// are rejected so a typo in an ablation config fails loudly.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asge/data.hpp"
#include "asge/network.hpp"
#include "asge/optim.hpp"

namespace asge {

using Json = nlohmann::json;

struct DatasetConfig {
  std::string name = "mnist";  // mnist | fashion-mnist | cifar10 | cifar100
  std::string train_images, train_labels, test_images, test_labels;  // IDX
  std::vector<std::string> train_batches, test_batches;              // CIFAR
  Index val_count = -1;    // -1: 10000 for IDX datasets, 5000 for CIFAR
  Index limit_train = 0;   // keep only the first n source samples; 0 keeps all
  Index limit_test = 0;
  bool normalize = true;
  AugmentationPolicy augmentation;  // defaults depend on the dataset
  std::string stats_cache;          // channel-statistics sidecar; empty: <out>/norm_stats.json

  bool is_idx() const { return name == "mnist" || name == "fashion-mnist"; }
};

struct TrainingConfig {
  OptimizerConfig optimizer;
  double lr_max = 2e-4;
  double lr_min = 1e-5;
  Index batch_size = 128;
  Index epochs = 100;
  std::uint64_t seed = 0;
  bool deterministic = true;
  bool pipeline = false;
  Index queue_depth = 2;
  Index threads = 1;
  Index eval_batch_size = 500;
};

struct OutputConfig {
  std::string dir = "runs/default";
  Index checkpoint_keep = 1;  // epoch checkpoints retained besides best.ckpt / last.ckpt
};

struct RunConfig {
  DatasetConfig dataset;
  ArchSpec arch;
  TrainingConfig training;
  OutputConfig output;
};

Json arch_to_json(const ArchSpec& spec);
ArchSpec arch_from_json(const Json& j);

// Default input geometry, class count and augmentation for a dataset name.
ArchSpec default_arch(const std::string& dataset_name);

// Config errors carry the dotted field path, e.g. "dataset.train_images".
class FieldError : public ConfigError {
 public:
  FieldError(const std::string& field, const std::string& what)
      : ConfigError(field + ": " + what), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Sets `key.path=value` in a raw config document; value is parsed as JSON
// when possible and taken as a string otherwise.
void apply_override(Json& doc, const std::string& assignment);

// Parses and validates. Relative dataset paths are resolved against
// `data_dir` (when non-empty); `check_paths` verifies that they exist.
RunConfig parse_config(const Json& doc, const std::filesystem::path& data_dir = {}, bool check_paths = true);

// Fully materialized config; parse_config(to_json(c)) == c.
Json to_json(const RunConfig& config);

Json read_json_file(const std::filesystem::path& path);
void write_json_file(const Json& j, const std::filesystem::path& path);

}  // namespace asge
