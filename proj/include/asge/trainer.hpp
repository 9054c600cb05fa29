#pragma once

// Epoch loop: batches in a seeded order, sequential or layer-pipelined
// training, per-epoch validation, best-checkpoint selection, metrics.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "asge/checkpoint.hpp"
#include "asge/config.hpp"
#include "asge/data.hpp"
#include "asge/network.hpp"

namespace asge {

struct PreparedData {
  Dataset train, val, test;
  std::optional<ChannelStats> stats;
};

// Loads, splits and normalizes. Channel statistics come from the training
// split only and are cached at `stats_path` (reused when the file exists).
PreparedData prepare_data(const DatasetConfig& config, std::uint64_t seed,
                          const std::filesystem::path& stats_path, bool load_test = true);

// The stats sidecar used for a run: dataset.stats_cache or <out>/norm_stats.json.
std::filesystem::path stats_path_for(const RunConfig& config);

struct EvalReport {
  Index samples = 0;
  Strategy strategy = Strategy::fusion;
  std::vector<double> per_layer_acc;  // frozen-projection accuracy per layer
  std::optional<double> top1;         // strategy accuracy
  std::optional<double> top5;         // only for n_classes >= 100
  std::optional<Index> best_layer;    // 0-based

  Json to_json() const;
};

// `strategy` defaults to the network's own. Best-layer evaluation works on
// any network with a recorded (or supplied) best layer; without one, top1 is
// left empty. Batches are sharded over `threads` workers.
EvalReport evaluate(const Network<float>& net, const Dataset& dataset, Index batch_size, Index threads = 1,
                    std::optional<Strategy> strategy = std::nullopt,
                    std::optional<Index> best_layer = std::nullopt);

struct EpochMetrics {
  Index epoch = 0;  // 1-based
  double lr = 0.0;
  std::vector<double> per_layer_train_loss;
  std::optional<double> classifier_train_loss;
  std::vector<double> per_layer_val_acc;
  double strategy_val_acc = 0.0;
  Index best_layer = 0;  // 0-based
  double wall_seconds = 0.0;
  double train_seconds = 0.0;
  double val_seconds = 0.0;

  // Timings are written as 0 when `deterministic`.
  Json to_json(bool deterministic) const;
};

struct RunSummary {
  std::vector<EpochMetrics> epochs;
  Index best_epoch = 0;  // 1-based
  double best_val_acc = 0.0;
  std::optional<EvalReport> test;
  Index classifier_params = 0;
  double wall_seconds = 0.0;
};

class Trainer {
 public:
  // Fresh network from config.arch and config.training.seed.
  Trainer(RunConfig config, PreparedData data);
  // Continues from a checkpoint taken with the same config.
  Trainer(RunConfig config, PreparedData data, Checkpoint resume);

  // Trains `steps` batches, closing epochs (validation, metrics, checkpoints)
  // as they complete. Returns the number of batches actually run.
  Index train_steps(Index steps);

  // Runs to the configured epoch count, then evaluates best.ckpt on the test
  // split when one is loaded.
  RunSummary run();

  // Skip all files under the output dir (used by in-process tests).
  void set_write_artifacts(bool enabled) { write_artifacts_ = enabled; }
  void on_epoch(std::function<void(const EpochMetrics&)> callback) { on_epoch_ = std::move(callback); }

  Checkpoint snapshot() const;
  const Network<float>& network() const { return net_; }
  const TrainPosition& position() const { return position_; }
  const std::vector<EpochMetrics>& history() const { return history_; }
  Index batches_per_epoch() const;
  bool finished() const { return position_.epoch >= config_.training.epochs; }

 private:
  void run_sequential(Index begin, Index end);
  void run_pipelined(Index begin, Index end);
  Batch make_batch(Index epoch, Index batch) const;
  double epoch_lr(Index epoch) const;
  void record_step(Index batch, const std::vector<float>& losses, std::optional<float> classifier_loss,
                   Index samples);
  const std::vector<std::size_t>& epoch_order(Index epoch) const;
  void close_epoch();
  void write_checkpoint(const std::filesystem::path& path) const;
  std::filesystem::path out_dir() const { return config_.output.dir; }

  RunConfig config_;
  PreparedData data_;
  Network<float> net_;
  TrainPosition position_;
  EpochAccumulator accumulator_;
  double best_val_acc_ = -1.0;
  Index best_epoch_ = -1;  // 0-based
  std::optional<double> last_val_acc_;
  mutable std::optional<std::pair<Index, std::vector<std::size_t>>> order_;
  std::optional<Network<float>> best_net_;
  bool resumed_ = false;
  bool logs_opened_ = false;
  std::vector<EpochMetrics> history_;
  double epoch_train_seconds_ = 0.0;
  bool write_artifacts_ = true;
  std::function<void(const EpochMetrics&)> on_epoch_;
};

// Writes resolved.json, trains, writes summary.json. The output dir is created.
// With `resume`, training continues from that checkpoint.
RunSummary train(const RunConfig& config, std::function<void(const EpochMetrics&)> progress = {},
                 const std::optional<std::filesystem::path>& resume = std::nullopt);

Json summary_to_json(const RunSummary& summary, bool deterministic);

}  // namespace asge
