#include "asge/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include "asge/pipeline.hpp"

namespace asge {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

Index dataset_classes(const DatasetConfig& config) { return config.name == "cifar100" ? 100 : 10; }

Dataset load_source(const DatasetConfig& config, bool train_side) {
  const Index n_classes = dataset_classes(config);
  const Index limit = train_side ? config.limit_train : config.limit_test;
  if (config.is_idx()) {
    return train_side ? load_idx(config.train_images, config.train_labels, n_classes, limit)
                      : load_idx(config.test_images, config.test_labels, n_classes, limit);
  }
  const auto& names = train_side ? config.train_batches : config.test_batches;
  std::vector<fs::path> paths(names.begin(), names.end());
  return load_cifar(paths, n_classes, limit);
}

void append_line(const fs::path& path, const Json& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  out << record.dump() << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

struct PipelineItem {
  Index batch = 0;
  Tensor<float> x;
  std::vector<int> labels;
  std::vector<Tensor<float>> gaps;
  std::vector<float> losses;
  std::optional<float> classifier_loss;
};

std::string non_finite(Index layer, Index epoch, Index batch) {
  return "layer " + std::to_string(layer + 1) + ": non-finite local loss (epoch " + std::to_string(epoch + 1) +
         ", batch " + std::to_string(batch) + ")";
}

}  // namespace

fs::path stats_path_for(const RunConfig& config) {
  if (!config.dataset.stats_cache.empty()) return config.dataset.stats_cache;
  return fs::path(config.output.dir) / "norm_stats.json";
}

PreparedData prepare_data(const DatasetConfig& config, std::uint64_t seed, const fs::path& stats_path,
                          bool load_test) {
  Dataset full = load_source(config, true);
  if (config.val_count < 1 || config.val_count >= full.size()) {
    throw FieldError("dataset.val_count", "must be in [1, " + std::to_string(full.size() - 1) + "] for " +
                                               std::to_string(full.size()) + " training samples");
  }
  PreparedData out;
  std::tie(out.train, out.val) = split(full, config.val_count, derive_seed(seed, "split"));
  if (load_test) out.test = load_source(config, false);
  if (config.normalize) {
    ChannelStats stats;
    if (!stats_path.empty() && fs::exists(stats_path)) {
      stats = load_channel_stats(stats_path);
      if (static_cast<Index>(stats.mean.size()) != out.train.channels()) {
        throw FormatError(stats_path.string() + ": channel count does not match the dataset");
      }
    } else {
      stats = compute_channel_stats(out.train);
      if (!stats_path.empty()) {
        if (stats_path.has_parent_path()) fs::create_directories(stats_path.parent_path());
        save_channel_stats(stats, stats_path);
      }
    }
    out.train = normalize(out.train, stats);
    out.val = normalize(out.val, stats);
    if (load_test) out.test = normalize(out.test, stats);
    out.stats = stats;
  }
  return out;
}

Json EvalReport::to_json() const {
  Json j{{"samples", samples},
         {"strategy", to_string(strategy)},
         {"per_layer_acc", per_layer_acc},
         {"top1", top1 ? Json(*top1) : Json(nullptr)},
         {"best_layer", best_layer ? Json(*best_layer + 1) : Json(nullptr)}};
  if (top5) j["top5"] = *top5;
  return j;
}

EvalReport evaluate(const Network<float>& net, const Dataset& dataset, Index batch_size, Index threads,
                    std::optional<Strategy> strategy, std::optional<Index> best_layer) {
  EvalReport report;
  report.strategy = strategy.value_or(net.spec.strategy);
  report.samples = dataset.size();
  report.best_layer = best_layer ? best_layer : net.best_layer;
  if (report.strategy != Strategy::best && (report.strategy != net.spec.strategy || !net.classifier)) {
    throw UsageError(std::string("network was built for strategy '") + to_string(net.spec.strategy) +
                     "', cannot evaluate '" + to_string(report.strategy) + "'");
  }
  if (report.best_layer && (*report.best_layer < 0 || *report.best_layer >= net.num_layers())) {
    throw UsageError("best layer " + std::to_string(*report.best_layer + 1) + " out of range");
  }
  const Index layers = net.num_layers();
  const bool want_top5 = net.spec.n_classes >= 100;
  const Index n_batches = (dataset.size() + batch_size - 1) / batch_size;

  struct Counts {
    std::vector<Index> layer_hits;
    Index top1 = 0, top5 = 0;
  };
  const Index workers = std::max<Index>(1, std::min(threads, n_batches));
  std::vector<Counts> counts(static_cast<std::size_t>(workers));
  auto work = [&](Index w) {
    Counts& c = counts[static_cast<std::size_t>(w)];
    c.layer_hits.assign(static_cast<std::size_t>(layers), 0);
    for (Index b = w; b < n_batches; b += workers) {
      const Index begin = b * batch_size;
      const Index end = std::min(dataset.size(), begin + batch_size);
      std::vector<std::size_t> idx;
      for (Index i = begin; i < end; ++i) idx.push_back(static_cast<std::size_t>(i));
      const Batch batch = gather(dataset, idx);
      const InferenceResult<float> r = infer(net, batch.images);
      for (Index l = 0; l < layers; ++l) {
        const std::vector<int> pred = argmax_rows(r.layer_logits[static_cast<std::size_t>(l)]);
        for (std::size_t i = 0; i < pred.size(); ++i) c.layer_hits[static_cast<std::size_t>(l)] += pred[i] == batch.labels[i];
      }
      const Tensor<float>* scores = nullptr;
      if (report.strategy == Strategy::best) {
        if (report.best_layer) scores = &r.layer_logits[static_cast<std::size_t>(*report.best_layer)];
      } else {
        scores = &r.scores;
      }
      if (!scores) continue;
      const Index n = scores->dim(1);
      for (Index i = 0; i < scores->dim(0); ++i) {
        const float* row = scores->data() + i * n;
        const int label = batch.labels[static_cast<std::size_t>(i)];
        // rank = number of classes scoring strictly higher, ties broken toward the lower index
        Index rank = 0;
        for (Index k = 0; k < n; ++k) {
          if (row[k] > row[label] || (row[k] == row[label] && k < label)) ++rank;
        }
        c.top1 += rank == 0;
        c.top5 += rank < 5;
      }
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (Index w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          work(w);
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  Counts total;
  total.layer_hits.assign(static_cast<std::size_t>(layers), 0);
  for (const Counts& c : counts) {
    for (Index l = 0; l < layers; ++l) total.layer_hits[static_cast<std::size_t>(l)] += c.layer_hits[static_cast<std::size_t>(l)];
    total.top1 += c.top1;
    total.top5 += c.top5;
  }
  const double denom = std::max<double>(1.0, static_cast<double>(dataset.size()));
  for (Index hits : total.layer_hits) report.per_layer_acc.push_back(static_cast<double>(hits) / denom);
  const bool have_scores = report.strategy != Strategy::best || report.best_layer.has_value();
  if (have_scores) {
    report.top1 = static_cast<double>(total.top1) / denom;
    if (want_top5) report.top5 = static_cast<double>(total.top5) / denom;
  }
  return report;
}

Json EpochMetrics::to_json(bool deterministic) const {
  Json j{{"epoch", epoch},
         {"lr", lr},
         {"per_layer_train_loss", per_layer_train_loss},
         {"per_layer_val_acc", per_layer_val_acc},
         {"strategy_val_acc", strategy_val_acc},
         {"best_layer", best_layer + 1},
         {"wall_seconds", deterministic ? 0.0 : wall_seconds}};
  if (classifier_train_loss) j["classifier_train_loss"] = *classifier_train_loss;
  return j;
}

Trainer::Trainer(RunConfig config, PreparedData data)
    : config_(std::move(config)),
      data_(std::move(data)),
      net_(build_network<float>(config_.arch, config_.training.seed)) {
  accumulator_.loss_sums.assign(static_cast<std::size_t>(net_.num_layers()), 0.0);
  if (data_.train.size() == 0) throw InputError("empty training split");
  if (data_.train.channels() != config_.arch.in_channels || data_.train.height() != config_.arch.in_height ||
      data_.train.width() != config_.arch.in_width) {
    throw ConfigError("arch: input geometry " + std::to_string(config_.arch.in_channels) + "x" +
                      std::to_string(config_.arch.in_height) + "x" + std::to_string(config_.arch.in_width) +
                      " does not match the dataset (" + shape_str(data_.train.images.shape()) + ")");
  }
  if (data_.train.n_classes != config_.arch.n_classes) {
    throw ConfigError("arch.n_classes: " + std::to_string(config_.arch.n_classes) + " but the dataset has " +
                      std::to_string(data_.train.n_classes));
  }
}

Trainer::Trainer(RunConfig config, PreparedData data, Checkpoint resume) : Trainer(std::move(config), std::move(data)) {
  if (arch_hash(resume.network.spec) != arch_hash(config_.arch)) {
    throw FormatError("checkpoint architecture " + to_hex(arch_hash(resume.network.spec)) +
                      " does not match the config architecture " + to_hex(arch_hash(config_.arch)));
  }
  if (resume.network.seed != config_.training.seed) {
    throw ConfigError("training.seed: checkpoint was trained with seed " + std::to_string(resume.network.seed));
  }
  net_ = std::move(resume.network);
  position_ = resume.position;
  accumulator_ = std::move(resume.accumulator);
  if (accumulator_.loss_sums.empty()) accumulator_.loss_sums.assign(static_cast<std::size_t>(net_.num_layers()), 0.0);
  best_val_acc_ = resume.best_val_acc;
  best_epoch_ = resume.best_epoch;
  last_val_acc_ = resume.last_val_acc;
  resumed_ = true;
}

Index Trainer::batches_per_epoch() const {
  return (data_.train.size() + config_.training.batch_size - 1) / config_.training.batch_size;
}

double Trainer::epoch_lr(Index epoch) const {
  return cosine_lr(CosineSchedule{config_.training.lr_max, config_.training.lr_min, config_.training.epochs}, epoch);
}

const std::vector<std::size_t>& Trainer::epoch_order(Index epoch) const {
  if (!order_ || order_->first != epoch) {
    Rng rng(derive_seed(config_.training.seed, "batch-order", static_cast<std::uint64_t>(epoch)));
    order_.emplace(epoch, rng.permutation(static_cast<std::size_t>(data_.train.size())));
  }
  return order_->second;
}

Batch Trainer::make_batch(Index epoch, Index batch) const {
  const std::vector<std::size_t>& order = epoch_order(epoch);
  const Index bs = config_.training.batch_size;
  const auto begin = order.begin() + batch * bs;
  const auto end = order.begin() + std::min<Index>(data_.train.size(), (batch + 1) * bs);
  Batch out = gather(data_.train, std::span<const std::size_t>(&*begin, static_cast<std::size_t>(end - begin)));
  if (config_.dataset.augmentation.enabled()) {
    const std::uint64_t epoch_seed = derive_seed(config_.training.seed, "augment", static_cast<std::uint64_t>(epoch));
    Rng rng(derive_seed(epoch_seed, "batch", static_cast<std::uint64_t>(batch)));
    out.images = augment(out.images, config_.dataset.augmentation, rng);
  }
  return out;
}

void Trainer::record_step(Index batch, const std::vector<float>& losses, std::optional<float> classifier_loss,
                          Index samples) {
  for (std::size_t l = 0; l < losses.size(); ++l) {
    if (!std::isfinite(losses[l])) throw NumericError(non_finite(static_cast<Index>(l), position_.epoch, batch));
    accumulator_.loss_sums[l] += static_cast<double>(losses[l]) * static_cast<double>(samples);
  }
  if (classifier_loss) {
    if (!std::isfinite(*classifier_loss)) {
      throw NumericError("classifier: non-finite loss (epoch " + std::to_string(position_.epoch + 1) + ", batch " +
                         std::to_string(batch) + ")");
    }
    accumulator_.classifier_loss_sum += static_cast<double>(*classifier_loss) * static_cast<double>(samples);
  }
  accumulator_.samples += static_cast<double>(samples);
  position_.batch = batch + 1;
  ++position_.global_step;
}

void Trainer::run_sequential(Index begin, Index end) {
  const double lr = epoch_lr(position_.epoch);
  for (Index b = begin; b < end; ++b) {
    const Batch batch = make_batch(position_.epoch, b);
    const TrainReport<float> report = forward_train(net_, batch.images, batch.labels, lr, config_.training.optimizer);
    record_step(b, report.layer_loss, report.classifier_loss, static_cast<Index>(batch.labels.size()));
  }
}

void Trainer::run_pipelined(Index begin, Index end) {
  const double lr = epoch_lr(position_.epoch);
  const Index epoch = position_.epoch;
  const OptimizerConfig& cfg = config_.training.optimizer;
  epoch_order(epoch);  // materialize before the source thread reads it

  Index next = begin;
  std::function<std::optional<PipelineItem>()> source = [&]() -> std::optional<PipelineItem> {
    if (next >= end) return std::nullopt;
    Batch batch = make_batch(epoch, next);
    PipelineItem item;
    item.batch = next++;
    item.x = std::move(batch.images);
    item.labels = std::move(batch.labels);
    return item;
  };

  std::mutex numeric_mutex;
  std::optional<std::string> numeric_failure;
  std::vector<std::function<void(PipelineItem&)>> stages;
  for (std::size_t k = 0; k < net_.layers.size(); ++k) {
    stages.push_back([&, k](PipelineItem& item) {
      LayerOutput<float> out = asge_layer_step(item.x, net_.layers[k], item.labels, lr, cfg);
      if (!std::isfinite(out.loss)) {
        std::lock_guard lock(numeric_mutex);
        numeric_failure = non_finite(static_cast<Index>(k), epoch, item.batch);
        throw NumericError(*numeric_failure);
      }
      item.losses.push_back(out.loss);
      item.gaps.push_back(std::move(out.gap));
      item.x = std::move(out.output);
    });
  }
  if (net_.classifier) {
    stages.push_back([&](PipelineItem& item) {
      const Tensor<float> features =
          classifier_features<float>(net_.spec.strategy, std::span<const Tensor<float>>(item.gaps));
      item.classifier_loss = classifier_step(*net_.classifier, features, item.labels, lr, cfg);
    });
  }
  std::function<void(PipelineItem&&)> sink = [&](PipelineItem&& item) {
    record_step(item.batch, item.losses, item.classifier_loss, static_cast<Index>(item.labels.size()));
  };
  try {
    pipeline_execute<PipelineItem>(source, stages, static_cast<std::size_t>(config_.training.queue_depth), sink);
  } catch (const PipelineError& e) {
    std::lock_guard lock(numeric_mutex);
    if (numeric_failure) throw NumericError(*numeric_failure);
    throw;
  }
}

Index Trainer::train_steps(Index steps) {
  Index done = 0;
  while (done < steps && !finished()) {
    const Index total = batches_per_epoch();
    const Index begin = position_.batch;
    const Index end = std::min(total, begin + (steps - done));
    const auto start = Clock::now();
    if (end > begin) {
      if (config_.training.pipeline) {
        run_pipelined(begin, end);
      } else {
        run_sequential(begin, end);
      }
    }
    epoch_train_seconds_ += seconds_since(start);
    done += end - begin;
    if (position_.batch >= total) close_epoch();
  }
  return done;
}

void Trainer::write_checkpoint(const fs::path& path) const { save_checkpoint(snapshot(), path); }

Checkpoint Trainer::snapshot() const {
  Checkpoint ckpt;
  ckpt.network = net_;
  ckpt.position = position_;
  ckpt.accumulator = accumulator_;
  ckpt.best_val_acc = best_val_acc_;
  ckpt.best_epoch = best_epoch_;
  ckpt.last_val_acc = last_val_acc_;
  ckpt.training = to_json(config_).at("training");
  return ckpt;
}

void Trainer::close_epoch() {
  const auto val_start = Clock::now();
  EpochMetrics m;
  m.epoch = position_.epoch + 1;
  m.lr = epoch_lr(position_.epoch);
  const double samples = std::max(1.0, accumulator_.samples);
  for (double sum : accumulator_.loss_sums) m.per_layer_train_loss.push_back(sum / samples);
  if (net_.classifier) m.classifier_train_loss = accumulator_.classifier_loss_sum / samples;

  // Layer 1 is excluded from best-layer selection.
  EvalReport val = evaluate(net_, data_.val, config_.training.eval_batch_size, config_.training.threads,
                            std::nullopt, std::nullopt);
  m.per_layer_val_acc = val.per_layer_acc;
  m.best_layer = select_best_layer(val.per_layer_acc, 1);
  net_.best_layer = m.best_layer;
  m.strategy_val_acc = net_.spec.strategy == Strategy::best ? val.per_layer_acc[static_cast<std::size_t>(m.best_layer)]
                                                            : *val.top1;
  m.val_seconds = seconds_since(val_start);
  m.train_seconds = epoch_train_seconds_;
  m.wall_seconds = m.train_seconds + m.val_seconds;
  epoch_train_seconds_ = 0.0;

  const bool improved = m.strategy_val_acc > best_val_acc_;
  if (improved) {
    best_val_acc_ = m.strategy_val_acc;
    best_epoch_ = position_.epoch;
  }
  last_val_acc_ = m.strategy_val_acc;
  ++position_.epoch;
  position_.batch = 0;
  accumulator_ = EpochAccumulator{};
  accumulator_.loss_sums.assign(static_cast<std::size_t>(net_.num_layers()), 0.0);
  if (improved) best_net_ = net_;

  if (write_artifacts_) {
    const fs::path dir = out_dir();
    fs::create_directories(dir);
    if (!resumed_ && !logs_opened_) {
      fs::remove(dir / "metrics.jsonl");
      fs::remove(dir / "timing.jsonl");
    }
    logs_opened_ = true;
    append_line(dir / "metrics.jsonl", m.to_json(config_.training.deterministic));
    append_line(dir / "timing.jsonl", Json{{"epoch", m.epoch},
                                          {"train_seconds", m.train_seconds},
                                          {"val_seconds", m.val_seconds},
                                          {"wall_seconds", m.wall_seconds}});
    if (improved) write_checkpoint(dir / "best.ckpt");
    write_checkpoint(dir / "last.ckpt");
    if (config_.output.checkpoint_keep > 0) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch-%04lld.ckpt", static_cast<long long>(m.epoch));
      write_checkpoint(dir / name);
      const Index stale = m.epoch - config_.output.checkpoint_keep;
      if (stale >= 1) {
        std::snprintf(name, sizeof name, "epoch-%04lld.ckpt", static_cast<long long>(stale));
        fs::remove(dir / name);
      }
    }
  }
  history_.push_back(m);
  if (on_epoch_) on_epoch_(m);
}

RunSummary Trainer::run() {
  const auto start = Clock::now();
  train_steps(std::numeric_limits<Index>::max());
  RunSummary summary;
  summary.epochs = history_;
  summary.best_epoch = best_epoch_ + 1;
  summary.best_val_acc = best_val_acc_;
  summary.classifier_params = net_.classifier_param_count();
  if (data_.test.size() > 0) {
    std::optional<Network<float>> chosen = best_net_;
    const fs::path best_path = out_dir() / "best.ckpt";
    if (!chosen && write_artifacts_ && fs::exists(best_path)) chosen = load_checkpoint(best_path).network;
    const Network<float>& net = chosen ? *chosen : net_;
    summary.test = evaluate(net, data_.test, config_.training.eval_batch_size, config_.training.threads);
  }
  summary.wall_seconds = seconds_since(start);
  return summary;
}

Json summary_to_json(const RunSummary& s, bool deterministic) {
  return Json{{"epochs", static_cast<Index>(s.epochs.size())},
              {"best_epoch", s.best_epoch},
              {"best_val_acc", s.best_val_acc},
              {"test", s.test ? s.test->to_json() : Json(nullptr)},
              {"classifier_params", s.classifier_params},
              {"wall_seconds", deterministic ? 0.0 : s.wall_seconds}};
}

RunSummary train(const RunConfig& config, std::function<void(const EpochMetrics&)> progress,
                 const std::optional<fs::path>& resume) {
  const fs::path dir = config.output.dir;
  fs::create_directories(dir);
  write_json_file(to_json(config), dir / "resolved.json");
  PreparedData data = prepare_data(config.dataset, config.training.seed, stats_path_for(config));
  std::optional<Trainer> trainer;
  if (resume) {
    trainer.emplace(config, std::move(data), load_checkpoint(*resume));
  } else {
    trainer.emplace(config, std::move(data));
  }
  if (progress) trainer->on_epoch(std::move(progress));
  RunSummary summary = trainer->run();
  write_json_file(summary_to_json(summary, config.training.deterministic), dir / "summary.json");
  return summary;
}

}  // namespace asge
