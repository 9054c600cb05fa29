#include "asge/config.hpp"

#include <fstream>
#include <set>

namespace asge {

namespace fs = std::filesystem;

namespace {

// Walks one JSON object, handing out typed fields and remembering which keys
// were consumed so leftovers can be reported.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw FieldError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!has(key)) return;
    const Json& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw FieldError(field(key), "expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw FieldError(field(key), "expected an integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw FieldError(field(key), "expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw FieldError(field(key), "expected a string");
      }
      out = v.get<T>();
    } catch (const Json::exception& e) {
      throw FieldError(field(key), e.what());
    }
  }

  Section sub(const std::string& key) { return Section(raw(key), field(key)); }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw FieldError(field(key), "unknown key");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

Json pool_to_json(const std::optional<PoolSpec>& pool) {
  if (!pool) return nullptr;
  return Json{{"kind", to_string(pool->kind)},
              {"window", pool->window},
              {"stride", pool->stride},
              {"strict", pool->strict}};
}

PoolSpec pool_from_json(Section s) {
  PoolSpec p;
  std::string kind = to_string(p.kind);
  s.get("kind", kind);
  try {
    p.kind = parse_pool_kind(kind);
  } catch (const ConfigError& e) {
    throw FieldError(s.field("kind"), e.what());
  }
  s.get("window", p.window);
  s.get("stride", p.stride);
  s.get("strict", p.strict);
  if (p.window < 1 || p.stride < 1) throw FieldError(s.field("window"), "window and stride must be >= 1");
  s.finish();
  return p;
}

LayerSpec layer_from_json(Section s) {
  LayerSpec layer;
  s.get("out_channels", layer.out_channels);
  s.get("kernel", layer.kernel);
  s.get("stride", layer.stride);
  s.get("padding", layer.padding);
  if (s.has("pool")) {
    if (s.raw("pool").is_string()) {
      PoolSpec p;
      p.kind = parse_pool_kind(s.raw("pool").get<std::string>());
      layer.pool = p;
    } else {
      layer.pool = pool_from_json(s.sub("pool"));
    }
  }
  if (s.has("norm")) {
    Section n = s.sub("norm");
    n.get("epsilon", layer.norm.epsilon);
    n.finish();
  }
  if (layer.out_channels < 1) throw FieldError(s.field("out_channels"), "must be >= 1");
  if (layer.kernel < 1 || layer.kernel % 2 == 0) throw FieldError(s.field("kernel"), "must be odd and >= 1");
  if (layer.stride < 1) throw FieldError(s.field("stride"), "must be >= 1");
  if (layer.padding < 0) throw FieldError(s.field("padding"), "must be >= 0");
  if (!(layer.norm.epsilon > 0.0)) throw FieldError(s.field("norm.epsilon"), "must be > 0");
  s.finish();
  return layer;
}

ArchSpec arch_from_section(Section s, ArchSpec spec) {
  s.get("in_channels", spec.in_channels);
  s.get("in_height", spec.in_height);
  s.get("in_width", spec.in_width);
  s.get("n_classes", spec.n_classes);
  s.get("alpha", spec.alpha);
  std::string strategy = to_string(spec.strategy);
  s.get("strategy", strategy);
  try {
    spec.strategy = parse_strategy(strategy);
  } catch (const ConfigError& e) {
    throw FieldError(s.field("strategy"), e.what());
  }
  if (s.has("layers")) {
    const Json& layers = s.raw("layers");
    if (!layers.is_array()) throw FieldError(s.field("layers"), "expected an array");
    spec.layers.clear();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      spec.layers.push_back(layer_from_json(Section(layers[i], s.field("layers") + "[" + std::to_string(i) + "]")));
    }
  }
  if (spec.alpha < 0.0) throw FieldError(s.field("alpha"), "must be >= 0");
  if (spec.n_classes < 2) throw FieldError(s.field("n_classes"), "must be >= 2");
  if (spec.layers.size() < 2) throw FieldError(s.field("layers"), "need at least 2 conv layers");
  s.finish();
  try {
    trace_geometry(spec);
  } catch (const ConfigError& e) {
    throw FieldError(s.field("layers"), e.what());
  }
  return spec;
}

std::string resolve_path(const std::string& p, const fs::path& data_dir) {
  if (p.empty()) return p;
  fs::path path(p);
  if (path.is_relative() && !data_dir.empty()) path = data_dir / path;
  return path.lexically_normal().string();
}

void require_file(const std::string& field, const std::string& path) {
  if (path.empty()) throw FieldError(field, "required dataset path is missing");
  if (!fs::exists(path)) throw FieldError(field, "file not found: " + path);
}

}  // namespace

Json arch_to_json(const ArchSpec& spec) {
  Json layers = Json::array();
  for (const LayerSpec& l : spec.layers) {
    layers.push_back(Json{{"out_channels", l.out_channels},
                          {"kernel", l.kernel},
                          {"stride", l.stride},
                          {"padding", l.padding},
                          {"pool", pool_to_json(l.pool)},
                          {"norm", Json{{"epsilon", l.norm.epsilon}}}});
  }
  return Json{{"in_channels", spec.in_channels}, {"in_height", spec.in_height}, {"in_width", spec.in_width},
              {"n_classes", spec.n_classes},     {"alpha", spec.alpha},         {"strategy", to_string(spec.strategy)},
              {"layers", layers}};
}

ArchSpec arch_from_json(const Json& j) { return arch_from_section(Section(j, "arch"), ArchSpec{}); }

ArchSpec default_arch(const std::string& name) {
  if (name == "mnist" || name == "fashion-mnist") {
    ArchSpec spec = vgg8_spec(1, 28, 28, 10);
    // 28 -> 14 -> 7: the final 7x7 map cannot be tiled by 2x2 windows, and
    // nothing consumes the last layer's pooled output.
    spec.layers.back().pool.reset();
    return spec;
  }
  if (name == "cifar10") return vgg8_spec(3, 32, 32, 10);
  if (name == "cifar100") return vgg8_spec(3, 32, 32, 100);
  throw FieldError("dataset.name", "unknown dataset '" + name + "' (mnist, fashion-mnist, cifar10, cifar100)");
}

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' must look like key.path=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::exception&) {
    value = text;
  }
  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) *node = Json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

RunConfig parse_config(const Json& doc, const fs::path& data_dir, bool check_paths) {
  RunConfig cfg;
  Section root(doc, "");

  // dataset
  {
    if (!root.has("dataset")) throw FieldError("dataset", "section is required");
    Section s = root.sub("dataset");
    DatasetConfig& d = cfg.dataset;
    s.get("name", d.name);
    cfg.arch = default_arch(d.name);
    if (d.name == "cifar10" || d.name == "cifar100") d.augmentation = AugmentationPolicy{4, 0.5};
    s.get("train_images", d.train_images);
    s.get("train_labels", d.train_labels);
    s.get("test_images", d.test_images);
    s.get("test_labels", d.test_labels);
    s.get("train_batches", d.train_batches);
    s.get("test_batches", d.test_batches);
    s.get("val_count", d.val_count);
    s.get("limit_train", d.limit_train);
    s.get("limit_test", d.limit_test);
    s.get("normalize", d.normalize);
    s.get("stats_cache", d.stats_cache);
    if (s.has("augmentation")) {
      Section a = s.sub("augmentation");
      a.get("pad_crop", d.augmentation.pad_crop);
      a.get("flip_prob", d.augmentation.flip_prob);
      a.finish();
    }
    if (d.val_count < 0) d.val_count = d.is_idx() ? 10000 : 5000;
    if (d.augmentation.pad_crop < 0) throw FieldError("dataset.augmentation.pad_crop", "must be >= 0");
    if (d.augmentation.flip_prob < 0.0 || d.augmentation.flip_prob > 1.0) {
      throw FieldError("dataset.augmentation.flip_prob", "must be in [0, 1]");
    }
    if (d.limit_train < 0 || d.limit_test < 0) throw FieldError("dataset.limit_train", "must be >= 0");
    d.train_images = resolve_path(d.train_images, data_dir);
    d.train_labels = resolve_path(d.train_labels, data_dir);
    d.test_images = resolve_path(d.test_images, data_dir);
    d.test_labels = resolve_path(d.test_labels, data_dir);
    for (auto& p : d.train_batches) p = resolve_path(p, data_dir);
    for (auto& p : d.test_batches) p = resolve_path(p, data_dir);
    if (check_paths) {
      if (d.is_idx()) {
        require_file("dataset.train_images", d.train_images);
        require_file("dataset.train_labels", d.train_labels);
        require_file("dataset.test_images", d.test_images);
        require_file("dataset.test_labels", d.test_labels);
      } else {
        if (d.train_batches.empty()) throw FieldError("dataset.train_batches", "required dataset path is missing");
        if (d.test_batches.empty()) throw FieldError("dataset.test_batches", "required dataset path is missing");
        for (std::size_t i = 0; i < d.train_batches.size(); ++i) {
          require_file("dataset.train_batches[" + std::to_string(i) + "]", d.train_batches[i]);
        }
        for (std::size_t i = 0; i < d.test_batches.size(); ++i) {
          require_file("dataset.test_batches[" + std::to_string(i) + "]", d.test_batches[i]);
        }
      }
    }
    s.finish();
  }

  if (root.has("arch")) cfg.arch = arch_from_section(root.sub("arch"), cfg.arch);

  if (root.has("training")) {
    Section s = root.sub("training");
    TrainingConfig& t = cfg.training;
    std::string optimizer = to_string(t.optimizer.kind);
    s.get("optimizer", optimizer);
    try {
      t.optimizer.kind = parse_optimizer_kind(optimizer);
    } catch (const ConfigError& e) {
      throw FieldError("training.optimizer", e.what());
    }
    if (t.optimizer.kind == OptimizerKind::sgd_momentum) t.optimizer.weight_decay = 1e-4;
    s.get("weight_decay", t.optimizer.weight_decay);
    s.get("beta1", t.optimizer.beta1);
    s.get("beta2", t.optimizer.beta2);
    s.get("epsilon", t.optimizer.epsilon);
    s.get("momentum", t.optimizer.momentum);
    s.get("lr_max", t.lr_max);
    s.get("lr_min", t.lr_min);
    std::string schedule = "cosine_per_epoch";
    s.get("schedule", schedule);
    if (schedule != "cosine_per_epoch") throw FieldError("training.schedule", "only cosine_per_epoch is supported");
    s.get("batch_size", t.batch_size);
    s.get("epochs", t.epochs);
    s.get("seed", t.seed);
    s.get("deterministic", t.deterministic);
    s.get("pipeline", t.pipeline);
    s.get("queue_depth", t.queue_depth);
    s.get("threads", t.threads);
    s.get("eval_batch_size", t.eval_batch_size);
    if (!(t.lr_max > 0.0) || !(t.lr_min > 0.0) || t.lr_min > t.lr_max) {
      throw FieldError("training.lr_min", "need 0 < lr_min <= lr_max");
    }
    if (t.batch_size < 1) throw FieldError("training.batch_size", "must be >= 1");
    if (t.epochs < 1) throw FieldError("training.epochs", "must be >= 1");
    if (t.queue_depth < 1) throw FieldError("training.queue_depth", "must be >= 1");
    if (t.threads < 1) throw FieldError("training.threads", "must be >= 1");
    if (t.eval_batch_size < 1) throw FieldError("training.eval_batch_size", "must be >= 1");
    if (t.optimizer.weight_decay < 0.0) throw FieldError("training.weight_decay", "must be >= 0");
    s.finish();
  }

  if (root.has("output")) {
    Section s = root.sub("output");
    s.get("dir", cfg.output.dir);
    s.get("checkpoint_keep", cfg.output.checkpoint_keep);
    if (cfg.output.dir.empty()) throw FieldError("output.dir", "must not be empty");
    if (cfg.output.checkpoint_keep < 0) throw FieldError("output.checkpoint_keep", "must be >= 0");
    s.finish();
  }
  root.finish();
  return cfg;
}

Json to_json(const RunConfig& c) {
  const DatasetConfig& d = c.dataset;
  const TrainingConfig& t = c.training;
  Json dataset{{"name", d.name},
               {"val_count", d.val_count},
               {"limit_train", d.limit_train},
               {"limit_test", d.limit_test},
               {"normalize", d.normalize},
               {"stats_cache", d.stats_cache},
               {"augmentation", Json{{"pad_crop", d.augmentation.pad_crop}, {"flip_prob", d.augmentation.flip_prob}}}};
  if (d.is_idx()) {
    dataset["train_images"] = d.train_images;
    dataset["train_labels"] = d.train_labels;
    dataset["test_images"] = d.test_images;
    dataset["test_labels"] = d.test_labels;
  } else {
    dataset["train_batches"] = d.train_batches;
    dataset["test_batches"] = d.test_batches;
  }
  Json training{{"optimizer", to_string(t.optimizer.kind)},
                {"weight_decay", t.optimizer.weight_decay},
                {"beta1", t.optimizer.beta1},
                {"beta2", t.optimizer.beta2},
                {"epsilon", t.optimizer.epsilon},
                {"momentum", t.optimizer.momentum},
                {"lr_max", t.lr_max},
                {"lr_min", t.lr_min},
                {"schedule", "cosine_per_epoch"},
                {"batch_size", t.batch_size},
                {"epochs", t.epochs},
                {"seed", t.seed},
                {"deterministic", t.deterministic},
                {"pipeline", t.pipeline},
                {"queue_depth", t.queue_depth},
                {"threads", t.threads},
                {"eval_batch_size", t.eval_batch_size}};
  return Json{{"dataset", dataset},
              {"arch", arch_to_json(c.arch)},
              {"training", training},
              {"output", Json{{"dir", c.output.dir}, {"checkpoint_keep", c.output.checkpoint_keep}}}};
}

Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json_file(const Json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace asge
