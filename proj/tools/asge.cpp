// asge: train / eval / gradcheck / goodness-dump / sweep.
//
// Every failure prints one line "<category>: <message>" to stderr.
// Exit codes: 0 ok, 1 check failed or runtime error, 2 invalid config or usage.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "asge/checkpoint.hpp"
#include "asge/config.hpp"
#include "asge/diagnostics.hpp"
#include "asge/trainer.hpp"

namespace fs = std::filesystem;
using namespace asge;

namespace {

struct CommonFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::string data_dir;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<bool> deterministic;
  std::optional<bool> pipeline;
  std::optional<Index> threads;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required) {
  auto* opt = cmd->add_option("--config", f.config, "run config (JSON)");
  if (config_required) opt->required();
  cmd->add_option("--override", f.overrides, "key.path=value, repeatable")->take_all();
  cmd->add_option("--data-dir", f.data_dir, "root for relative dataset paths (default: $ASGE_DATA_DIR)");
  cmd->add_option("--out-dir", f.out_dir, "output directory");
  cmd->add_option("--seed", f.seed, "root seed");
  cmd->add_flag_callback("--deterministic", [&f] { f.deterministic = true; }, "bit-reproducible mode");
  cmd->add_flag_callback("--no-deterministic", [&f] { f.deterministic = false; }, "report real timings");
  cmd->add_flag_callback("--pipeline", [&f] { f.pipeline = true; }, "layer-pipelined training");
  cmd->add_flag_callback("--no-pipeline", [&f] { f.pipeline = false; }, "sequential training");
  cmd->add_option("--threads", f.threads, "evaluation workers");
}

fs::path data_root(const CommonFlags& f) {
  if (!f.data_dir.empty()) return f.data_dir;
  if (const char* env = std::getenv("ASGE_DATA_DIR"); env && *env) return env;
  return {};
}

RunConfig load_config(const CommonFlags& f, const std::string& path, bool check_paths = true) {
  Json doc = read_json_file(path);
  if (!doc.is_object()) throw ConfigError(path + ": top level must be an object");
  if (f.seed) apply_override(doc, "training.seed=" + std::to_string(*f.seed));
  if (f.deterministic) apply_override(doc, std::string("training.deterministic=") + (*f.deterministic ? "true" : "false"));
  if (f.pipeline) apply_override(doc, std::string("training.pipeline=") + (*f.pipeline ? "true" : "false"));
  if (f.threads) apply_override(doc, "training.threads=" + std::to_string(*f.threads));
  if (!f.out_dir.empty()) doc["output"]["dir"] = f.out_dir;
  for (const auto& o : f.overrides) apply_override(doc, o);
  return parse_config(doc, data_root(f), check_paths);
}

std::string pct(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * x);
  return buf;
}

void print_epoch(const EpochMetrics& m, Index epochs) {
  std::ostringstream layers;
  for (std::size_t i = 0; i < m.per_layer_val_acc.size(); ++i) {
    layers << (i ? " " : "") << pct(m.per_layer_val_acc[i]);
  }
  std::fprintf(stderr, "epoch %lld/%lld lr %.3g val %s best layer %lld [%s] %.1fs\n",
               static_cast<long long>(m.epoch), static_cast<long long>(epochs), m.lr,
               pct(m.strategy_val_acc).c_str(), static_cast<long long>(m.best_layer + 1), layers.str().c_str(),
               m.wall_seconds);
}

int cmd_train(const CommonFlags& f, const std::string& resume) {
  const RunConfig cfg = load_config(f, f.config);
  std::optional<fs::path> from;
  if (!resume.empty()) from = resume;
  const RunSummary s = train(cfg, [&](const EpochMetrics& m) { print_epoch(m, cfg.training.epochs); }, from);
  std::cout << summary_to_json(s, cfg.training.deterministic).dump(2) << '\n';
  return 0;
}

Dataset pick_split(const PreparedData& data, const std::string& split) {
  if (split == "train") return data.train;
  if (split == "val") return data.val;
  if (split == "test") return data.test;
  throw UsageError("unknown split '" + split + "' (train, val, test)");
}

RunConfig config_for_checkpoint(const CommonFlags& f, const fs::path& checkpoint) {
  const std::string path = f.config.empty() ? (checkpoint.parent_path() / "resolved.json").string() : f.config;
  if (!fs::exists(path)) throw UsageError("no --config given and " + path + " does not exist");
  return load_config(f, path);
}

int cmd_eval(const CommonFlags& f, const std::string& checkpoint, const std::string& split,
             const std::string& strategy, const std::string& out) {
  const ArchHash stored = read_checkpoint_hash(checkpoint);
  const RunConfig cfg = config_for_checkpoint(f, checkpoint);
  const ArchHash expected = arch_hash(cfg.arch);
  if (stored != expected) {
    throw FormatError("architecture mismatch: checkpoint " + to_hex(stored) + ", config " + to_hex(expected));
  }
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  std::optional<Strategy> chosen;
  if (!strategy.empty()) chosen = parse_strategy(strategy);
  if (chosen == Strategy::best && !ckpt.network.best_layer) {
    throw UsageError("strategy 'best' needs a recorded best layer; " + checkpoint + " has none");
  }
  const PreparedData data = prepare_data(cfg.dataset, cfg.training.seed, stats_path_for(cfg), split == "test");
  const EvalReport r =
      evaluate(ckpt.network, pick_split(data, split), cfg.training.eval_batch_size, cfg.training.threads, chosen);
  if (r.strategy == Strategy::best && !r.top1) throw UsageError("strategy 'best' needs a recorded best layer");
  Json j = r.to_json();
  j["split"] = split;
  j["checkpoint"] = checkpoint;
  const fs::path target = out.empty() ? fs::path(checkpoint).parent_path() / ("eval_" + split + ".json") : fs::path(out);
  write_json_file(j, target);
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_gradcheck(const CommonFlags& f, const std::string& arch_path, Index batch, std::optional<Index> corrupt,
                  bool zero_input) {
  GradcheckOptions opts;
  if (!arch_path.empty()) opts.spec = arch_from_json(read_json_file(arch_path));
  opts.seed = f.seed.value_or(0);
  opts.batch = batch;
  opts.zero_input = zero_input;
  if (corrupt) {
    if (*corrupt < 1) throw UsageError("--corrupt-layer is 1-based");
    opts.corrupt_layer = *corrupt - 1;
  }
  const GradcheckReport r = gradcheck(opts);
  bool ok = true;
  for (const LayerCheck& l : r.layers) {
    std::printf("layer %lld: %lld params, max rel err weight %.3e bias %.3e, worst %s -> %s\n",
                static_cast<long long>(l.layer + 1), static_cast<long long>(l.parameters), l.max_weight_error,
                l.max_bias_error, l.worst_parameter.c_str(), l.pass ? "pass" : "FAIL");
    ok = ok && l.pass;
  }
  if (!ok) {
    for (const LayerCheck& l : r.layers) {
      if (!l.pass) {
        std::fprintf(stderr, "gradcheck-failed: layer %lld exceeds %.1e at %s (error %.3e)\n",
                     static_cast<long long>(l.layer + 1), r.threshold, l.worst_parameter.c_str(), l.max_error());
      }
    }
    return 1;
  }
  std::printf("gradcheck passed (threshold %.1e)\n", r.threshold);
  return 0;
}

int cmd_goodness_dump(const CommonFlags& f, const std::string& checkpoint, Index layer, Index batch_size,
                      const std::string& split, bool origin_only, const std::string& out) {
  const RunConfig cfg = config_for_checkpoint(f, checkpoint);
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  if (layer < 1 || layer > ckpt.network.num_layers()) {
    throw UsageError("--layer must be in [1, " + std::to_string(ckpt.network.num_layers()) + "]");
  }
  const LayerState<float>& state = ckpt.network.layers[static_cast<std::size_t>(layer - 1)];
  if (!origin_only && !state.spec.pool) {
    throw UsageError("layer " + std::to_string(layer) + " has no pooling; pass --origin-only");
  }
  const PreparedData data = prepare_data(cfg.dataset, cfg.training.seed, stats_path_for(cfg), split == "test");
  const Dataset ds = pick_split(data, split);
  std::vector<std::size_t> idx;
  for (Index i = 0; i < std::min(batch_size, ds.size()); ++i) idx.push_back(static_cast<std::size_t>(i));
  const Batch batch = gather(ds, idx);
  if (out.empty()) {
    goodness_dump(ckpt.network, batch.images, layer - 1, !origin_only, std::cout);
  } else {
    std::ofstream file(out);
    if (!file) throw IoError("cannot write " + out);
    goodness_dump(ckpt.network, batch.images, layer - 1, !origin_only, file);
  }
  return 0;
}

int cmd_sweep(const CommonFlags& f, const std::string& param, std::vector<std::string> values) {
  if (param != "alpha" && param != "pooling" && param != "strategy") {
    throw UsageError("unknown sweep parameter '" + param + "' (alpha, pooling, strategy)");
  }
  if (values.empty()) {
    if (param == "alpha") values = {"0", "0.5", "1", "1.5", "2"};
    if (param == "pooling") values = {"rms", "avg", "max"};
    if (param == "strategy") values = {"last", "fusion", "best"};
  }
  const RunConfig base = load_config(f, f.config);
  const fs::path root = base.output.dir;
  fs::create_directories(root);
  const fs::path csv_path = root / ("sweep_" + param + ".csv");
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  csv << "value,test_acc,wall_seconds";
  if (param == "strategy") csv << ",classifier_params";
  csv << '\n';
  for (const std::string& v : values) {
    RunConfig cfg = base;
    if (param == "alpha") {
      try {
        std::size_t used = 0;
        cfg.arch.alpha = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
      } catch (const std::logic_error&) {
        throw UsageError("alpha value '" + v + "' is not a number");
      }
    } else if (param == "pooling") {
      const PoolKind kind = parse_pool_kind(v);
      for (auto& layer : cfg.arch.layers) {
        if (layer.pool) layer.pool->kind = kind;
      }
    } else {
      cfg.arch.strategy = parse_strategy(v);
    }
    trace_geometry(cfg.arch);
    cfg.output.dir = (root / (param + "-" + v)).string();
    std::fprintf(stderr, "sweep %s=%s -> %s\n", param.c_str(), v.c_str(), cfg.output.dir.c_str());
    const RunSummary s = train(cfg, [&](const EpochMetrics& m) { print_epoch(m, cfg.training.epochs); });
    csv << v << ',' << (s.test && s.test->top1 ? *s.test->top1 : 0.0) << ',' << s.wall_seconds;
    if (param == "strategy") csv << ',' << s.classifier_params;
    csv << '\n' << std::flush;
  }
  std::cout << csv_path.string() << '\n';
  return 0;
}

int exit_code_for(const std::string& category) {
  return category == "config-error" || category == "usage-error" ? 2 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"layer-local convolutional training with spatial goodness"};
  app.require_subcommand(1);

  CommonFlags train_f, eval_f, grad_f, dump_f, sweep_f;
  std::string resume;
  auto* train_cmd = app.add_subcommand("train", "train from a config");
  add_common(train_cmd, train_f, true);
  train_cmd->add_option("--resume", resume, "continue from a checkpoint");

  std::string eval_ckpt, eval_split = "test", eval_strategy, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, eval_f, false);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--split", eval_split, "train, val or test");
  eval_cmd->add_option("--strategy", eval_strategy, "last, fusion or best (default: the network's)");
  eval_cmd->add_option("--out", eval_out, "report path (default: eval_<split>.json next to the checkpoint)");

  std::string grad_arch;
  Index grad_batch = 4;
  std::optional<Index> corrupt;
  bool zero_input = false;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of the local gradients");
  add_common(grad_cmd, grad_f, false);
  grad_cmd->add_option("--arch", grad_arch, "arch JSON (default: 2 layers, 4 and 8 channels, 8x8 input)");
  grad_cmd->add_option("--batch", grad_batch, "samples");
  grad_cmd->add_option("--corrupt-layer", corrupt, "test hook: perturb the gradient of this layer (1-based)");
  grad_cmd->add_flag("--zero-input", zero_input, "all-zero inputs and biases");

  std::string dump_ckpt, dump_split = "test", dump_out;
  Index dump_layer = 0, dump_batch = 64;
  bool origin_only = false;
  auto* dump_cmd = app.add_subcommand("goodness-dump", "CSV of goodness values before and after pooling");
  add_common(dump_cmd, dump_f, false);
  dump_cmd->add_option("--checkpoint", dump_ckpt, "checkpoint file")->required();
  dump_cmd->add_option("--layer", dump_layer, "layer (1-based)")->required();
  dump_cmd->add_option("--batch-size", dump_batch, "samples taken from the start of the split");
  dump_cmd->add_option("--split", dump_split, "train, val or test");
  dump_cmd->add_flag("--origin-only", origin_only, "skip the pooled variants");
  dump_cmd->add_option("--out", dump_out, "CSV path (default: stdout)");

  std::string sweep_param;
  std::vector<std::string> sweep_values;
  auto* sweep_cmd = app.add_subcommand("sweep", "one training per value, CSV summary");
  add_common(sweep_cmd, sweep_f, true);
  sweep_cmd->add_option("--param", sweep_param, "alpha, pooling or strategy")->required();
  sweep_cmd->add_option("--values", sweep_values, "values (comma separated)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "usage-error: %s\n", e.what());
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(train_f, resume);
    if (*eval_cmd) return cmd_eval(eval_f, eval_ckpt, eval_split, eval_strategy, eval_out);
    if (*grad_cmd) return cmd_gradcheck(grad_f, grad_arch, grad_batch, corrupt, zero_input);
    if (*dump_cmd) return cmd_goodness_dump(dump_f, dump_ckpt, dump_layer, dump_batch, dump_split, origin_only, dump_out);
    if (*sweep_cmd) return cmd_sweep(sweep_f, sweep_param, sweep_values);
  } catch (const Error& e) {
    std::fprintf(stderr, "%s: %s\n", e.category().c_str(), e.what());
    return exit_code_for(e.category());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal-error: %s\n", e.what());
    return 1;
  }
  return 0;
}
