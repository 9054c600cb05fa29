#pragma once

// The layer stack, its optional strategy classifier, and the three ways of
// turning it into a prediction:
//   last   - linear classifier on GAP of the final conv layer
//   fusion - linear classifier on concatenated GAP of layers 2..L
//   best   - frozen-projection logits of the best validation layer, exiting
//            early after that layer.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "asge/layer_step.hpp"
#include "asge/rng.hpp"

namespace asge {

enum class Strategy { last, fusion, best };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::last: return "last";
    case Strategy::fusion: return "fusion";
    case Strategy::best: return "best";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& name) {
  if (name == "last") return Strategy::last;
  if (name == "fusion") return Strategy::fusion;
  if (name == "best") return Strategy::best;
  throw ConfigError("unknown strategy '" + name + "' (expected last, fusion or best)");
}

struct ArchSpec {
  Index in_channels = 1;
  Index in_height = 28;
  Index in_width = 28;
  std::vector<LayerSpec> layers;
  Index n_classes = 10;
  double alpha = 1.0;
  Strategy strategy = Strategy::fusion;

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

// 7 conv layers 3x3/s1/p1, channels 128,128,256,256,512,512,512, 2x2 pooling
// after layers 2, 4 and 7.
inline ArchSpec vgg8_spec(Index in_channels = 3, Index height = 32, Index width = 32,
                          Index n_classes = 10) {
  ArchSpec spec;
  spec.in_channels = in_channels;
  spec.in_height = height;
  spec.in_width = width;
  spec.n_classes = n_classes;
  const Index channels[] = {128, 128, 256, 256, 512, 512, 512};
  for (int i = 0; i < 7; ++i) {
    LayerSpec layer;
    layer.out_channels = channels[i];
    if (i == 1 || i == 3 || i == 6) layer.pool = PoolSpec{};
    spec.layers.push_back(layer);
  }
  return spec;
}

// Layers actually built. Best-layer prediction has no classifier, so its
// final layer becomes a copy of the one before it.
inline std::vector<LayerSpec> effective_layers(const ArchSpec& spec) {
  std::vector<LayerSpec> layers = spec.layers;
  if (spec.strategy == Strategy::best && layers.size() >= 2) layers.back() = layers[layers.size() - 2];
  return layers;
}

struct LayerGeometry {
  Index in_channels, in_height, in_width;
  Index out_channels, out_height, out_width;  // conv output
  Index next_height, next_width;              // after optional pooling
  PartitionPlan plan;
};

inline std::vector<LayerGeometry> trace_geometry(const ArchSpec& spec) {
  const std::vector<LayerSpec> layers = effective_layers(spec);
  if (layers.size() < 2) {
    throw ConfigError("architecture needs at least 2 conv layers, got " + std::to_string(layers.size()));
  }
  if (spec.n_classes < 2) throw ConfigError("n_classes must be >= 2");
  if (spec.alpha < 0.0) throw ConfigError("alpha must be >= 0");
  const Index final_channels = layers.back().out_channels;
  std::vector<LayerGeometry> out;
  Index c = spec.in_channels, h = spec.in_height, w = spec.in_width;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& layer = layers[i];
    const std::string where = "layer " + std::to_string(i + 1) + ": ";
    try {
      if (layer.out_channels < 1) throw ConfigError("out_channels must be >= 1");
      if (layer.kernel < 1 || layer.kernel % 2 == 0) throw ConfigError("kernel must be odd");
      if (layer.stride < 1 || layer.padding < 0) throw ConfigError("bad stride/padding");
      const Index span_h = h + 2 * layer.padding - layer.kernel;
      const Index span_w = w + 2 * layer.padding - layer.kernel;
      if (span_h < 0 || span_w < 0) throw ConfigError("kernel larger than padded input");
      LayerGeometry g{};
      g.in_channels = c;
      g.in_height = h;
      g.in_width = w;
      g.out_channels = layer.out_channels;
      g.out_height = span_h / layer.stride + 1;
      g.out_width = span_w / layer.stride + 1;
      const Index patches = partition_factor(spec.alpha, layer.out_channels, final_channels,
                                             g.out_height, g.out_width);
      g.plan = make_plan(layer.out_channels, g.out_height, g.out_width, patches);
      g.next_height = g.out_height;
      g.next_width = g.out_width;
      if (layer.pool) {
        g.next_height = pooled_extent(g.out_height, *layer.pool);
        g.next_width = pooled_extent(g.out_width, *layer.pool);
      }
      if (!(layer.norm.epsilon > 0.0)) throw ConfigError("norm epsilon must be > 0");
      out.push_back(g);
      c = g.out_channels;
      h = g.next_height;
      w = g.next_width;
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return out;
}

inline Index classifier_input_dim(const ArchSpec& spec) {
  const std::vector<LayerSpec> layers = effective_layers(spec);
  switch (spec.strategy) {
    case Strategy::last: return layers.back().out_channels;
    case Strategy::fusion: {
      Index d = 0;
      for (std::size_t i = 1; i < layers.size(); ++i) d += layers[i].out_channels;
      return d;
    }
    case Strategy::best: return 0;
  }
  return 0;
}

template <typename Scalar>
struct LinearClassifier {
  Tensor<Scalar> weights;  // [D, N]
  Tensor<Scalar> bias;     // [N]
  ParamState<Scalar> weight_state;
  ParamState<Scalar> bias_state;

  Index input_dim() const { return weights.dim(0); }
  Index param_count() const { return weights.size() + bias.size(); }

  Tensor<Scalar> scores(const Tensor<Scalar>& features) const {
    const Index batch = features.dim(0);
    const Index n = weights.dim(1);
    if (features.rank() != 2 || features.dim(1) != input_dim()) {
      throw ConfigError("classifier expects [B," + std::to_string(input_dim()) + "] features, got " +
                        shape_str(features.shape()));
    }
    Tensor<Scalar> out({batch, n});
    auto m = out.matrix(batch, n);
    m.noalias() = features.matrix(batch, input_dim()) * weights.matrix(input_dim(), n);
    m.rowwise() += bias.values().transpose();
    return out;
  }
};

template <typename Scalar>
struct Network {
  ArchSpec spec;
  std::uint64_t seed = 0;
  std::vector<LayerState<Scalar>> layers;
  std::optional<LinearClassifier<Scalar>> classifier;
  std::optional<Index> best_layer;  // 0-based

  Index num_layers() const { return static_cast<Index>(layers.size()); }
  Index classifier_param_count() const { return classifier ? classifier->param_count() : 0; }
};

template <typename Scalar>
Network<Scalar> build_network(const ArchSpec& spec, std::uint64_t seed) {
  const std::vector<LayerGeometry> geometry = trace_geometry(spec);
  const std::vector<LayerSpec> layers = effective_layers(spec);
  Network<Scalar> net;
  net.spec = spec;
  net.seed = seed;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& layer = layers[i];
    const LayerGeometry& g = geometry[i];
    ConvParams<Scalar> params;
    params.weights = Tensor<Scalar>({layer.out_channels, g.in_channels, layer.kernel, layer.kernel});
    params.bias = Tensor<Scalar>({layer.out_channels});
    params.stride = layer.stride;
    params.padding = layer.padding;
    const double fan_in = static_cast<double>(g.in_channels * layer.kernel * layer.kernel);
    Rng init(derive_seed(seed, "init", i));
    const double stddev = std::sqrt(2.0 / fan_in);
    for (Index k = 0; k < params.weights.size(); ++k) {
      params.weights[k] = static_cast<Scalar>(init.normal(0.0, stddev));
    }
    ProjectionHead<Scalar> head(derive_seed(seed, "projection", i), g.plan.goodness_dim(), spec.n_classes);
    LayerState<Scalar> state{layer,
                             params,
                             std::move(head),
                             g.plan,
                             ParamState<Scalar>::zeros_like(params.weights),
                             ParamState<Scalar>::zeros_like(params.bias)};
    net.layers.push_back(std::move(state));
  }
  if (spec.strategy != Strategy::best) {
    const Index d = classifier_input_dim(spec);
    LinearClassifier<Scalar> clf;
    clf.weights = Tensor<Scalar>({d, spec.n_classes});
    clf.bias = Tensor<Scalar>({spec.n_classes});
    clf.weight_state = ParamState<Scalar>::zeros_like(clf.weights);
    clf.bias_state = ParamState<Scalar>::zeros_like(clf.bias);
    net.classifier = std::move(clf);
  }
  return net;
}

template <typename Scalar>
Tensor<Scalar> concat_columns(std::span<const Tensor<Scalar>> parts) {
  const Index batch = parts.front().dim(0);
  Index total = 0;
  for (const auto& p : parts) total += p.dim(1);
  Tensor<Scalar> out({batch, total});
  auto dst = out.matrix(batch, total);
  Index col = 0;
  for (const auto& p : parts) {
    dst.middleCols(col, p.dim(1)) = p.matrix(batch, p.dim(1));
    col += p.dim(1);
  }
  return out;
}

// Builds the classifier input from per-layer GAP features (one per layer).
template <typename Scalar>
Tensor<Scalar> classifier_features(Strategy strategy, std::span<const Tensor<Scalar>> gaps) {
  if (strategy == Strategy::last) return gaps.back();
  if (strategy == Strategy::fusion) return concat_columns(gaps.subspan(1));
  throw UsageError("best-layer prediction has no classifier");
}

template <typename Scalar>
Scalar classifier_step(LinearClassifier<Scalar>& clf, const Tensor<Scalar>& features,
                       std::span<const int> targets, double lr, const OptimizerConfig& cfg) {
  const Tensor<Scalar> scores = clf.scores(features);
  LossResult<Scalar> ce = softmax_cross_entropy(scores, targets);
  const Index batch = features.dim(0);
  const Index n = clf.weights.dim(1);
  Tensor<Scalar> dw(clf.weights.shape());
  dw.matrix(clf.input_dim(), n).noalias() =
      features.matrix(batch, clf.input_dim()).transpose() * ce.grad.matrix(batch, n);
  Tensor<Scalar> db(clf.bias.shape());
  db.values() = ce.grad.matrix(batch, n).colwise().sum().transpose();
  optimizer_step(clf.weights, dw, clf.weight_state, lr, cfg);
  optimizer_step(clf.bias, db, clf.bias_state, lr, cfg);
  return ce.loss;
}

inline double accuracy(std::span<const int> predicted, std::span<const int> targets) {
  if (predicted.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == targets[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

template <typename Scalar>
struct TrainReport {
  std::vector<Scalar> layer_loss;
  std::vector<double> layer_accuracy;  // batch accuracy of frozen-projection logits
  std::optional<Scalar> classifier_loss;
};

// One sequential training step over the whole stack.
template <typename Scalar>
TrainReport<Scalar> forward_train(Network<Scalar>& net, const Tensor<Scalar>& batch,
                                  std::span<const int> targets, double lr, const OptimizerConfig& cfg) {
  TrainReport<Scalar> report;
  std::vector<Tensor<Scalar>> gaps;
  Tensor<Scalar> x = batch;
  for (auto& layer : net.layers) {
    LayerOutput<Scalar> out = asge_layer_step(x, layer, targets, lr, cfg);
    report.layer_loss.push_back(out.loss);
    report.layer_accuracy.push_back(accuracy(argmax_rows(out.logits), targets));
    gaps.push_back(std::move(out.gap));
    x = std::move(out.output);
  }
  if (net.classifier) {
    const Tensor<Scalar> features =
        classifier_features<Scalar>(net.spec.strategy, std::span<const Tensor<Scalar>>(gaps));
    report.classifier_loss = classifier_step(*net.classifier, features, targets, lr, cfg);
  }
  return report;
}

// Per-layer gradients for one batch without touching any parameters.
template <typename Scalar>
std::vector<LocalGradient<Scalar>> layer_gradients(const Network<Scalar>& net, const Tensor<Scalar>& batch,
                                                   std::span<const int> targets) {
  std::vector<LocalGradient<Scalar>> grads;
  Tensor<Scalar> x = batch;
  for (const auto& layer : net.layers) {
    LocalGradient<Scalar> g = layer_gradient(x, layer, targets);
    x = forward_transform(g.activations, layer.spec);
    grads.push_back(std::move(g));
  }
  return grads;
}

struct InferenceStats {
  Index layers_executed = 0;
};

template <typename Scalar>
struct InferenceResult {
  std::vector<Tensor<Scalar>> layer_logits;  // one per executed layer
  Tensor<Scalar> scores;                     // strategy scores, empty when not computed
};

// Runs layers [0, stop_after] and, when the whole stack ran and a classifier
// exists, the classifier.
template <typename Scalar>
InferenceResult<Scalar> infer(const Network<Scalar>& net, const Tensor<Scalar>& batch,
                              std::optional<Index> stop_after = std::nullopt,
                              InferenceStats* stats = nullptr) {
  const Index last = stop_after.value_or(net.num_layers() - 1);
  if (last < 0 || last >= net.num_layers()) throw UsageError("stop layer out of range");
  InferenceResult<Scalar> result;
  std::vector<Tensor<Scalar>> gaps;
  Tensor<Scalar> x = batch;
  for (Index i = 0; i <= last; ++i) {
    LayerOutput<Scalar> out = layer_infer(x, net.layers[static_cast<std::size_t>(i)]);
    if (stats) ++stats->layers_executed;
    result.layer_logits.push_back(std::move(out.logits));
    gaps.push_back(std::move(out.gap));
    if (i < last) x = std::move(out.output);
  }
  if (net.classifier && last == net.num_layers() - 1) {
    result.scores = net.classifier->scores(
        classifier_features<Scalar>(net.spec.strategy, std::span<const Tensor<Scalar>>(gaps)));
  }
  return result;
}

template <typename Scalar>
std::vector<int> predict_last(const Network<Scalar>& net, const Tensor<Scalar>& batch) {
  if (net.spec.strategy != Strategy::last || !net.classifier) {
    throw UsageError("predict_last needs a network built with strategy 'last'");
  }
  return argmax_rows(infer(net, batch).scores);
}

template <typename Scalar>
std::vector<int> predict_fusion(const Network<Scalar>& net, const Tensor<Scalar>& batch) {
  if (net.spec.strategy != Strategy::fusion || !net.classifier) {
    throw UsageError("predict_fusion needs a network built with strategy 'fusion'");
  }
  return argmax_rows(infer(net, batch).scores);
}

template <typename Scalar>
std::vector<int> predict_best(const Network<Scalar>& net, const Tensor<Scalar>& batch,
                              std::optional<Index> best_layer = std::nullopt,
                              InferenceStats* stats = nullptr) {
  if (net.spec.strategy != Strategy::best) {
    throw UsageError("predict_best needs a network built with strategy 'best'");
  }
  const std::optional<Index> layer = best_layer ? best_layer : net.best_layer;
  if (!layer) throw UsageError("no best layer recorded; run validation first");
  InferenceResult<Scalar> r = infer(net, batch, layer, stats);
  return argmax_rows(r.layer_logits.back());
}

template <typename Scalar>
std::vector<int> predict(const Network<Scalar>& net, const Tensor<Scalar>& batch) {
  switch (net.spec.strategy) {
    case Strategy::last: return predict_last(net, batch);
    case Strategy::fusion: return predict_fusion(net, batch);
    case Strategy::best: return predict_best(net, batch);
  }
  throw UsageError("bad strategy");
}

// Argmax over accuracies[first_candidate..], ties to the shallower layer.
inline Index select_best_layer(std::span<const double> accuracies, Index first_candidate = 0) {
  if (accuracies.empty()) throw UsageError("select_best_layer needs at least one layer");
  const Index n = static_cast<Index>(accuracies.size());
  Index start = first_candidate < n ? first_candidate : 0;
  Index best = start;
  for (Index i = start + 1; i < n; ++i) {
    if (accuracies[static_cast<std::size_t>(i)] > accuracies[static_cast<std::size_t>(best)]) best = i;
  }
  return best;
}

}  // namespace asge
