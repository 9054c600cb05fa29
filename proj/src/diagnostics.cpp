#include "asge/diagnostics.hpp"

#include <cmath>

namespace asge {

ArchSpec gradcheck_spec() {
  ArchSpec spec;
  spec.in_channels = 3;
  spec.in_height = 8;
  spec.in_width = 8;
  spec.n_classes = 10;
  spec.alpha = 1.0;
  spec.strategy = Strategy::last;
  LayerSpec a;
  a.out_channels = 4;
  a.pool = PoolSpec{};
  LayerSpec b;
  b.out_channels = 8;
  spec.layers = {a, b};
  return spec;
}

bool GradcheckReport::pass() const {
  for (const auto& l : layers) {
    if (!l.pass) return false;
  }
  return true;
}

double gradient_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < 1e-8) return 0.0;
  return std::abs(analytic - numeric) / scale;
}

namespace {

double local_loss(const Tensor<double>& input, const ConvParams<double>& params, const LayerState<double>& layer,
                  std::span<const int> targets) {
  const Tensor<double> act = relu(conv2d_forward(input, params)).output;
  return local_ce_loss(project(layer.head, spatial_goodness(act, layer.plan)), targets).loss;
}

double numeric_derivative(const Tensor<double>& input, const LayerState<double>& layer, std::span<const int> targets,
                          bool bias, Index k, double h) {
  ConvParams<double> p = layer.params;
  Tensor<double>& t = bias ? p.bias : p.weights;
  const double theta = t[k];
  auto central = [&](double step) {
    t[k] = theta + step;
    const double up = local_loss(input, p, layer, targets);
    t[k] = theta - step;
    const double down = local_loss(input, p, layer, targets);
    t[k] = theta;
    return (up - down) / (2.0 * step);
  };
  return 2.0 * central(h / 2.0) - central(h);
}

std::string weight_name(const Shape& s, Index k) {
  const Index kw = k % s[3];
  const Index kh = (k / s[3]) % s[2];
  const Index ci = (k / (s[3] * s[2])) % s[1];
  const Index co = k / (s[3] * s[2] * s[1]);
  return "weight[" + std::to_string(co) + "," + std::to_string(ci) + "," + std::to_string(kh) + "," +
         std::to_string(kw) + "]";
}

}  // namespace

GradcheckReport gradcheck(const GradcheckOptions& options) {
  const std::vector<LayerGeometry> geometry = trace_geometry(options.spec);
  for (std::size_t i = 0; i < geometry.size(); ++i) {
    if (geometry[i].in_channels > 8 || geometry[i].out_channels > 8) {
      throw UsageError("gradcheck is limited to <= 8 channels per layer; layer " + std::to_string(i + 1) + " has " +
                       std::to_string(geometry[i].in_channels) + " -> " + std::to_string(geometry[i].out_channels));
    }
  }
  if (options.batch < 1) throw UsageError("gradcheck batch must be >= 1");
  Network<double> net = build_network<double>(options.spec, options.seed);
  const ArchSpec& spec = options.spec;

  Rng rng(derive_seed(options.seed, "gradcheck"));
  Tensor<double> x({options.batch, spec.in_channels, spec.in_height, spec.in_width});
  if (!options.zero_input) {
    for (Index i = 0; i < x.size(); ++i) x[i] = rng.normal();
    for (auto& layer : net.layers) {
      for (Index i = 0; i < layer.params.bias.size(); ++i) layer.params.bias[i] = rng.normal(0.0, 0.1);
    }
  }
  std::vector<int> targets;
  for (Index i = 0; i < options.batch; ++i) targets.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_classes))));

  GradcheckReport report;
  report.threshold = options.threshold;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const LayerState<double>& layer = net.layers[l];
    GradientHooks<double> hooks;
    if (options.corrupt_layer && *options.corrupt_layer == static_cast<Index>(l)) {
      const double scale = options.corrupt_scale;
      hooks.on_feature_grad = [scale](Tensor<double>& g) { g.values() *= scale; };
    }
    const LocalGradient<double> analytic = layer_gradient(x, layer, targets, &hooks);

    LayerCheck check;
    check.layer = static_cast<Index>(l);
    double worst = -1.0;
    for (int pass = 0; pass < 2; ++pass) {
      const bool bias = pass == 1;
      const Tensor<double>& grad = bias ? analytic.grad.bias : analytic.grad.weights;
      for (Index k = 0; k < grad.size(); ++k) {
        const double numeric = numeric_derivative(x, layer, targets, bias, k, options.step);
        const double err = gradient_error(grad[k], numeric);
        double& slot = bias ? check.max_bias_error : check.max_weight_error;
        slot = std::max(slot, err);
        if (err > worst) {
          worst = err;
          check.worst_index = k;
          check.worst_parameter = bias ? "bias[" + std::to_string(k) + "]" : weight_name(grad.shape(), k);
        }
        ++check.parameters;
      }
    }
    check.pass = check.max_error() <= options.threshold;
    report.layers.push_back(check);
    x = forward_transform(analytic.activations, layer.spec);
  }
  return report;
}

void goodness_dump(const Network<float>& net, const Tensor<float>& batch, Index layer, bool compare_pooling,
                   std::ostream& csv) {
  if (layer < 0 || layer >= net.num_layers()) {
    throw UsageError("layer " + std::to_string(layer + 1) + " out of range [1, " + std::to_string(net.num_layers()) +
                     "]");
  }
  const LayerState<float>& target = net.layers[static_cast<std::size_t>(layer)];
  if (compare_pooling && !target.spec.pool) {
    throw UsageError("layer " + std::to_string(layer + 1) +
                     " has no pooling; only the origin variant can be dumped (pass --origin-only)");
  }
  Tensor<float> x = batch;
  for (Index i = 0; i < layer; ++i) x = layer_infer(x, net.layers[static_cast<std::size_t>(i)]).output;
  const Tensor<float> act = relu(conv2d_forward(x, target.params)).output;

  auto emit = [&](const char* variant, const Tensor<float>& maps, const PartitionPlan& plan) {
    const Tensor<float> g = spatial_goodness(maps, plan);
    for (Index b = 0; b < g.dim(0); ++b) {
      for (Index c = 0; c < plan.channels; ++c) {
        for (Index i = 0; i < plan.patches; ++i) {
          for (Index j = 0; j < plan.patches; ++j) {
            csv << (layer + 1) << ',' << variant << ',' << c << ',' << i << ',' << j << ','
                << g.at(b, plan.index(c, i, j)) << '\n';
          }
        }
      }
    }
  };

  csv << "layer,variant,channel,patch_i,patch_j,value\n";
  csv.precision(9);
  emit("origin", act, target.plan);
  if (!compare_pooling) return;
  for (PoolKind kind : {PoolKind::rms, PoolKind::avg, PoolKind::max}) {
    PoolSpec spec = *target.spec.pool;
    spec.kind = kind;
    const Tensor<float> pooled = pool(act, spec);
    Index p = std::min({target.plan.patches, pooled.dim(2), pooled.dim(3)});
    while (pooled.dim(2) % p != 0 || pooled.dim(3) % p != 0) --p;
    emit(to_string(kind), pooled, make_plan(pooled.dim(1), pooled.dim(2), pooled.dim(3), p));
  }
}

}  // namespace asge
