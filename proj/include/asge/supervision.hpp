#pragma once

// Frozen random projection of spatial goodness into class space, the local
// cross-entropy loss, and the layer-local parameter gradient
//   dL/dtheta = (dL/da W^T) dg/dY dY/dtheta
// No gradient ever leaves the layer.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>

#include "asge/goodness.hpp"
#include "asge/rng.hpp"
#include "asge/tensor.hpp"

namespace asge {

// W ~ N(0, std = 1/sqrt(N)), b likewise; regenerated from the seed alone.
template <typename Scalar>
class ProjectionHead {
 public:
  ProjectionHead(std::uint64_t seed, Index in_dim, Index n_classes)
      : seed_(seed), in_dim_(in_dim), n_classes_(n_classes) {
    if (in_dim < 1 || n_classes < 1) {
      throw ConfigError("projection head needs in_dim >= 1 and n_classes >= 1");
    }
    Rng rng(seed);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(n_classes));
    weights_ = Tensor<Scalar>({in_dim, n_classes});
    for (Index i = 0; i < weights_.size(); ++i) weights_[i] = static_cast<Scalar>(rng.normal(0.0, stddev));
    bias_ = Tensor<Scalar>({1, n_classes});
    for (Index i = 0; i < bias_.size(); ++i) bias_[i] = static_cast<Scalar>(rng.normal(0.0, stddev));
  }

  std::uint64_t seed() const noexcept { return seed_; }
  Index in_dim() const noexcept { return in_dim_; }
  Index n_classes() const noexcept { return n_classes_; }
  const Tensor<Scalar>& weights() const noexcept { return weights_; }
  const Tensor<Scalar>& bias() const noexcept { return bias_; }

  friend bool operator==(const ProjectionHead& a, const ProjectionHead& b) {
    return a.seed_ == b.seed_ && a.weights_ == b.weights_ && a.bias_ == b.bias_;
  }

 private:
  std::uint64_t seed_;
  Index in_dim_;
  Index n_classes_;
  Tensor<Scalar> weights_;
  Tensor<Scalar> bias_;
};

template <typename Scalar>
ProjectionHead<Scalar> make_projection(std::uint64_t seed, Index in_dim, Index n_classes) {
  return ProjectionHead<Scalar>(seed, in_dim, n_classes);
}

// a = g W + b, bias broadcast per sample.
template <typename Scalar>
Tensor<Scalar> project(const ProjectionHead<Scalar>& head, const Tensor<Scalar>& goodness) {
  if (goodness.rank() != 2 || goodness.dim(1) != head.in_dim()) {
    throw ConfigError("goodness " + shape_str(goodness.shape()) + " does not match head in_dim " +
                      std::to_string(head.in_dim()));
  }
  const Index batch = goodness.dim(0);
  Tensor<Scalar> logits({batch, head.n_classes()});
  auto out = logits.matrix(batch, head.n_classes());
  out.noalias() = goodness.matrix(batch, head.in_dim()) *
                  head.weights().matrix(head.in_dim(), head.n_classes());
  out.rowwise() += head.bias().matrix(1, head.n_classes()).row(0);
  return logits;
}

template <typename Scalar>
struct LossResult {
  Scalar loss = 0;         // batch mean
  Tensor<Scalar> grad;     // dL/da, already divided by B
};

inline void check_targets(std::span<const int> targets, Index batch, Index n_classes) {
  if (static_cast<Index>(targets.size()) != batch) {
    throw InputError("got " + std::to_string(targets.size()) + " targets for a batch of " +
                     std::to_string(batch));
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || targets[i] >= n_classes) {
      throw InputError("target " + std::to_string(targets[i]) + " at position " +
                       std::to_string(i) + " outside [0, " + std::to_string(n_classes) + ")");
    }
  }
}

// Softmax cross-entropy, max-subtracted.
template <typename Scalar>
LossResult<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const int> targets) {
  if (logits.rank() != 2) throw ConfigError("logits must be [B,N], got " + shape_str(logits.shape()));
  const Index batch = logits.dim(0);
  const Index n = logits.dim(1);
  check_targets(targets, batch, n);
  LossResult<Scalar> result{Scalar(0), Tensor<Scalar>(logits.shape())};
  const auto a = logits.matrix(batch, n);
  auto grad = result.grad.matrix(batch, n);
  const Scalar inv_batch = Scalar(1) / static_cast<Scalar>(batch);
  Scalar total = 0;
  for (Index b = 0; b < batch; ++b) {
    const Scalar peak = a.row(b).maxCoeff();
    const auto shifted = (a.row(b).array() - peak).eval();
    const auto expd = shifted.exp().eval();
    const Scalar sum = expd.sum();
    total += std::log(sum) - shifted(targets[static_cast<std::size_t>(b)]);
    grad.row(b) = (expd / sum).matrix() * inv_batch;
    grad(b, targets[static_cast<std::size_t>(b)]) -= inv_batch;
  }
  result.loss = total * inv_batch;
  return result;
}

template <typename Scalar>
LossResult<Scalar> local_ce_loss(const Tensor<Scalar>& logits, std::span<const int> targets) {
  return softmax_cross_entropy(logits, targets);
}

// argmax per row, lowest index on ties.
template <typename Scalar>
std::vector<int> argmax_rows(const Tensor<Scalar>& scores) {
  const Index batch = scores.dim(0);
  const auto m = scores.matrix(batch, scores.size() / batch);
  std::vector<int> out(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    Index best;
    m.row(b).maxCoeff(&best);
    out[static_cast<std::size_t>(b)] = static_cast<int>(best);
  }
  return out;
}

// Test hook: lets a harness tamper with the feature-map gradient between the
// goodness pullback and the ReLU mask.
template <typename Scalar>
struct GradientHooks {
  std::function<void(Tensor<Scalar>&)> on_feature_grad;
};

template <typename Scalar>
struct LocalGradient {
  Scalar loss = 0;
  Tensor<Scalar> logits;       // [B, N]
  Tensor<Scalar> activations;  // post-ReLU feature maps
  ConvGrad<Scalar> grad;
};

template <typename Scalar>
LocalGradient<Scalar> layer_local_gradient(const Tensor<Scalar>& input, const ConvParams<Scalar>& params,
                                           const ProjectionHead<Scalar>& head, const PartitionPlan& plan,
                                           std::span<const int> targets,
                                           const GradientHooks<Scalar>* hooks = nullptr) {
  const Tensor<Scalar> pre = conv2d_forward(input, params);
  Activation<Scalar> act = relu(pre);
  const Tensor<Scalar> goodness = spatial_goodness(act.output, plan);
  Tensor<Scalar> logits = project(head, goodness);
  LossResult<Scalar> ce = local_ce_loss(logits, targets);

  const Index batch = goodness.dim(0);
  Tensor<Scalar> dgoodness({batch, head.in_dim()});
  dgoodness.matrix(batch, head.in_dim()).noalias() =
      ce.grad.matrix(batch, head.n_classes()) *
      head.weights().matrix(head.in_dim(), head.n_classes()).transpose();
  Tensor<Scalar> dfeatures = goodness_jacobian_apply(act.output, plan, dgoodness);
  if (hooks && hooks->on_feature_grad) hooks->on_feature_grad(dfeatures);
  dfeatures.values().array() *= act.mask.values().array();

  LocalGradient<Scalar> out;
  out.loss = ce.loss;
  out.grad = conv2d_weight_grad(input, dfeatures, params);
  out.logits = std::move(logits);
  out.activations = std::move(act.output);
  return out;
}

}  // namespace asge
