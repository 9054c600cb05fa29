#pragma once

// One supervised convolutional stage: conv -> ReLU -> (goodness, logits,
// local loss, parameter update) with the forwarded output computed from the
// parameters as they were before the update, then pooled and normalized.

#include <cmath>
#include <optional>
#include <span>

#include "asge/goodness.hpp"
#include "asge/layers.hpp"
#include "asge/optim.hpp"
#include "asge/supervision.hpp"

namespace asge {

struct LayerSpec {
  Index out_channels = 32;
  Index kernel = 3;
  Index stride = 1;
  Index padding = 1;
  std::optional<PoolSpec> pool;
  NormSpec norm;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

template <typename Scalar>
struct LayerState {
  LayerSpec spec;
  ConvParams<Scalar> params;
  ProjectionHead<Scalar> head;
  PartitionPlan plan;
  ParamState<Scalar> weight_state;
  ParamState<Scalar> bias_state;
};

template <typename Scalar>
struct LayerOutput {
  Tensor<Scalar> output;      // pooled + normalized; input of the next stage
  Tensor<Scalar> logits;      // frozen-projection logits [B, N]
  Tensor<Scalar> gap;         // GAP of the post-ReLU maps [B, C]
  Scalar loss = 0;            // local loss; zero for inference
};

template <typename Scalar>
Tensor<Scalar> forward_transform(const Tensor<Scalar>& activations, const LayerSpec& spec) {
  if (spec.pool) return layer_norm(pool(activations, *spec.pool), spec.norm);
  return layer_norm(activations, spec.norm);
}

// Inference-only pass through one stage.
template <typename Scalar>
LayerOutput<Scalar> layer_infer(const Tensor<Scalar>& input, const LayerState<Scalar>& state) {
  const Tensor<Scalar> activations = relu(conv2d_forward(input, state.params)).output;
  LayerOutput<Scalar> out;
  out.logits = project(state.head, spatial_goodness(activations, state.plan));
  out.gap = global_avg_pool(activations);
  out.output = forward_transform(activations, state.spec);
  return out;
}

template <typename Scalar>
LocalGradient<Scalar> layer_gradient(const Tensor<Scalar>& input, const LayerState<Scalar>& state,
                                     std::span<const int> targets,
                                     const GradientHooks<Scalar>* hooks = nullptr) {
  return layer_local_gradient(input, state.params, state.head, state.plan, targets, hooks);
}

template <typename Scalar>
void apply_layer_update(LayerState<Scalar>& state, const ConvGrad<Scalar>& grad, double lr,
                        const OptimizerConfig& cfg) {
  optimizer_step(state.params.weights, grad.weights, state.weight_state, lr, cfg);
  optimizer_step(state.params.bias, grad.bias, state.bias_state, lr, cfg);
}

// Trains `state` on one batch. Mutates only `state`; the returned output is
// a fresh tensor with no link back to this stage.
template <typename Scalar>
LayerOutput<Scalar> asge_layer_step(const Tensor<Scalar>& input, LayerState<Scalar>& state,
                                    std::span<const int> targets, double lr,
                                    const OptimizerConfig& cfg) {
  LocalGradient<Scalar> local = layer_gradient(input, state, targets);
  LayerOutput<Scalar> out;
  out.loss = local.loss;
  out.gap = global_avg_pool(local.activations);
  out.output = forward_transform(local.activations, state.spec);
  out.logits = std::move(local.logits);
  apply_layer_update(state, local.grad, lr, cfg);
  return out;
}

}  // namespace asge
