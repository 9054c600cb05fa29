#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "asge/tensor.hpp"

namespace asge {

enum class OptimizerKind { adamw, sgd_momentum };

inline const char* to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adamw ? "adamw" : "sgd_momentum";
}

inline OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "adamw") return OptimizerKind::adamw;
  if (name == "sgd_momentum" || name == "sgd") return OptimizerKind::sgd_momentum;
  throw ConfigError("unknown optimizer '" + name + "' (expected adamw or sgd_momentum)");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.9;
};

// Moments for one parameter tensor. AdamW uses both; SGD uses `first` as its
// momentum buffer.
template <typename Scalar>
struct ParamState {
  Tensor<Scalar> first;
  Tensor<Scalar> second;
  std::int64_t step = 0;

  static ParamState zeros_like(const Tensor<Scalar>& param) {
    return ParamState{Tensor<Scalar>(param.shape()), Tensor<Scalar>(param.shape()), 0};
  }
};

namespace detail {

template <typename Scalar>
void check_update(const Tensor<Scalar>& param, const Tensor<Scalar>& grad, const ParamState<Scalar>& state) {
  if (param.shape() != grad.shape() || param.shape() != state.first.shape()) {
    throw ConfigError("optimizer shapes differ: param " + shape_str(param.shape()) + ", grad " +
                      shape_str(grad.shape()) + ", state " + shape_str(state.first.shape()));
  }
}

}  // namespace detail

// Decoupled weight decay, bias-corrected moments.
template <typename Scalar>
void adamw_step(Tensor<Scalar>& param, const Tensor<Scalar>& grad, ParamState<Scalar>& state,
                double lr, const OptimizerConfig& cfg) {
  detail::check_update(param, grad, state);
  ++state.step;
  const Scalar b1 = static_cast<Scalar>(cfg.beta1);
  const Scalar b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar correction1 = static_cast<Scalar>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
  const Scalar correction2 = static_cast<Scalar>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
  const Scalar step = static_cast<Scalar>(lr);
  const Scalar decay = static_cast<Scalar>(1.0 - lr * cfg.weight_decay);
  const Scalar eps = static_cast<Scalar>(cfg.epsilon);

  auto p = param.values().array();
  const auto g = grad.values().array();
  auto m = state.first.values().array();
  auto v = state.second.values().array();
  p *= decay;
  m = b1 * m + (Scalar(1) - b1) * g;
  v = b2 * v + (Scalar(1) - b2) * g.square();
  p -= step * (m / correction1) / ((v / correction2).sqrt() + eps);
}

// v <- mu v + (g + lambda theta); theta <- theta - lr v
template <typename Scalar>
void sgd_momentum_step(Tensor<Scalar>& param, const Tensor<Scalar>& grad, ParamState<Scalar>& state,
                       double lr, const OptimizerConfig& cfg) {
  detail::check_update(param, grad, state);
  ++state.step;
  const Scalar mu = static_cast<Scalar>(cfg.momentum);
  const Scalar lambda = static_cast<Scalar>(cfg.weight_decay);
  auto p = param.values().array();
  auto buf = state.first.values().array();
  buf = mu * buf + (grad.values().array() + lambda * p);
  p -= static_cast<Scalar>(lr) * buf;
}

template <typename Scalar>
void optimizer_step(Tensor<Scalar>& param, const Tensor<Scalar>& grad, ParamState<Scalar>& state,
                    double lr, const OptimizerConfig& cfg) {
  if (cfg.kind == OptimizerKind::adamw) {
    adamw_step(param, grad, state, lr, cfg);
  } else {
    sgd_momentum_step(param, grad, state, lr, cfg);
  }
}

struct CosineSchedule {
  double lr_max = 2e-4;
  double lr_min = 1e-5;
  std::int64_t total_steps = 1;
};

inline double cosine_lr(const CosineSchedule& schedule, std::int64_t step) {
  if (schedule.total_steps < 1 || schedule.lr_min > schedule.lr_max) {
    throw ConfigError("cosine schedule needs total_steps >= 1 and lr_min <= lr_max");
  }
  if (step < 0 || step > schedule.total_steps) {
    throw UsageError("schedule step " + std::to_string(step) + " outside [0, " +
                     std::to_string(schedule.total_steps) + "]");
  }
  const double phase = std::numbers::pi * static_cast<double>(step) /
                       static_cast<double>(schedule.total_steps);
  return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + std::cos(phase));
}

}  // namespace asge
