#pragma once

// Untrained transforms between supervised convolutions. They sit after the
// goodness tap and before the detach, so they never need a backward pass.

#include <cmath>
#include <limits>
#include <string>

#include "asge/tensor.hpp"

namespace asge {

enum class PoolKind { rms, avg, max };

inline const char* to_string(PoolKind kind) {
  switch (kind) {
    case PoolKind::rms: return "rms";
    case PoolKind::avg: return "avg";
    case PoolKind::max: return "max";
  }
  return "?";
}

inline PoolKind parse_pool_kind(const std::string& name) {
  if (name == "rms") return PoolKind::rms;
  if (name == "avg") return PoolKind::avg;
  if (name == "max") return PoolKind::max;
  throw ConfigError("unknown pooling kind '" + name + "' (expected rms, avg or max)");
}

struct PoolSpec {
  PoolKind kind = PoolKind::rms;
  Index window = 2;
  Index stride = 2;
  bool strict = true;  // require non-overlapping windows that tile the map

  friend bool operator==(const PoolSpec&, const PoolSpec&) = default;
};

struct NormSpec {
  double epsilon = 1e-5;

  friend bool operator==(const NormSpec&, const NormSpec&) = default;
};

inline Index pooled_extent(Index extent, const PoolSpec& spec) {
  if (spec.window < 1 || spec.stride < 1) throw ConfigError("pool window and stride must be >= 1");
  if (extent < spec.window) {
    throw ConfigError("pool window " + std::to_string(spec.window) + " exceeds extent " +
                      std::to_string(extent));
  }
  if (spec.strict && (spec.window != spec.stride || extent % spec.stride != 0)) {
    throw ConfigError("pooling window " + std::to_string(spec.window) + "/stride " +
                      std::to_string(spec.stride) + " does not tile extent " +
                      std::to_string(extent));
  }
  return (extent - spec.window) / spec.stride + 1;
}

namespace detail {

template <typename Scalar, typename Reduce>
Tensor<Scalar> pool_windows(const Tensor<Scalar>& input, const PoolSpec& spec, Reduce reduce) {
  require_rank(input, 4, "pool input");
  const Index planes = input.dim(0) * input.dim(1);
  const Index h = input.dim(2), w = input.dim(3);
  const Index oh = pooled_extent(h, spec), ow = pooled_extent(w, spec);
  Tensor<Scalar> out({input.dim(0), input.dim(1), oh, ow});
  for (Index p = 0; p < planes; ++p) {
    typename Tensor<Scalar>::ConstMatrixMap in(input.data() + p * h * w, h, w);
    typename Tensor<Scalar>::MatrixMap dst(out.data() + p * oh * ow, oh, ow);
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j) {
        dst(i, j) = reduce(in.block(i * spec.stride, j * spec.stride, spec.window, spec.window));
      }
    }
  }
  return out;
}

}  // namespace detail

// sqrt(mean(x^2)) per window: energy-preserving L2 pooling.
template <typename Scalar>
Tensor<Scalar> rms_pool(const Tensor<Scalar>& input, const PoolSpec& spec) {
  return detail::pool_windows(input, spec, [](const auto& block) {
    return std::sqrt(block.squaredNorm() / static_cast<Scalar>(block.size()));
  });
}

template <typename Scalar>
Tensor<Scalar> avg_pool(const Tensor<Scalar>& input, const PoolSpec& spec) {
  return detail::pool_windows(input, spec, [](const auto& block) { return block.mean(); });
}

template <typename Scalar>
Tensor<Scalar> max_pool(const Tensor<Scalar>& input, const PoolSpec& spec) {
  return detail::pool_windows(input, spec, [](const auto& block) { return block.maxCoeff(); });
}

template <typename Scalar>
Tensor<Scalar> pool(const Tensor<Scalar>& input, const PoolSpec& spec) {
  switch (spec.kind) {
    case PoolKind::rms: return rms_pool(input, spec);
    case PoolKind::avg: return avg_pool(input, spec);
    case PoolKind::max: return max_pool(input, spec);
  }
  throw ConfigError("bad pool kind");
}

// Per-sample normalization over all of (C,H,W); no affine parameters.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& input, const NormSpec& spec) {
  if (!(spec.epsilon > 0.0)) throw ConfigError("layer norm epsilon must be > 0");
  if (input.empty()) throw ConfigError("layer_norm of an empty tensor");
  const Index batch = input.dim(0);
  const Index per = input.size() / batch;
  Tensor<Scalar> out(input.shape());
  const auto in = input.matrix(batch, per);
  auto dst = out.matrix(batch, per);
  const Scalar eps = static_cast<Scalar>(spec.epsilon);
  for (Index b = 0; b < batch; ++b) {
    const Scalar mean = in.row(b).mean();
    const auto centered = (in.row(b).array() - mean).eval();
    const Scalar var = centered.square().mean();
    dst.row(b) = (centered / std::sqrt(var + eps)).matrix();
  }
  return out;
}

}  // namespace asge
