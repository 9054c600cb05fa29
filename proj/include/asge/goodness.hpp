#pragma once

// Spatial goodness: each channel's post-ReLU map is tiled into P x P equal
// patches and every patch contributes its mean squared activation. The
// resulting vector of length C * P^2 is ordered channel-major, then patch row,
// then patch column.

#include <algorithm>
#include <cmath>
#include <numeric>

#include "asge/tensor.hpp"

namespace asge {

struct PartitionPlan {
  Index channels = 1;
  Index patches = 1;  // per axis
  Index patch_h = 1;
  Index patch_w = 1;

  Index height() const { return patches * patch_h; }
  Index width() const { return patches * patch_w; }
  Index goodness_dim() const { return channels * patches * patches; }
  Index index(Index c, Index i, Index j) const { return (c * patches + i) * patches + j; }

  friend bool operator==(const PartitionPlan&, const PartitionPlan&) = default;
};

// min(max(1, floor(alpha * C_L / C_l)), H, W), then lowered to the largest
// value that tiles both H and W evenly.
inline Index partition_factor(double alpha, Index layer_channels, Index final_channels,
                              Index height, Index width) {
  if (layer_channels < 1 || final_channels < 1 || height < 1 || width < 1 || alpha < 0.0) {
    throw ConfigError("partition_factor needs positive channel counts and extents, alpha >= 0");
  }
  const double ratio = alpha * static_cast<double>(final_channels) /
                       static_cast<double>(layer_channels);
  Index p = std::max<Index>(1, static_cast<Index>(std::floor(ratio)));
  p = std::min({p, height, width});
  while (height % p != 0 || width % p != 0) --p;
  return p;
}

inline PartitionPlan make_plan(Index channels, Index height, Index width, Index patches) {
  if (patches < 1 || height % patches != 0 || width % patches != 0) {
    throw ConfigError("cannot tile a " + std::to_string(height) + "x" + std::to_string(width) +
                      " map into " + std::to_string(patches) + "x" + std::to_string(patches) +
                      " equal patches");
  }
  return PartitionPlan{channels, patches, height / patches, width / patches};
}

namespace detail {

template <typename Scalar>
void check_plan(const Tensor<Scalar>& features, const PartitionPlan& plan) {
  require_rank(features, 4, "goodness features");
  if (features.dim(1) != plan.channels || features.dim(2) != plan.height() ||
      features.dim(3) != plan.width()) {
    throw ConfigError("features " + shape_str(features.shape()) + " do not match a plan of " +
                      std::to_string(plan.channels) + " channels tiled " +
                      std::to_string(plan.patches) + "x" + std::to_string(plan.patches) +
                      " with patches " + std::to_string(plan.patch_h) + "x" +
                      std::to_string(plan.patch_w));
  }
}

}  // namespace detail

// [B,C,H,W] -> [B, C*P*P]
template <typename Scalar>
Tensor<Scalar> spatial_goodness(const Tensor<Scalar>& features, const PartitionPlan& plan) {
  detail::check_plan(features, plan);
  const Index batch = features.dim(0);
  const Index height = features.dim(2);
  const Index width = features.dim(3);
  const Scalar inv_area = Scalar(1) / static_cast<Scalar>(plan.patch_h * plan.patch_w);
  Tensor<Scalar> g({batch, plan.goodness_dim()});
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < plan.channels; ++c) {
      typename Tensor<Scalar>::ConstMatrixMap map(
          features.data() + (b * plan.channels + c) * height * width, height, width);
      for (Index i = 0; i < plan.patches; ++i) {
        for (Index j = 0; j < plan.patches; ++j) {
          const auto block = map.block(i * plan.patch_h, j * plan.patch_w, plan.patch_h,
                                       plan.patch_w);
          g.at(b, plan.index(c, i, j)) = block.squaredNorm() * inv_area;
        }
      }
    }
  }
  return g;
}

// Pulls an upstream gradient w.r.t. the goodness vector back onto the
// feature map: d g[c,i,j] / d y[c,h,w] = 2 y[c,h,w] / (patch_h * patch_w).
template <typename Scalar>
Tensor<Scalar> goodness_jacobian_apply(const Tensor<Scalar>& features, const PartitionPlan& plan,
                                       const Tensor<Scalar>& upstream) {
  detail::check_plan(features, plan);
  const Index batch = features.dim(0);
  if (upstream.shape() != Shape{batch, plan.goodness_dim()}) {
    throw ConfigError("goodness upstream " + shape_str(upstream.shape()) + " expected " +
                      shape_str({batch, plan.goodness_dim()}));
  }
  const Index height = features.dim(2);
  const Index width = features.dim(3);
  const Scalar scale = Scalar(2) / static_cast<Scalar>(plan.patch_h * plan.patch_w);
  Tensor<Scalar> out(features.shape());
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < plan.channels; ++c) {
      const Index offset = (b * plan.channels + c) * height * width;
      typename Tensor<Scalar>::ConstMatrixMap in(features.data() + offset, height, width);
      typename Tensor<Scalar>::MatrixMap dst(out.data() + offset, height, width);
      for (Index i = 0; i < plan.patches; ++i) {
        for (Index j = 0; j < plan.patches; ++j) {
          const Scalar coeff = scale * upstream.at(b, plan.index(c, i, j));
          dst.block(i * plan.patch_h, j * plan.patch_w, plan.patch_h, plan.patch_w) =
              coeff * in.block(i * plan.patch_h, j * plan.patch_w, plan.patch_h, plan.patch_w);
        }
      }
    }
  }
  return out;
}

}  // namespace asge
