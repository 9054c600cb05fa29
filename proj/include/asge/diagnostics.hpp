#pragma once

// Finite-difference check of the layer-local gradient chain, and the goodness
// dump used to compare pre- and post-pooling distributions.

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "asge/network.hpp"

namespace asge {

// 2 conv layers with 4 and 8 channels on a 3x8x8 input, 10 classes.
ArchSpec gradcheck_spec();

struct GradcheckOptions {
  ArchSpec spec = gradcheck_spec();
  std::uint64_t seed = 0;
  Index batch = 4;
  double step = 1e-5;
  double threshold = 1e-4;
  bool zero_input = false;             // all-zero inputs, zero biases
  std::optional<Index> corrupt_layer;  // 0-based; scales that layer's feature gradient
  double corrupt_scale = 1.01;
};

struct LayerCheck {
  Index layer = 0;  // 0-based
  Index parameters = 0;
  double max_weight_error = 0.0;
  double max_bias_error = 0.0;
  std::string worst_parameter;  // e.g. "weight[2,0,1,1]"
  Index worst_index = 0;        // flat index within weights, or bias
  bool pass = true;

  double max_error() const { return max_weight_error > max_bias_error ? max_weight_error : max_bias_error; }
};

struct GradcheckReport {
  std::vector<LayerCheck> layers;
  double threshold = 0.0;
  bool pass() const;
};

// Relative error |a - n| / max(|a|, |n|), defined as 0 when both are below
// 1e-8. The numeric derivative is 2 D(h/2) - D(h) with D the central
// difference, which cancels the first-order error a ReLU kink introduces.
double gradient_error(double analytic, double numeric);

// Double precision throughout. UsageError when any layer exceeds 8 channels.
GradcheckReport gradcheck(const GradcheckOptions& options);

// Batch goodness vectors of one layer on the post-ReLU maps ("origin") and,
// when `compare_pooling`, on the same maps after rms / avg / max pooling with
// the layer's pool window. CSV columns: layer,variant,channel,patch_i,patch_j,value
// with one row per sample, channel and patch.
void goodness_dump(const Network<float>& net, const Tensor<float>& batch, Index layer, bool compare_pooling,
                   std::ostream& csv);

}  // namespace asge
