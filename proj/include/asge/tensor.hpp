#pragma once

// Dense row-major tensors over Eigen storage, plus the handful of kernels the
// layer-local gradient chain needs: convolution forward, convolution weight
// gradient, ReLU and global average pooling. There is deliberately no input
// gradient for convolution; nothing ever propagates across a layer boundary.

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "asge/errors.hpp"

namespace asge {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  // An empty tensor is the "unset" state; every public operation rejects it.
  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    for (Index extent : shape_) {
      if (extent < 1) throw ConfigError("tensor extents must be >= 1, got " + shape_str(shape_));
    }
    values_ = Vector::Constant(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values) : Tensor(std::move(shape)) {
    if (static_cast<Index>(values.size()) != size()) {
      throw ConfigError("initializer has " + std::to_string(values.size()) +
                        " values for shape " + shape_str(shape_));
    }
    std::copy(values.begin(), values.end(), values_.data());
  }

  Tensor(Shape shape, const Vector& values) : Tensor(std::move(shape)) {
    if (values.size() != size()) {
      throw ConfigError("value count " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape_));
    }
    values_ = values;
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return shape_.empty(); }

  Scalar* data() noexcept { return values_.data(); }
  const Scalar* data() const noexcept { return values_.data(); }

  Vector& values() noexcept { return values_; }
  const Vector& values() const noexcept { return values_; }

  Scalar& operator[](Index i) { return values_[i]; }
  Scalar operator[](Index i) const { return values_[i]; }

  Scalar& at(Index i, Index j) { return values_[i * shape_[1] + j]; }
  Scalar at(Index i, Index j) const { return values_[i * shape_[1] + j]; }

  Scalar& at(Index n, Index c, Index h, Index w) {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar at(Index n, Index c, Index h, Index w) const {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  // Row-major matrix view over the whole buffer, rows * cols == size().
  MatrixMap matrix(Index rows, Index cols) {
    check_matrix(rows, cols);
    return MatrixMap(values_.data(), rows, cols);
  }
  ConstMatrixMap matrix(Index rows, Index cols) const {
    check_matrix(rows, cols);
    return ConstMatrixMap(values_.data(), rows, cols);
  }
  // First axis as rows, everything else flattened into columns.
  MatrixMap matrix() { return matrix(shape_.at(0), size() / shape_.at(0)); }
  ConstMatrixMap matrix() const { return matrix(shape_.at(0), size() / shape_.at(0)); }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size()) {
      throw ConfigError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), values_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    out.values() = values_.template cast<Other>();
    return out;
  }

  bool all_finite() const { return values_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  void check_matrix(Index rows, Index cols) const {
    if (rows * cols != size()) {
      throw ConfigError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                        " over tensor " + shape_str(shape_));
    }
  }

  Shape shape_;
  Vector values_;
};

template <typename Scalar>
struct ConvParams {
  Tensor<Scalar> weights;  // [C_out, C_in, K, K]
  Tensor<Scalar> bias;     // [C_out]
  Index stride = 1;
  Index padding = 0;

  Index out_channels() const { return weights.dim(0); }
  Index in_channels() const { return weights.dim(1); }
  Index kernel() const { return weights.dim(2); }
};

struct ConvGeometry {
  Index batch, in_channels, height, width;
  Index out_channels, kernel, stride, padding;
  Index out_height, out_width;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

template <typename Scalar>
void require_rank(const Tensor<Scalar>& t, Index rank, const char* what) {
  if (t.rank() != rank) {
    throw ConfigError(std::string(what) + " must be rank " + std::to_string(rank) + ", got " +
                      shape_str(t.shape()));
  }
}

// Builds the [C*K*K, Ho*Wo] patch matrix for one image.
template <typename Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, Scalar* cols) {
  const Index out_area = g.out_height * g.out_width;
  for (Index c = 0; c < g.in_channels; ++c) {
    const Scalar* plane = image + c * g.height * g.width;
    for (Index ky = 0; ky < g.kernel; ++ky) {
      for (Index kx = 0; kx < g.kernel; ++kx) {
        Scalar* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * out_area;
        for (Index oh = 0; oh < g.out_height; ++oh) {
          const Index ih = oh * g.stride - g.padding + ky;
          Scalar* dst = row + oh * g.out_width;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_width, Scalar(0));
            continue;
          }
          const Scalar* src = plane + ih * g.width;
          for (Index ow = 0; ow < g.out_width; ++ow) {
            const Index iw = ow * g.stride - g.padding + kx;
            dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : Scalar(0);
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename Scalar>
ConvGeometry conv_geometry(const Shape& input_shape, const ConvParams<Scalar>& params) {
  using detail::require;
  require(input_shape.size() == 4, "conv input must be [B,C,H,W], got " + shape_str(input_shape));
  detail::require_rank(params.weights, 4, "conv weights");
  detail::require_rank(params.bias, 1, "conv bias");
  ConvGeometry g{};
  g.batch = input_shape[0];
  g.in_channels = input_shape[1];
  g.height = input_shape[2];
  g.width = input_shape[3];
  g.out_channels = params.weights.dim(0);
  g.kernel = params.weights.dim(2);
  g.stride = params.stride;
  g.padding = params.padding;
  require(params.weights.dim(1) == g.in_channels,
          "conv weights expect " + std::to_string(params.weights.dim(1)) +
              " input channels, input has " + std::to_string(g.in_channels));
  require(params.weights.dim(3) == g.kernel, "conv kernel must be square");
  require(params.bias.dim(0) == g.out_channels, "conv bias length must equal C_out");
  require(g.stride >= 1 && g.padding >= 0, "conv stride must be >= 1 and padding >= 0");
  const Index span_h = g.height + 2 * g.padding - g.kernel;
  const Index span_w = g.width + 2 * g.padding - g.kernel;
  require(span_h >= 0 && span_w >= 0,
          "kernel " + std::to_string(g.kernel) + " does not fit input " + shape_str(input_shape));
  g.out_height = span_h / g.stride + 1;
  g.out_width = span_w / g.stride + 1;
  return g;
}

// Cross-correlation (no kernel flip) plus per-channel bias.
template <typename Scalar>
Tensor<Scalar> conv2d_forward(const Tensor<Scalar>& input, const ConvParams<Scalar>& params) {
  const ConvGeometry g = conv_geometry(input.shape(), params);
  const Index patch = g.in_channels * g.kernel * g.kernel;
  const Index out_area = g.out_height * g.out_width;
  Tensor<Scalar> output({g.batch, g.out_channels, g.out_height, g.out_width});
  typename Tensor<Scalar>::RowMatrix cols(patch, out_area);
  const auto weights = params.weights.matrix(g.out_channels, patch);
  const auto bias = params.bias.values();
  const Index in_stride = g.in_channels * g.height * g.width;
  for (Index b = 0; b < g.batch; ++b) {
    detail::im2col(input.data() + b * in_stride, g, cols.data());
    typename Tensor<Scalar>::MatrixMap out(output.data() + b * g.out_channels * out_area,
                                           g.out_channels, out_area);
    out.noalias() = weights * cols;
    out.colwise() += bias;
  }
  return output;
}

template <typename Scalar>
struct ConvGrad {
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;
};

// Parameter gradient of sum(upstream * conv2d_forward(input)), summed over
// the batch.
template <typename Scalar>
ConvGrad<Scalar> conv2d_weight_grad(const Tensor<Scalar>& input, const Tensor<Scalar>& upstream,
                                    const ConvParams<Scalar>& params) {
  const ConvGeometry g = conv_geometry(input.shape(), params);
  const Shape expected{g.batch, g.out_channels, g.out_height, g.out_width};
  if (upstream.shape() != expected) {
    throw ConfigError("upstream gradient shape " + shape_str(upstream.shape()) +
                      " does not match conv output " + shape_str(expected));
  }
  const Index patch = g.in_channels * g.kernel * g.kernel;
  const Index out_area = g.out_height * g.out_width;
  ConvGrad<Scalar> grad{Tensor<Scalar>(params.weights.shape()), Tensor<Scalar>(params.bias.shape())};
  auto dw = grad.weights.matrix(g.out_channels, patch);
  auto& db = grad.bias.values();
  typename Tensor<Scalar>::RowMatrix cols(patch, out_area);
  const Index in_stride = g.in_channels * g.height * g.width;
  for (Index b = 0; b < g.batch; ++b) {
    typename Tensor<Scalar>::ConstMatrixMap up(upstream.data() + b * g.out_channels * out_area,
                                               g.out_channels, out_area);
    if (up.isZero(0)) continue;
    detail::im2col(input.data() + b * in_stride, g, cols.data());
    dw.noalias() += up * cols.transpose();
    db += up.rowwise().sum();
  }
  return grad;
}

template <typename Scalar>
struct Activation {
  Tensor<Scalar> output;
  Tensor<Scalar> mask;  // ReLU Jacobian diagonal; 0 at exactly 0
};

template <typename Scalar>
Activation<Scalar> relu(const Tensor<Scalar>& input) {
  if (input.empty()) throw ConfigError("relu of an empty tensor");
  Activation<Scalar> act{Tensor<Scalar>(input.shape()), Tensor<Scalar>(input.shape())};
  act.output.values() = input.values().cwiseMax(Scalar(0));
  act.mask.values() = (input.values().array() > Scalar(0)).template cast<Scalar>().matrix();
  return act;
}

// [B,C,H,W] -> [B,C] spatial mean.
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& input) {
  detail::require_rank(input, 4, "global_avg_pool input");
  const Index rows = input.dim(0) * input.dim(1);
  const Index area = input.dim(2) * input.dim(3);
  Tensor<Scalar> out({input.dim(0), input.dim(1)});
  out.values() = input.matrix(rows, area).rowwise().mean();
  return out;
}

}  // namespace asge
