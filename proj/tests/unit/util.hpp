#pragma once

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include "asge/rng.hpp"
#include "asge/tensor.hpp"

namespace testutil {

using asge::Index;
using asge::Shape;
using asge::Tensor;

template <typename Scalar = double>
Tensor<Scalar> random_tensor(const Shape& shape, std::uint64_t seed, double stddev = 1.0, double mean = 0.0) {
  asge::Rng rng(seed);
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(rng.normal(mean, stddev));
  return t;
}

template <typename Scalar = double>
Tensor<Scalar> uniform_tensor(const Shape& shape, std::uint64_t seed, double lo, double hi) {
  asge::Rng rng(seed);
  Tensor<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(lo + (hi - lo) * rng.uniform());
  return t;
}

// Direct 6-loop convolution with zero padding.
inline Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                 Index stride, Index pad) {
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index O = w.dim(0), K = w.dim(2);
  const Index OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - K) / stride + 1;
  Tensor<double> y({B, O, OH, OW});
  for (Index n = 0; n < B; ++n)
    for (Index o = 0; o < O; ++o)
      for (Index i = 0; i < OH; ++i)
        for (Index j = 0; j < OW; ++j) {
          double acc = b[o];
          for (Index c = 0; c < C; ++c)
            for (Index u = 0; u < K; ++u)
              for (Index v = 0; v < K; ++v) {
                const Index r = i * stride + u - pad, s = j * stride + v - pad;
                if (r < 0 || s < 0 || r >= H || s >= W) continue;
                acc += w.at(o, c, u, v) * x.at(n, c, r, s);
              }
          y.at(n, o, i, j) = acc;
        }
  return y;
}

// Central difference of f with respect to t[k].
inline double central_diff(Tensor<double>& t, Index k, const std::function<double()>& f, double h = 1e-6) {
  const double keep = t[k];
  t[k] = keep + h;
  const double up = f();
  t[k] = keep - h;
  const double down = f();
  t[k] = keep;
  return (up - down) / (2 * h);
}

inline double rel_err(double a, double b) {
  const double s = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / s;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("asge-test-" + tag + "-" + std::to_string(asge::Rng(std::hash<std::string>{}(tag) ^ reinterpret_cast<std::uintptr_t>(this)).next_u64()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

}  // namespace testutil
