#include "util.hpp"

using namespace asge;
using namespace testutil;

TEST_CASE("conv2d_forward matches the direct loop") {
  struct Case { Index B, C, H, W, O, K, stride, pad; };
  for (Case c : {Case{2, 3, 7, 6, 4, 3, 1, 1}, Case{1, 2, 8, 8, 3, 3, 2, 1}, Case{3, 1, 5, 5, 2, 1, 1, 0},
                 Case{2, 2, 9, 7, 5, 5, 1, 2}, Case{1, 4, 6, 6, 2, 3, 3, 0}}) {
    ConvParams<double> p;
    p.weights = random_tensor({c.O, c.C, c.K, c.K}, 1);
    p.bias = random_tensor({c.O}, 2);
    p.stride = c.stride;
    p.padding = c.pad;
    const Tensor<double> x = random_tensor({c.B, c.C, c.H, c.W}, 3);
    const Tensor<double> y = conv2d_forward(x, p);
    const Tensor<double> ref = naive_conv(x, p.weights, p.bias, c.stride, c.pad);
    REQUIRE(y.shape() == ref.shape());
    CHECK((y.values() - ref.values()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("conv2d_forward: 1x1 identity kernel copies the input") {
  ConvParams<double> p;
  p.weights = Tensor<double>({2, 2, 1, 1}, {1, 0, 0, 1});
  p.bias = Tensor<double>({2});
  p.padding = 0;
  const Tensor<double> x = random_tensor({1, 2, 4, 4}, 9);
  CHECK(conv2d_forward(x, p) == x);
}

TEST_CASE("conv2d_forward rejects mismatched channels") {
  ConvParams<double> p;
  p.weights = Tensor<double>({2, 3, 3, 3});
  p.bias = Tensor<double>({2});
  CHECK_THROWS_AS(conv2d_forward(Tensor<double>({1, 2, 5, 5}), p), ConfigError);
}

TEST_CASE("conv2d_weight_grad matches finite differences of a linear functional") {
  ConvParams<double> p;
  p.weights = random_tensor({3, 2, 3, 3}, 11);
  p.bias = random_tensor({3}, 12);
  p.stride = 2;
  p.padding = 1;
  const Tensor<double> x = random_tensor({2, 2, 7, 7}, 13);
  const Tensor<double> up = random_tensor(conv2d_forward(x, p).shape(), 14);
  auto objective = [&] { return conv2d_forward(x, p).values().dot(up.values()); };
  const ConvGrad<double> g = conv2d_weight_grad(x, up, p);
  for (Index k = 0; k < p.weights.size(); ++k) {
    CHECK(rel_err(g.weights[k], central_diff(p.weights, k, objective)) < 1e-7);
  }
  for (Index k = 0; k < p.bias.size(); ++k) {
    CHECK(rel_err(g.bias[k], central_diff(p.bias, k, objective)) < 1e-7);
  }
}

TEST_CASE("relu mask and global average pool") {
  const Tensor<double> x({1, 2, 1, 2}, {-1.0, 2.0, 0.0, 4.0});
  const Activation<double> a = relu(x);
  CHECK(a.output == Tensor<double>({1, 2, 1, 2}, {0.0, 2.0, 0.0, 4.0}));
  CHECK(a.mask == Tensor<double>({1, 2, 1, 2}, {0.0, 1.0, 0.0, 1.0}));
  CHECK(global_avg_pool(a.output) == Tensor<double>({1, 2}, {1.0, 2.0}));
}

TEST_CASE("tensor basics") {
  Tensor<float> t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.at(1, 2) == 6);
  CHECK(t.reshaped({3, 2}).at(2, 1) == 6);
  CHECK(t.cast<double>().at(0, 1) == 2.0);
  CHECK_THROWS(t.reshaped({4, 2}));
  CHECK(Tensor<float>().empty());
}
