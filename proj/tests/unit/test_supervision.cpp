#include "util.hpp"

#include "asge/supervision.hpp"

using namespace asge;
using namespace testutil;

TEST_CASE("projection head: seeded, fixed, JL-scaled") {
  const ProjectionHead<double> a(42, 512, 100), b(42, 512, 100), c(43, 512, 100);
  CHECK(a == b);
  CHECK(!(a == c));
  CHECK(a.weights().shape() == Shape{512, 100});
  CHECK(a.bias().shape() == Shape{1, 100});
  // sample std of the entries is 1/sqrt(N)
  const double n = static_cast<double>(a.weights().size());
  const double mean = a.weights().values().mean();
  const double var = (a.weights().values().array() - mean).square().sum() / (n - 1);
  CHECK(std::sqrt(var) == doctest::Approx(0.1).epsilon(0.02));
  CHECK(std::abs(mean) < 0.005);
}

TEST_CASE("projection preserves squared norms on average") {
  const ProjectionHead<double> head(7, 512, 100);
  Rng rng(8);
  double ratio_sum = 0.0;
  for (int t = 0; t < 1000; ++t) {
    Tensor<double> g({1, 512});
    for (Index k = 0; k < 512; ++k) g[k] = std::abs(rng.normal());
    Tensor<double> gw({1, 100});
    gw.matrix(1, 100) = g.matrix(1, 512) * head.weights().matrix(512, 100);
    ratio_sum += gw.values().squaredNorm() / g.values().squaredNorm();
  }
  const double mean_ratio = ratio_sum / 1000.0;
  CHECK(mean_ratio >= 0.9);
  CHECK(mean_ratio <= 1.1);
}

TEST_CASE("project adds the bias per sample") {
  const ProjectionHead<double> head(1, 3, 2);
  const Tensor<double> zero({4, 3});
  const Tensor<double> a = project(head, zero);
  for (Index b = 0; b < 4; ++b)
    for (Index k = 0; k < 2; ++k) CHECK(a.at(b, k) == head.bias()[k]);
  CHECK_THROWS_AS(project(head, Tensor<double>({1, 4})), ConfigError);
}

TEST_CASE("softmax cross entropy") {
  SUBCASE("uniform logits give ln N") {
    const Tensor<double> z({3, 10}, 0.25);
    const std::vector<int> t{0, 4, 9};
    CHECK(softmax_cross_entropy(z, t).loss == doctest::Approx(std::log(10.0)));
  }
  SUBCASE("hand value") {
    const Tensor<double> z({1, 2}, {0.0, std::log(3.0)});
    const std::vector<int> t{1};
    const LossResult<double> r = softmax_cross_entropy(z, t);
    CHECK(r.loss == doctest::Approx(-std::log(0.75)));
    CHECK(r.grad[0] == doctest::Approx(0.25));
    CHECK(r.grad[1] == doctest::Approx(-0.25));
  }
  SUBCASE("large logits stay finite") {
    const Tensor<double> z({1, 3}, {1000.0, 0.0, -1000.0});
    const std::vector<int> t{2};
    const LossResult<double> r = softmax_cross_entropy(z, t);
    CHECK(std::isfinite(r.loss));
    CHECK(r.loss == doctest::Approx(2000.0));
  }
  SUBCASE("gradient vs finite differences, batch mean") {
    Tensor<double> z = random_tensor({5, 7}, 3, 2.0);
    const std::vector<int> t{0, 6, 3, 3, 1};
    const LossResult<double> r = softmax_cross_entropy(z, t);
    auto f = [&] { return softmax_cross_entropy(z, t).loss; };
    for (Index k = 0; k < z.size(); ++k) CHECK(rel_err(r.grad[k], central_diff(z, k, f)) < 1e-5);
  }
  SUBCASE("bad targets") {
    const Tensor<double> z({2, 3});
    CHECK_THROWS_AS(softmax_cross_entropy(z, std::vector<int>{0, 3}), InputError);
    CHECK_THROWS_AS(softmax_cross_entropy(z, std::vector<int>{0, -1}), InputError);
    CHECK_THROWS_AS(softmax_cross_entropy(z, std::vector<int>{0}), InputError);
  }
}

TEST_CASE("argmax_rows breaks ties toward the lower index") {
  const Tensor<double> z({2, 3}, {1, 5, 5, 2, 2, 0});
  CHECK(argmax_rows(z) == std::vector<int>{1, 0});
}

TEST_CASE("layer_local_gradient: full chain vs finite differences") {
  ConvParams<double> p;
  p.weights = random_tensor({4, 2, 3, 3}, 51, 0.4);
  p.bias = random_tensor({4}, 52, 0.1);
  p.padding = 1;
  const Tensor<double> x = random_tensor({3, 2, 6, 6}, 53);
  const PartitionPlan plan = make_plan(4, 6, 6, 3);
  const ProjectionHead<double> head(54, plan.goodness_dim(), 10);
  const std::vector<int> t{2, 9, 4};
  const LocalGradient<double> lg = layer_local_gradient(x, p, head, plan, t);
  auto loss = [&] {
    return local_ce_loss(project(head, spatial_goodness(relu(conv2d_forward(x, p)).output, plan)), t).loss;
  };
  CHECK(lg.loss == doctest::Approx(loss()));
  double worst = 0.0;
  for (Index k = 0; k < p.weights.size(); ++k) worst = std::max(worst, rel_err(lg.grad.weights[k], central_diff(p.weights, k, loss)));
  for (Index k = 0; k < p.bias.size(); ++k) worst = std::max(worst, rel_err(lg.grad.bias[k], central_diff(p.bias, k, loss)));
  CHECK(worst <= 1e-4);
}

TEST_CASE("gradient hook sees the feature gradient before masking") {
  ConvParams<double> p;
  p.weights = random_tensor({2, 1, 3, 3}, 61);
  p.bias = Tensor<double>({2});
  p.padding = 1;
  const Tensor<double> x = random_tensor({2, 1, 4, 4}, 62);
  const PartitionPlan plan = make_plan(2, 4, 4, 2);
  const ProjectionHead<double> head(63, plan.goodness_dim(), 3);
  const std::vector<int> t{0, 2};
  GradientHooks<double> hooks;
  hooks.on_feature_grad = [](Tensor<double>& g) { g.values() *= 2.0; };
  const LocalGradient<double> plain = layer_local_gradient(x, p, head, plan, t);
  const LocalGradient<double> doubled = layer_local_gradient(x, p, head, plan, t, &hooks);
  CHECK((doubled.grad.weights.values() - 2.0 * plain.grad.weights.values()).cwiseAbs().maxCoeff() < 1e-12);
}
