#include "util.hpp"

#include "asge/network.hpp"

using namespace asge;
using namespace testutil;

namespace {

ArchSpec small_spec(Strategy strategy = Strategy::fusion) {
  ArchSpec spec;
  spec.in_channels = 1;
  spec.in_height = 8;
  spec.in_width = 8;
  spec.n_classes = 4;
  spec.strategy = strategy;
  LayerSpec a;
  a.out_channels = 4;
  LayerSpec b;
  b.out_channels = 6;
  b.pool = PoolSpec{};
  LayerSpec c;
  c.out_channels = 8;
  spec.layers = {a, b, c};
  return spec;
}

std::vector<int> labels(Index n, Index classes) {
  std::vector<int> t;
  for (Index i = 0; i < n; ++i) t.push_back(static_cast<int>(i % classes));
  return t;
}

}  // namespace

TEST_CASE("trace_geometry follows conv and pooling") {
  const std::vector<LayerGeometry> g = trace_geometry(small_spec());
  REQUIRE(g.size() == 3);
  CHECK(g[0].out_height == 8);
  CHECK(g[1].next_height == 4);
  CHECK(g[2].in_height == 4);
  CHECK(g[2].in_channels == 6);
  CHECK(g[0].plan.patches == 2);  // floor(8/4) = 2
  CHECK(g[1].plan.patches == 1);
  CHECK(g[2].plan.goodness_dim() == 8);
}

TEST_CASE("trace_geometry names the failing layer") {
  ArchSpec spec = small_spec();
  spec.layers[2].pool = PoolSpec{};
  spec.layers[2].kernel = 9;
  try {
    trace_geometry(spec);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).rfind("layer 3:", 0) == 0);
  }
  ArchSpec one = small_spec();
  one.layers.resize(1);
  CHECK_THROWS_AS(trace_geometry(one), ConfigError);
}

TEST_CASE("vgg8 layout") {
  const ArchSpec spec = vgg8_spec();
  const std::vector<LayerGeometry> g = trace_geometry(spec);
  REQUIRE(g.size() == 7);
  const Index patches[] = {4, 4, 2, 2, 1, 1, 1};
  const Index height[] = {32, 32, 16, 16, 8, 8, 8};
  for (int i = 0; i < 7; ++i) {
    CHECK(g[i].out_height == height[i]);
    CHECK(g[i].plan.patches == patches[i]);
  }
  CHECK(g[6].next_height == 4);
}

TEST_CASE("classifier sizes per strategy") {
  const ArchSpec vgg = vgg8_spec(3, 32, 32, 100);
  ArchSpec last = vgg, fusion = vgg, best = vgg;
  last.strategy = Strategy::last;
  best.strategy = Strategy::best;
  CHECK(classifier_input_dim(last) == 512);
  CHECK(classifier_input_dim(fusion) == 128 + 256 + 256 + 512 + 512 + 512);
  CHECK(classifier_input_dim(best) == 0);
  const Network<float> net = build_network<float>(best, 1);
  CHECK(net.classifier_param_count() == 0);
  CHECK(!net.classifier);
  // best-layer models repeat the sixth layer in the seventh slot
  CHECK(net.layers[6].spec == vgg.layers[5]);
}

TEST_CASE("build_network is seeded and zero-initializes the classifier") {
  const Network<double> a = build_network<double>(small_spec(), 5), b = build_network<double>(small_spec(), 5);
  const Network<double> c = build_network<double>(small_spec(), 6);
  CHECK(a.layers[1].params.weights == b.layers[1].params.weights);
  CHECK(a.layers[1].head == b.layers[1].head);
  CHECK(!(a.layers[1].params.weights == c.layers[1].params.weights));
  CHECK(a.classifier->weights.values().cwiseAbs().maxCoeff() == 0.0);
  CHECK(a.classifier->input_dim() == 6 + 8);
  // He-normal scale; VGG8 layer 5 has fan_in 256 * 9
  const Network<double> vgg = build_network<double>(vgg8_spec(), 3);
  const Tensor<double>& w = vgg.layers[4].params.weights;
  const double std_dev = std::sqrt(w.values().squaredNorm() / double(w.size()));
  CHECK(std_dev == doctest::Approx(std::sqrt(2.0 / (256 * 9))).epsilon(0.02));
}

TEST_CASE("layer step forwards the output of the pre-update parameters") {
  Network<double> net = build_network<double>(small_spec(), 9);
  const Tensor<double> x = random_tensor({6, 1, 8, 8}, 10);
  const std::vector<int> t = labels(6, 4);
  const LayerState<double> before = net.layers[0];
  const LayerOutput<double> expected = layer_infer(x, before);
  const LayerOutput<double> out = asge_layer_step(x, net.layers[0], t, 1e-2, OptimizerConfig{});
  CHECK(out.output == expected.output);
  CHECK(out.logits == expected.logits);
  CHECK(!(net.layers[0].params.weights == before.params.weights));
}

TEST_CASE("detach: deeper layers never influence shallower updates") {
  Network<double> a = build_network<double>(small_spec(), 11);
  Network<double> b = a;
  for (Index k = 0; k < b.layers[2].params.weights.size(); ++k) b.layers[2].params.weights[k] *= -3.0;
  b.classifier->weights.values().setConstant(0.7);
  const Tensor<double> x = random_tensor({8, 1, 8, 8}, 12);
  const std::vector<int> t = labels(8, 4);
  for (int step = 0; step < 3; ++step) {
    forward_train(a, x, t, 1e-2, OptimizerConfig{});
    forward_train(b, x, t, 1e-2, OptimizerConfig{});
  }
  CHECK(a.layers[0].params.weights == b.layers[0].params.weights);
  CHECK(a.layers[1].params.weights == b.layers[1].params.weights);
  CHECK(a.layers[1].params.bias == b.layers[1].params.bias);
  CHECK(!(a.layers[2].params.weights == b.layers[2].params.weights));
}

TEST_CASE("layer_gradients leaves parameters untouched and matches the trained step") {
  Network<double> net = build_network<double>(small_spec(), 13);
  const Network<double> copy = net;
  const Tensor<double> x = random_tensor({4, 1, 8, 8}, 14);
  const std::vector<int> t = labels(4, 4);
  const auto grads = layer_gradients(net, x, t);
  CHECK(net.layers[2].params.weights == copy.layers[2].params.weights);
  const TrainReport<double> r = forward_train(net, x, t, 0.0, OptimizerConfig{});
  for (std::size_t l = 0; l < 3; ++l) CHECK(r.layer_loss[l] == doctest::Approx(grads[l].loss));
}

TEST_CASE("classifier training reduces its loss") {
  Network<double> net = build_network<double>(small_spec(Strategy::last), 15);
  const Tensor<double> x = random_tensor({16, 1, 8, 8}, 16);
  const std::vector<int> t = labels(16, 4);
  OptimizerConfig cfg;
  const double first = *forward_train(net, x, t, 1e-2, cfg).classifier_loss;
  CHECK(first == doctest::Approx(std::log(4.0)));  // zero-initialized classifier
  double last = first;
  for (int i = 0; i < 30; ++i) last = *forward_train(net, x, t, 1e-2, cfg).classifier_loss;
  CHECK(last < first);
}

TEST_CASE("best-layer prediction exits early") {
  Network<double> net = build_network<double>(small_spec(Strategy::best), 17);
  const Tensor<double> x = random_tensor({5, 1, 8, 8}, 18);
  CHECK_THROWS_AS(predict_best(net, x), UsageError);
  net.best_layer = 1;
  InferenceStats stats;
  const std::vector<int> pred = predict_best(net, x, std::nullopt, &stats);
  CHECK(stats.layers_executed == 2);
  const InferenceResult<double> full = infer(net, x);
  CHECK(pred == argmax_rows(full.layer_logits[1]));
  CHECK(full.scores.empty());
}

TEST_CASE("predict dispatch rejects the wrong strategy") {
  const Network<double> fusion = build_network<double>(small_spec(Strategy::fusion), 19);
  const Tensor<double> x = random_tensor({2, 1, 8, 8}, 20);
  CHECK(predict(fusion, x).size() == 2);
  CHECK_THROWS_AS(predict_last(fusion, x), UsageError);
  CHECK_THROWS_AS(predict_best(fusion, x, 1), UsageError);
}

TEST_CASE("classifier features: last is the final GAP, fusion concatenates layers 2..L") {
  const std::vector<Tensor<double>> gaps{Tensor<double>({1, 2}, {1, 2}), Tensor<double>({1, 1}, {3}),
                                         Tensor<double>({1, 2}, {4, 5})};
  CHECK(classifier_features<double>(Strategy::last, gaps) == Tensor<double>({1, 2}, {4, 5}));
  CHECK(classifier_features<double>(Strategy::fusion, gaps) == Tensor<double>({1, 3}, {3, 4, 5}));
  CHECK_THROWS_AS(classifier_features<double>(Strategy::best, gaps), UsageError);
}

TEST_CASE("select_best_layer") {
  const std::vector<double> acc{0.9, 0.5, 0.8, 0.8, 0.7};
  CHECK(select_best_layer(acc) == 0);
  CHECK(select_best_layer(acc, 1) == 2);  // tie between layers 3 and 4 goes to 3
  CHECK(select_best_layer(std::vector<double>{0.3}, 1) == 0);
  CHECK_THROWS_AS(select_best_layer(std::vector<double>{}), UsageError);
}
