#include "util.hpp"

#include <map>
#include <sstream>

#include "asge/diagnostics.hpp"

using namespace asge;
using namespace testutil;

TEST_CASE("gradcheck passes on the reference network") {
  const GradcheckReport r = gradcheck(GradcheckOptions{});
  REQUIRE(r.layers.size() == 2);
  CHECK(r.pass());
  for (const auto& l : r.layers) {
    CHECK(l.max_error() <= 1e-4);
    CHECK(l.parameters > 0);
  }
  CHECK(r.layers[0].parameters == 4 * 3 * 9 + 4);
  CHECK(r.layers[1].parameters == 8 * 4 * 9 + 8);
}

TEST_CASE("gradcheck catches a corrupted layer") {
  for (Index layer : {0, 1}) {
    GradcheckOptions o;
    o.corrupt_layer = layer;
    const GradcheckReport r = gradcheck(o);
    CHECK(!r.pass());
    CHECK(!r.layers[static_cast<std::size_t>(layer)].pass);
    CHECK(r.layers[static_cast<std::size_t>(1 - layer)].pass);
    CHECK(r.layers[static_cast<std::size_t>(layer)].max_error() > 1e-3);
    CHECK(!r.layers[static_cast<std::size_t>(layer)].worst_parameter.empty());
  }
}

TEST_CASE("gradcheck on zero inputs") {
  GradcheckOptions o;
  o.zero_input = true;
  CHECK(gradcheck(o).pass());
}

TEST_CASE("gradcheck refuses wide layers") {
  GradcheckOptions o;
  o.spec.layers[1].out_channels = 9;
  CHECK_THROWS_AS(gradcheck(o), UsageError);
}

TEST_CASE("gradient error definition") {
  CHECK(gradient_error(1.0, 1.0) == 0.0);
  CHECK(gradient_error(1e-10, -1e-10) == 0.0);
  CHECK(gradient_error(2.0, 1.0) == doctest::Approx(0.5));
  CHECK(gradient_error(-1.0, 1.0) == doctest::Approx(2.0));
}

namespace {

ArchSpec dump_spec() {
  ArchSpec spec;
  spec.in_channels = 1;
  spec.in_height = 8;
  spec.in_width = 8;
  spec.n_classes = 3;
  LayerSpec a;
  a.out_channels = 2;
  a.pool = PoolSpec{};
  LayerSpec b;
  b.out_channels = 4;
  spec.layers = {a, b};
  return spec;
}

std::vector<std::vector<std::string>> rows(const std::string& csv) {
  std::vector<std::vector<std::string>> out;
  std::istringstream in(csv);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    out.push_back(cells);
  }
  return out;
}

}  // namespace

TEST_CASE("goodness dump layout") {
  const Network<float> net = build_network<float>(dump_spec(), 1);
  const Tensor<float> x = random_tensor<float>({3, 1, 8, 8}, 2);
  std::ostringstream csv;
  goodness_dump(net, x, 0, true, csv);
  const auto r = rows(csv.str());
  REQUIRE(!r.empty());
  CHECK(r[0] == std::vector<std::string>{"layer", "variant", "channel", "patch_i", "patch_j", "value"});
  std::map<std::string, int> count;
  for (std::size_t i = 1; i < r.size(); ++i) {
    REQUIRE(r[i].size() == 6);
    CHECK(r[i][0] == "1");
    ++count[r[i][1]];
  }
  const PartitionPlan& plan = net.layers[0].plan;
  CHECK(count["origin"] == 3 * plan.channels * plan.patches * plan.patches);
  CHECK(count["rms"] > 0);
  CHECK(count["avg"] == count["rms"]);
  CHECK(count["max"] == count["rms"]);

  std::ostringstream origin_only;
  goodness_dump(net, x, 1, false, origin_only);
  CHECK(rows(origin_only.str()).size() == 1 + static_cast<std::size_t>(3 * net.layers[1].plan.goodness_dim()));
  std::ostringstream sink;
  CHECK_THROWS_AS(goodness_dump(net, x, 1, true, sink), UsageError);
  CHECK_THROWS_AS(goodness_dump(net, x, 2, false, sink), UsageError);
}

TEST_CASE("constant maps give identical goodness under every pooling") {
  // A 1x1 conv with zero weights and bias 0.7 makes every
  // post-ReLU value 0.7, so every variant sees energy 0.49.
  ArchSpec spec = dump_spec();
  spec.layers[0].kernel = 1;
  spec.layers[0].padding = 0;
  Network<float> net = build_network<float>(spec, 3);
  net.layers[0].params.weights.values().setZero();
  net.layers[0].params.bias.values().setConstant(0.7f);
  std::ostringstream csv;
  goodness_dump(net, random_tensor<float>({2, 1, 8, 8}, 4), 0, true, csv);
  const auto r = rows(csv.str());
  for (std::size_t i = 1; i < r.size(); ++i) CHECK(std::stod(r[i][5]) == doctest::Approx(0.49).epsilon(1e-6));
}
