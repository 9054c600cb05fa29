#include "util.hpp"

#include "asge/config.hpp"

using namespace asge;
using namespace testutil;

namespace {

Json minimal() {
  return Json::parse(R"({"dataset": {"name": "mnist", "train_images": "a", "train_labels": "b",
                                      "test_images": "c", "test_labels": "d"}})");
}

std::string field_of(const Json& doc) {
  try {
    parse_config(doc, {}, false);
  } catch (const FieldError& e) {
    return e.field();
  }
  return "";
}

}  // namespace

TEST_CASE("defaults follow the MNIST protocol") {
  const RunConfig c = parse_config(minimal(), {}, false);
  CHECK(c.dataset.val_count == 10000);
  CHECK(c.training.optimizer.kind == OptimizerKind::adamw);
  CHECK(c.training.optimizer.weight_decay == 1e-3);
  CHECK(c.training.lr_max == 2e-4);
  CHECK(c.training.lr_min == 1e-5);
  CHECK(c.training.batch_size == 128);
  CHECK(c.arch.in_channels == 1);
  CHECK(c.arch.in_height == 28);
  CHECK(c.arch.n_classes == 10);
  CHECK(c.dataset.augmentation.pad_crop == 0);
}

TEST_CASE("cifar defaults") {
  Json doc = Json::parse(R"({"dataset": {"name": "cifar100", "train_batches": ["x"], "test_batches": ["y"]}})");
  const RunConfig c = parse_config(doc, {}, false);
  CHECK(c.dataset.val_count == 5000);
  CHECK(c.arch.n_classes == 100);
  CHECK(c.arch.in_channels == 3);
  CHECK(c.dataset.augmentation.pad_crop == 4);
}

TEST_CASE("sgd gets its own weight decay default") {
  Json doc = minimal();
  doc["training"]["optimizer"] = "sgd_momentum";
  const RunConfig c = parse_config(doc, {}, false);
  CHECK(c.training.optimizer.kind == OptimizerKind::sgd_momentum);
  CHECK(c.training.optimizer.weight_decay == 1e-4);
  CHECK(c.training.optimizer.momentum == 0.9);
}

TEST_CASE("errors name the offending field") {
  SUBCASE("missing dataset path") {
    TempDir dir("cfgmissing");
    for (const char* f : {"a", "c", "d"}) write_text(dir / f, "x");
    Json doc = minimal();
    doc["dataset"].erase("train_labels");
    CHECK(field_of(doc) == "");  // only checked when paths are verified
    try {
      parse_config(doc, dir.path, true);
      FAIL("expected FieldError");
    } catch (const FieldError& e) {
      CHECK(e.field() == "dataset.train_labels");
    }
  }
  SUBCASE("unknown key") {
    Json doc = minimal();
    doc["training"]["learning_rate"] = 0.1;
    CHECK(field_of(doc) == "training.learning_rate");
  }
  SUBCASE("wrong type") {
    Json doc = minimal();
    doc["training"]["epochs"] = "five";
    CHECK(field_of(doc) == "training.epochs");
  }
  SUBCASE("bad layer") {
    Json doc = minimal();
    doc["arch"]["layers"] = Json::parse(R"([{"out_channels": 8}, {"out_channels": 0}])");
    CHECK(field_of(doc) == "arch.layers[1].out_channels");
  }
  SUBCASE("negative alpha") {
    Json doc = minimal();
    doc["arch"]["alpha"] = -1;
    CHECK(field_of(doc) == "arch.alpha");
  }
  SUBCASE("no dataset section") { CHECK(field_of(Json::object()) == "dataset"); }
}

TEST_CASE("existing files pass the path check") {
  TempDir dir("cfg");
  for (const char* f : {"a", "b", "c", "d"}) write_text(dir / f, "x");
  const RunConfig c = parse_config(minimal(), dir.path, true);
  CHECK(c.dataset.train_images == (dir / "a").string());
}

TEST_CASE("overrides") {
  Json doc = minimal();
  apply_override(doc, "training.seed=7");
  apply_override(doc, "arch.strategy=best");
  apply_override(doc, "output.dir=runs/x");
  const RunConfig c = parse_config(doc, {}, false);
  CHECK(c.training.seed == 7);
  CHECK(c.arch.strategy == Strategy::best);
  CHECK(c.output.dir == "runs/x");
  CHECK_THROWS_AS(apply_override(doc, "novalue"), ConfigError);
}

TEST_CASE("materialized config round trips") {
  Json doc = minimal();
  doc["arch"]["layers"] = Json::parse(R"([{"out_channels": 8, "pool": {"kind": "avg"}}, {"out_channels": 16}])");
  doc["training"]["epochs"] = 3;
  const RunConfig c = parse_config(doc, {}, false);
  const Json once = to_json(c);
  const Json twice = to_json(parse_config(once, {}, false));
  CHECK(once == twice);
  CHECK(arch_from_json(arch_to_json(c.arch)) == c.arch);
}
