#include "util.hpp"

#include <atomic>
#include <thread>

#include "asge/pipeline.hpp"

using namespace asge;

namespace {

struct Item {
  int id = 0;
  std::vector<int> trail;
};

std::function<std::optional<Item>()> counter(int n) {
  auto next = std::make_shared<int>(0);
  return [next, n]() -> std::optional<Item> {
    if (*next >= n) return std::nullopt;
    return Item{(*next)++, {}};
  };
}

}  // namespace

TEST_CASE("bounded queue") {
  BoundedQueue<int> q(2);
  CHECK(q.push(1));
  CHECK(q.push(2));
  std::atomic<bool> pushed{false};
  std::thread t([&] {
    q.push(3);
    pushed = true;
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  CHECK(!pushed);  // full
  CHECK(*q.pop() == 1);
  t.join();
  CHECK(pushed);
  q.close();
  CHECK(*q.pop() == 2);
  CHECK(*q.pop() == 3);
  CHECK(!q.pop());
  CHECK(!q.push(4));
}

TEST_CASE("items pass every stage in order") {
  for (std::size_t depth : {1u, 2u, 4u}) {
    std::vector<std::function<void(Item&)>> stages;
    std::vector<std::vector<int>> seen(3);
    for (int s = 0; s < 3; ++s) {
      stages.push_back([s, &seen](Item& it) {
        it.trail.push_back(s);
        seen[static_cast<std::size_t>(s)].push_back(it.id);
      });
    }
    std::vector<int> out;
    pipeline_execute<Item>(counter(50), stages, depth, [&](Item&& it) {
      CHECK(it.trail == std::vector<int>{0, 1, 2});
      out.push_back(it.id);
    });
    REQUIRE(out.size() == 50);
    for (int i = 0; i < 50; ++i) CHECK(out[static_cast<std::size_t>(i)] == i);
    for (const auto& s : seen) CHECK(s == out);
  }
}

TEST_CASE("single stage degenerates to sequential execution") {
  int sum = 0;
  const std::vector<std::function<void(Item&)>> stages{[&](Item& it) { sum += it.id; }};
  pipeline_execute<Item>(counter(10), stages, 1);
  CHECK(sum == 45);
}

TEST_CASE("stage failure is attributed") {
  const std::vector<std::function<void(Item&)>> stages{
      [](Item&) {}, [](Item& it) {
        if (it.id == 7) throw NumericError("boom");
      }};
  try {
    pipeline_execute<Item>(counter(100), stages, 2);
    FAIL("expected PipelineError");
  } catch (const PipelineError& e) {
    CHECK(e.stage() == 1);
    CHECK(std::string(e.what()).find("boom") != std::string::npos);
  }
  CHECK_THROWS_AS(pipeline_execute<Item>(counter(1), {}, 1), UsageError);
}
