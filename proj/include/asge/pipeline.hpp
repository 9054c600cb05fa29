#pragma once

// Layer-parallel execution: one worker thread per stage, bounded SPSC queues
// between neighbours. Items move through the stages in order, so stage k works
// on item b while stage k+1 works on item b-1.

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "asge/errors.hpp"

namespace asge {

template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

  // False when the queue was closed before the item could be enqueued.
  bool push(T item) {
    std::unique_lock lock(mutex_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  // Empty once the queue is closed and drained.
  std::optional<T> pop() {
    std::unique_lock lock(mutex_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  std::size_t capacity() const noexcept { return capacity_; }

 private:
  std::size_t capacity_;
  std::deque<T> items_;
  bool closed_ = false;
  std::mutex mutex_;
  std::condition_variable not_empty_;
  std::condition_variable not_full_;
};

// Error raised when a stage worker throws; names the stage.
class PipelineError : public Error {
 public:
  PipelineError(std::size_t stage, const std::string& what)
      : Error("pipeline-error", "stage " + std::to_string(stage) + ": " + what), stage_(stage) {}
  std::size_t stage() const noexcept { return stage_; }

 private:
  std::size_t stage_;
};

// Pulls items from `source` until it returns nullopt, runs every stage on each
// item in order, and hands finished items to `sink` on the calling thread.
// With a single stage and depth 1 this is ordinary sequential execution with
// one item of lookahead.
template <typename Item>
void pipeline_execute(const std::function<std::optional<Item>()>& source,
                      const std::vector<std::function<void(Item&)>>& stages,
                      std::size_t depth, const std::function<void(Item&&)>& sink = {}) {
  const std::size_t n = stages.size();
  if (n == 0) throw UsageError("pipeline needs at least one stage");
  // queues[0] feeds stage 0; queues[n] collects finished items.
  std::vector<std::unique_ptr<BoundedQueue<Item>>> queues;
  for (std::size_t i = 0; i <= n; ++i) queues.push_back(std::make_unique<BoundedQueue<Item>>(depth));

  std::mutex error_mutex;
  std::exception_ptr first_error;
  std::size_t failed_stage = 0;
  bool source_failed = false;
  auto fail = [&](std::size_t stage, std::exception_ptr e, bool from_source) {
    {
      std::lock_guard lock(error_mutex);
      if (!first_error) {
        first_error = e;
        failed_stage = stage;
        source_failed = from_source;
      }
    }
    for (auto& q : queues) q->close();
  };

  std::vector<std::thread> workers;
  workers.emplace_back([&] {
    try {
      while (auto item = source()) {
        if (!queues[0]->push(std::move(*item))) return;
      }
    } catch (...) {
      fail(0, std::current_exception(), true);
    }
    queues[0]->close();
  });
  for (std::size_t s = 0; s < n; ++s) {
    workers.emplace_back([&, s] {
      try {
        while (auto item = queues[s]->pop()) {
          stages[s](*item);
          if (!queues[s + 1]->push(std::move(*item))) return;
        }
      } catch (...) {
        fail(s, std::current_exception(), false);
      }
      queues[s + 1]->close();
    });
  }
  try {
    while (auto item = queues[n]->pop()) {
      if (sink) sink(std::move(*item));
    }
  } catch (...) {
    fail(n, std::current_exception(), false);
  }
  for (auto& w : workers) w.join();

  if (first_error) {
    try {
      std::rethrow_exception(first_error);
    } catch (const std::exception& e) {
      if (source_failed) throw PipelineError(0, std::string("source: ") + e.what());
      throw PipelineError(failed_stage, e.what());
    } catch (...) {
      throw PipelineError(failed_stage, "unknown exception");
    }
  }
}

}  // namespace asge
