#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace spackle {

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(work_index, worker_index) for work_index in [0, count). Work items
// are claimed from an atomic counter, so the assignment of items to workers
// is not deterministic — callers must make results independent of it (each
// item writes to its own slot; reductions happen afterwards in item order).
template <typename Fn>
void parallel_for(int count, int threads, Fn&& fn) {
  threads = std::min(resolve_threads(threads), count);
  if (count <= 0) return;
  if (threads <= 1) {
    for (int i = 0; i < count; ++i) fn(i, 0);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto worker = [&](int worker_index) {
    try {
      while (true) {
        int i = next.fetch_add(1);
        if (i >= count || failed.load()) break;
        fn(i, worker_index);
      }
    } catch (...) {
      if (!failed.exchange(true)) error = std::current_exception();
    }
  };
  pool.reserve(static_cast<std::size_t>(threads));
  for (int w = 0; w < threads; ++w) pool.emplace_back(worker, w);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace spackle
