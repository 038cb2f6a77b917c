#pragma once

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

#include "st/tensor.hpp"

namespace st {

// Runs fn(i) for i in [0, n). Each item must write only to its own
// preallocated slot; reductions over the slots happen after the join, in
// index order, so results do not depend on the thread count.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
  require(threads >= 1, "parallel", "thread count must be >= 1");
  if (threads == 1 || n <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  const int workers = std::min(threads, n);
  pool.reserve(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  for (auto& th : pool) th.join();
}

}  // namespace st
