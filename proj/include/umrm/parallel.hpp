#pragma once

#include <cstdlib>
#include <thread>
#include <vector>

namespace umrm {

// Intra-stage parallelism cap. Defaults to 1 so runs are single-core unless
// the user opts in via UMRM_THREADS.
inline size_t thread_cap() {
  const char* env = std::getenv("UMRM_THREADS");
  if (!env) return 1;
  long v = std::atol(env);
  return v < 1 ? 1 : static_cast<size_t>(v);
}

// Index-sharded parallel loop. Work items must be independent and write only
// to their own slots; results are then identical to the sequential order.
template <typename Fn>
void parallel_for(size_t n, Fn&& fn) {
  const size_t workers = std::min(thread_cap(), n);
  if (workers <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      for (size_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (std::thread& t : pool) t.join();
}

}  // namespace umrm
