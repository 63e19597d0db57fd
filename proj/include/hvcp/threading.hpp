#pragma once

#include <cstdlib>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "hvcp/core.hpp"

namespace hvcp {

// Worker count: HVCP_THREADS if set, otherwise hardware concurrency.
inline std::size_t thread_count() {
  if (const char* env = std::getenv("HVCP_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    check(end && *end == '\0' && v >= 1, "HVCP_THREADS must be a positive integer, got '" +
                                             std::string(env) + "'");
    return static_cast<std::size_t>(v);
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc ? hc : 1;
}

// Runs fn(i) for i in [0,n) split into contiguous chunks, one per worker.
// Work assignment depends only on (n, workers), so any result that is written
// to disjoint slots is identical for every worker count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                         std::size_t workers = 0) {
  if (workers == 0) workers = thread_count();
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  if (workers > n) workers = n;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    std::size_t lo = w * chunk;
    std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace hvcp
