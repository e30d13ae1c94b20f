#ifndef RPG_PARALLEL_HPP_
#define RPG_PARALLEL_HPP_

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

namespace rpg {

// Worker-pool size. RPG_WORKERS overrides; default is hardware concurrency.
inline int WorkerCount() {
  if (const char* env = std::getenv("RPG_WORKERS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. Index ranges are
// contiguous per worker; the first exception thrown is rethrown.
template <typename Fn>
void ParallelFor(int64_t n, int workers, Fn&& fn) {
  workers = static_cast<int>(std::clamp<int64_t>(workers, 1, std::max<int64_t>(n, 1)));
  if (workers == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    const int64_t begin = n * w / workers;
    const int64_t end = n * (w + 1) / workers;
    threads.emplace_back([&, w, begin, end] {
      try {
        for (int64_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace rpg

#endif  // RPG_PARALLEL_HPP_
