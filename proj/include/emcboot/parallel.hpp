#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace emcboot {

/// Worker count used when a caller passes 0: $EMCBOOT_WORKERS, else the
/// hardware concurrency.
inline unsigned default_workers() {
  if (const char* env = std::getenv("EMCBOOT_WORKERS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline unsigned resolve_workers(unsigned workers) { return workers == 0 ? default_workers() : workers; }

/// Runs fn(task) for task in [0, n_tasks) on up to `workers` threads.
/// Tasks must write disjoint state. The first exception is rethrown.
template <class Fn>
void parallel_for(std::size_t n_tasks, unsigned workers, Fn&& fn) {
  workers = static_cast<unsigned>(std::min<std::size_t>(resolve_workers(workers), n_tasks));
  if (workers <= 1) {
    for (std::size_t t = 0; t < n_tasks; ++t) fn(t);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t t = next++; t < n_tasks; t = next++) {
          try {
            fn(t);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
            next = n_tasks;
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

/// Ordered reduction over fixed chunks. Each chunk is produced into its own
/// partial by produce(chunk, partial) and folded by merge(partial) in chunk
/// order, so the result is bit-identical for any worker count.
template <class Partial, class Make, class Produce, class Merge>
void ordered_reduce(std::size_t n_chunks, unsigned workers, Make&& make, Produce&& produce,
                    Merge&& merge) {
  workers = static_cast<unsigned>(std::max<std::size_t>(
      1, std::min<std::size_t>(resolve_workers(workers), n_chunks)));
  std::vector<Partial> partials;
  partials.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) partials.push_back(make());
  for (std::size_t base = 0; base < n_chunks; base += workers) {
    const std::size_t wave = std::min<std::size_t>(workers, n_chunks - base);
    parallel_for(wave, workers, [&](std::size_t i) { produce(base + i, partials[i]); });
    for (std::size_t i = 0; i < wave; ++i) merge(partials[i]);
  }
}

}  // namespace emcboot
