#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace spatlas {

/// Number of worker threads used by parallel_for. 0 means hardware concurrency.
inline unsigned& thread_count() {
  static unsigned n = 0;
  return n;
}

inline unsigned resolved_thread_count() {
  unsigned n = thread_count();
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

namespace detail {

// True on worker threads; nested parallel_for calls then run inline.
inline bool& in_worker() {
  thread_local bool flag = false;
  return flag;
}

}  // namespace detail

/// Runs fn(i) for i in [0, n). Indices are split into contiguous static
/// blocks, so work assignment does not depend on scheduling. The first
/// exception thrown by any worker is rethrown on the caller.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = detail::in_worker() ? 1 : std::min<std::size_t>(resolved_thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = n * w / workers;
    const std::size_t end = n * (w + 1) / workers;
    pool.emplace_back([&, begin, end] {
      detail::in_worker() = true;
      try {
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace spatlas
