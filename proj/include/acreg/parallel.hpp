#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace acreg {

namespace detail {

inline unsigned default_thread_cap() {
  if (const char* env = std::getenv("ACREG_THREADS")) {
    try {
      const long n = std::stol(env);
      if (n >= 1) return static_cast<unsigned>(n);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline std::atomic<unsigned>& thread_cap_storage() {
  static std::atomic<unsigned> cap{default_thread_cap()};
  return cap;
}

inline bool& in_parallel_region() {
  thread_local bool flag = false;
  return flag;
}

struct ParallelRegionGuard {
  bool previous;
  ParallelRegionGuard() : previous(in_parallel_region()) { in_parallel_region() = true; }
  ~ParallelRegionGuard() { in_parallel_region() = previous; }
};

} // namespace detail

/// Upper bound on worker threads; initialised from ACREG_THREADS.
inline unsigned thread_cap() { return detail::thread_cap_storage().load(); }

inline void set_thread_cap(unsigned n) { detail::thread_cap_storage().store(std::max(1u, n)); }

/// Runs fn(i) for i in [begin, end), split into contiguous chunks.
/// Calls made from inside another parallel region run serially. Every fn(i)
/// must write disjoint outputs; results never depend on the thread count.
template <class Fn>
void parallel_for(std::size_t begin, std::size_t end, Fn&& fn, std::size_t min_chunk = 1) {
  if (end <= begin) return;
  const std::size_t n = end - begin;
  const std::size_t workers =
      std::min<std::size_t>(thread_cap(), std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_chunk)));
  if (workers <= 1 || detail::in_parallel_region()) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
    return;
  }

  std::exception_ptr error;
  std::mutex error_mutex;
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = begin + w * chunk;
    const std::size_t hi = std::min(end, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([&, lo, hi] {
      detail::ParallelRegionGuard guard;
      try {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

} // namespace acreg
