#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace cfmd {

namespace detail {
inline std::atomic<unsigned>& thread_setting() {
  static std::atomic<unsigned> n{1};
  return n;
}
}  // namespace detail

/// Worker count used by kernels that parallelize over independent slices.
inline unsigned num_threads() { return detail::thread_setting().load(); }
inline void set_num_threads(unsigned n) { detail::thread_setting().store(std::max(1u, n)); }

/// Runs fn(i) for i in [0, count) with static contiguous partitioning. Each
/// index is processed by exactly one worker, so results do not depend on the
/// worker count as long as fn(i) only writes state owned by i.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn, unsigned threads = num_threads()) {
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, count));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (count + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        const std::size_t begin = t * chunk;
        const std::size_t end = std::min(count, begin + chunk);
        for (std::size_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace cfmd
