#pragma once

#include <atomic>
#include <cstddef>

namespace xlv::alloc_stats {

inline std::atomic<std::size_t> current_bytes{0};
inline std::atomic<std::size_t> peak_bytes{0};

inline void track(std::size_t bytes) {
  std::size_t cur = current_bytes.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  std::size_t peak = peak_bytes.load(std::memory_order_relaxed);
  while (cur > peak &&
         !peak_bytes.compare_exchange_weak(peak, cur, std::memory_order_relaxed)) {
  }
}

inline void untrack(std::size_t bytes) {
  current_bytes.fetch_sub(bytes, std::memory_order_relaxed);
}

inline void reset_peak() {
  peak_bytes.store(current_bytes.load(std::memory_order_relaxed),
                   std::memory_order_relaxed);
}

inline std::size_t peak() { return peak_bytes.load(std::memory_order_relaxed); }
inline std::size_t current() { return current_bytes.load(std::memory_order_relaxed); }

}  // namespace xlv::alloc_stats
