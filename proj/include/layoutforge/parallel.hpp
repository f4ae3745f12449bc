#pragma once

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace layoutforge {

namespace detail {
inline std::atomic<int>& thread_count_storage() {
    static std::atomic<int> n{1};
    return n;
}
}  // namespace detail

inline void set_thread_count(int n) {
    detail::thread_count_storage().store(n < 1 ? 1 : n);
}
inline int thread_count() { return detail::thread_count_storage().load(); }

/// Static-partition parallel loop over [0, n). Chunk boundaries depend only on
/// n and the configured thread count, so results are schedule-independent for
/// any body whose writes are disjoint per index.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn) {
    int workers = thread_count();
    if (workers <= 1 || n < 2) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    if (workers > n) workers = static_cast<int>(n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        int64_t begin = w * chunk;
        int64_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([begin, end, &fn]() {
            for (int64_t i = begin; i < end; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace layoutforge
