#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace bsde::detail {

inline int thread_count_from_env() {
    const char* raw = std::getenv("BSDE_THREADS");
    if (raw == nullptr) return 1;
    const int n = std::atoi(raw);
    return n > 1 ? n : 1;
}

// Shards [0, n) by contiguous ranges. Writers must touch disjoint data;
// results are then identical for any thread count.
template <class F>
void parallel_for_ranges(int n, F&& body) {
    const int threads = thread_count_from_env();
    if (threads <= 1 || n < 2 * threads) {
        body(0, n);
        return;
    }
    std::vector<std::thread> pool;
    const int chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const int lo = t * chunk;
        const int hi = std::min(n, lo + chunk);
        if (lo < hi) pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

} // namespace bsde::detail
