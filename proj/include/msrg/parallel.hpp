#pragma once

// Minimal worker partitioning for the heavy kernels. MSRG_THREADS caps the
// worker count (default 1). Kernels only parallelize over disjoint output
// slices computed in a fixed order, so results are bit-identical for any
// thread count.

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace msrg {

inline int max_threads() {
    static const int cached = [] {
        const char* env = std::getenv("MSRG_THREADS");
        if (env == nullptr) return 1;
        int n = std::atoi(env);
        if (n < 1) n = 1;
        return std::min(n, 64);
    }();
    return cached;
}

// Runs fn(i) for i in [0, n). Each index is handled exactly once; indices are
// split into contiguous chunks per worker.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const int workers = std::min<std::size_t>(max_threads(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        const std::size_t lo = chunk * static_cast<std::size_t>(w);
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace msrg
