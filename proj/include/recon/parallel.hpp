// Minimal fork-join parallel_for. Thread count is capped by the
// RECON_THREADS environment variable; results must not depend on the
// schedule, so workers own disjoint index ranges and any reduction is
// performed by the caller in range order.
#pragma once

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace recon {

inline int max_threads() {
    static const int cap = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw <= 0) hw = 1;
        if (const char* env = std::getenv("RECON_THREADS")) {
            int v = std::atoi(env);
            if (v > 0) hw = std::min(hw, v);
        }
        return hw;
    }();
    return cap;
}

// Calls fn(begin..end) over contiguous chunks, one chunk per worker.
inline void parallel_for(std::size_t begin, std::size_t end,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
    const std::size_t n = end > begin ? end - begin : 0;
    int workers = std::min<std::size_t>(max_threads(), n);
    if (workers <= 1) {
        if (n) fn(begin, end);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        std::size_t lo = begin + chunk * static_cast<std::size_t>(w);
        std::size_t hi = std::min(end, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace recon
