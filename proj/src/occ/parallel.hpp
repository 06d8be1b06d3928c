#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace occ {

// Worker count: hardware concurrency capped by the OCC_VLM_THREADS environment
// variable and an optional per-call limit. Always at least 1.
inline int worker_count(int cap = 0) {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    if (const char* env = std::getenv("OCC_VLM_THREADS")) {
        int e = std::atoi(env);
        if (e > 0) n = std::min(n, e);
    }
    if (cap > 0) n = std::min(n, cap);
    return n;
}

// Index-parallel loop over [0, n). Results must be written to per-index slots;
// ordering of side effects across indices is unspecified.
inline void parallel_for(int n, const std::function<void(int)>& fn, int cap = 0) {
    int workers = std::min(worker_count(cap), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    std::atomic<int> next{0};
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                int i = next.fetch_add(1);
                if (i >= n) return;
                fn(i);
            }
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace occ
