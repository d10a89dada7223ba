#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace voxgene {

// Worker cap shared by every parallel loop. 0 means hardware concurrency.
inline int& max_workers_ref() {
    static int cap = 0;
    return cap;
}

inline void set_max_workers(int n) { max_workers_ref() = n; }

inline int effective_workers() {
    int cap = max_workers_ref();
    if (cap <= 0) {
        unsigned hw = std::thread::hardware_concurrency();
        cap = hw == 0 ? 1 : static_cast<int>(hw);
    }
    return cap;
}

// Splits [begin, end) into contiguous chunks, one worker per chunk. Chunk
// boundaries depend only on the range and worker count, and workers never
// share an output element, so results are bit-identical for any worker count.
inline void parallel_for(std::size_t begin, std::size_t end,
                         const std::function<void(std::size_t, std::size_t)>& body) {
    const std::size_t n = end > begin ? end - begin : 0;
    if (n == 0) return;
    const std::size_t workers =
        std::min<std::size_t>(static_cast<std::size_t>(effective_workers()), n);
    if (workers <= 1) {
        body(begin, end);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) {
        const std::size_t lo = begin + n * w / workers;
        const std::size_t hi = begin + n * (w + 1) / workers;
        threads.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(begin, begin + n / workers);
    for (auto& t : threads) t.join();
}

}  // namespace voxgene
