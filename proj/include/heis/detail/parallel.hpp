#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>
#include <vector>

namespace heis::detail {

// Worker count: hardware concurrency, capped by the HEIS_THREADS env var.
inline unsigned worker_count() {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("HEIS_THREADS")) {
        char* end = nullptr;
        long cap = std::strtol(env, &end, 10);
        if (end != env && cap > 0 && static_cast<unsigned>(cap) < hw)
            hw = static_cast<unsigned>(cap);
    }
    return hw;
}

// Runs chunk(i) for i in [0, n_chunks). Chunks are pulled dynamically, so
// chunk bodies must not depend on execution order.
template <class Fn>
void parallel_chunks(std::size_t n_chunks, Fn&& chunk) {
    unsigned workers = worker_count();
    if (workers <= 1 || n_chunks <= 1) {
        for (std::size_t i = 0; i < n_chunks; ++i) chunk(i);
        return;
    }
    workers = static_cast<unsigned>(std::min<std::size_t>(workers, n_chunks));
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1, std::memory_order_relaxed);
                if (i >= n_chunks) return;
                chunk(i);
            }
        });
    }
    for (auto& th : pool) th.join();
}

// Deterministic reduction: partial sums are combined in chunk-index order,
// so the result does not depend on the number of workers.
template <class Fn>
double parallel_sum(std::size_t n_chunks, Fn&& chunk_sum) {
    std::vector<double> partial(n_chunks, 0.0);
    parallel_chunks(n_chunks, [&](std::size_t i) { partial[i] = chunk_sum(i); });
    double total = 0.0;
    for (double v : partial) total += v;
    return total;
}

template <class Fn>
void parallel_for(std::size_t n, Fn&& body) {
    const std::size_t n_chunks =
        std::min<std::size_t>(n, std::max<std::size_t>(1, worker_count() * 8));
    if (n_chunks <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    parallel_chunks(n_chunks, [&](std::size_t c) {
        const std::size_t i0 = n * c / n_chunks;
        const std::size_t i1 = n * (c + 1) / n_chunks;
        for (std::size_t i = i0; i < i1; ++i) body(i);
    });
}

}  // namespace heis::detail
