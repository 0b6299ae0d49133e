#pragma once

#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace rangegen {

/// Static block partition over [0, n). Work items must write to disjoint,
/// pre-sized slots; results are then identical for any worker count.
inline void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const size_t thread_count = std::min<size_t>(workers, n);
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(thread_count);
    for (size_t w = 0; w < thread_count; ++w) {
        threads.emplace_back([&, w] {
            const size_t begin = n * w / thread_count;
            const size_t end = n * (w + 1) / thread_count;
            try {
                for (size_t i = begin; i < end; ++i) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (std::thread& t : threads) t.join();
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace rangegen
