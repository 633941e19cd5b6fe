#ifndef EBLMM_PARALLEL_HPP
#define EBLMM_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace eblmm {

/// Worker cap: EBLMM_THREADS if set to a positive integer, else the
/// hardware concurrency.
inline int thread_limit() {
    if (const char* env = std::getenv("EBLMM_THREADS")) {
        try {
            const int v = std::stoi(env);
            if (v >= 1) return v;
        } catch (const std::exception&) {
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

namespace detail {
inline thread_local bool in_parallel_region = false;
}

/// Calls body(i) for i in [0, count). Each index writes only its own
/// output slot, so results do not depend on scheduling. Nested calls run
/// serially. The exception of the lowest failing index is rethrown.
template <typename Body>
void parallel_for(int count, Body&& body) {
    const int workers = std::min(count, thread_limit());
    if (workers <= 1 || detail::in_parallel_region) {
        for (int i = 0; i < count; ++i) body(i);
        return;
    }
    std::vector<std::exception_ptr> errors(count);
    std::atomic<int> next{0};
    auto run = [&] {
        detail::in_parallel_region = true;
        for (int i = next++; i < count; i = next++) {
            try {
                body(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
        detail::in_parallel_region = false;
    };
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(run);
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

} // namespace eblmm

#endif // EBLMM_PARALLEL_HPP
