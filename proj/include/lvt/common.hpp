#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lvt {

// Error taxonomy. Callers that reach the CLI map these to exit code 1;
// verification failures map to exit code 2.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};
struct MetricError : std::runtime_error {
    explicit MetricError(const std::string& msg) : std::runtime_error(msg) {}
};

using Rng = std::mt19937_64;

namespace detail {
inline int& thread_count_ref() {
    static int n = 1;
    return n;
}
}  // namespace detail

// Intra-op worker count. Kernels partition output rows into contiguous
// chunks, so results are bitwise identical for every thread count.
inline int thread_count() { return detail::thread_count_ref(); }
inline void set_thread_count(int n) {
    if (n < 1) throw ConfigError("thread count must be >= 1");
    detail::thread_count_ref() = n;
}

// Runs fn(begin, end) on contiguous index chunks. Falls back to a single
// inline call when the range is small or one thread is configured.
template <class Fn>
void parallel_for(std::size_t begin, std::size_t end, std::size_t grain, Fn&& fn) {
    const std::size_t n = end > begin ? end - begin : 0;
    const int workers = thread_count();
    if (workers <= 1 || n <= grain) {
        if (n > 0) fn(begin, end);
        return;
    }
    const std::size_t chunks = std::min<std::size_t>(static_cast<std::size_t>(workers),
                                                     (n + grain - 1) / grain);
    const std::size_t per = (n + chunks - 1) / chunks;
    std::vector<std::thread> pool;
    pool.reserve(chunks);
    for (std::size_t c = 0; c < chunks; ++c) {
        const std::size_t lo = begin + c * per;
        const std::size_t hi = std::min(end, lo + per);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace lvt
