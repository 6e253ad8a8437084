#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <memory>
#include <new>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace fphys {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

inline std::vector<std::int64_t> row_major_strides(const Shape& shape) {
    std::vector<std::int64_t> st(shape.size(), 1);
    for (std::int64_t i = static_cast<std::int64_t>(shape.size()) - 2; i >= 0; --i)
        st[i] = st[i + 1] * shape[i + 1];
    return st;
}

// 64-byte aligned storage so vectorized kernels see a stable alignment
// (keeps repeated runs on identical inputs bit-identical). resize() leaves
// trivial element types uninitialized; assign() still fills.
template <class T, std::size_t Align = 64>
struct AlignedAllocator {
    using value_type = T;
    template <class U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) {}
    T* allocate(std::size_t n) {
        if (n == 0) return nullptr;
        void* p = ::operator new(n * sizeof(T), std::align_val_t(Align));
        return static_cast<T*>(p);
    }
    void deallocate(T* p, std::size_t) noexcept {
        ::operator delete(p, std::align_val_t(Align));
    }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) == 0)
            ::new (static_cast<void*>(p)) U;  // default-init: no zero fill
        else
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
    template <class U>
    bool operator==(const AlignedAllocator<U, Align>&) const { return true; }
    template <class U>
    bool operator!=(const AlignedAllocator<U, Align>&) const { return false; }
};

template <class T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

#if defined(__GLIBC__)
// Keep large buffers on the heap free list instead of mmap/munmap cycles;
// graph workloads reallocate activation-sized blocks every step and the
// page-fault cost of fresh mappings dwarfs the arithmetic otherwise.
inline const int malloc_tuning = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return 0;
}();
#endif

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

// Deterministic RNG: fixed mt19937_64 stream, explicit mappings (no
// distribution objects, whose sequences vary across standard libraries).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed ? seed : 0x7F4A7C15ull) {}

    std::uint64_t next_u64() { return eng_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // [a, b)
    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    // (0, 1]
    double uniform_open_closed() {
        return static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53;
    }

    // Box-Muller, pairwise; fixed draw order for reproducibility.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform_open_closed();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Fixed-partition parallel loop. Work is split into contiguous ranges by
// index, so every output element is written by exactly one worker and
// results do not depend on the number of threads.
template <class F>
void parallel_for(std::int64_t n, F&& body) {
    if (n <= 0) return;
    unsigned hw = std::thread::hardware_concurrency();
    std::int64_t workers = std::min<std::int64_t>(n, hw == 0 ? 1 : hw);
    if (workers <= 1) {
        for (std::int64_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    std::int64_t chunk = (n + workers - 1) / workers;
    auto run = [&body](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) body(i);
    };
    for (std::int64_t w = 1; w < workers; ++w) {
        std::int64_t lo = w * chunk, hi = std::min(n, lo + chunk);
        if (lo < hi) pool.emplace_back(run, lo, hi);
    }
    run(0, std::min(n, chunk));
    for (auto& t : pool) t.join();
}

}  // namespace fphys
