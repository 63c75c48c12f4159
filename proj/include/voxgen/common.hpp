#pragma once

#include <array>
#include <cstdint>
#include <cstdlib>
#include <new>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxgen {

using i64 = std::int64_t;

// Thrown on contract violations of public operations (bad shapes, ranges, ...).
struct ArgumentError : std::runtime_error {
    explicit ArgumentError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown on file I/O and format problems; message names the offending field/path.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown on bad or missing configuration (including missing backbone/checkpoints).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// 64-byte aligned allocator so large float buffers always land on the same
// alignment; keeps vectorized loops bit-stable run to run.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::size_t alignment = 64;

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) {
        if (n == 0) return nullptr;
        void* p = ::operator new(n * sizeof(T), std::align_val_t(alignment));
        return static_cast<T*>(p);
    }
    void deallocate(T* p, std::size_t) noexcept {
        ::operator delete(p, std::align_val_t(alignment));
    }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
    template <typename U>
    bool operator!=(const AlignedAllocator<U>&) const { return false; }
};

using FloatVec = std::vector<float, AlignedAllocator<float>>;
using DoubleVec = std::vector<double, AlignedAllocator<double>>;

struct Shape3 {
    i64 d = 0, h = 0, w = 0;

    i64 numel() const { return d * h * w; }
    i64 operator[](int i) const { return i == 0 ? d : (i == 1 ? h : w); }
    bool operator==(const Shape3& o) const { return d == o.d && h == o.h && w == o.w; }
    bool operator!=(const Shape3& o) const { return !(*this == o); }

    std::string str() const {
        return "(" + std::to_string(d) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

inline i64 linear_index(const Shape3& s, i64 z, i64 y, i64 x) {
    return (z * s.h + y) * s.w + x;
}

}  // namespace voxgen
