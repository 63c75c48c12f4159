#pragma once

#include <cmath>
#include <cstdint>

#include "voxgen/common.hpp"

namespace voxgen {

// splitmix64-based generator. Self-contained so that streams are reproducible
// across standard libraries and platforms; std::mt19937 distributions are not.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    i64 uniform_int(i64 n) { return i64(next_u64() % std::uint64_t(n)); }

    // Standard normal via Box-Muller. One draw consumes two uniforms; no
    // cached spare, so the stream position is a pure function of call count.
    double normal() {
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    float normalf() { return float(normal()); }

    // Derive an independent child stream. Used to give every volume / patch /
    // sample its own stream so results do not depend on evaluation order.
    Rng fork(std::uint64_t stream_id) const {
        Rng tmp(state_ ^ (0xD1B54A32D192ED03ULL * (stream_id + 1)));
        Rng child(tmp.next_u64());
        return child;
    }

private:
    std::uint64_t state_;
};

}  // namespace voxgen
