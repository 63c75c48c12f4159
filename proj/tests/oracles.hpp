// Test-only reference implementations, written directly from the documented
// definitions and kept independent of the library code paths they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "voxgen/metrics.hpp"
#include "voxgen/rng.hpp"
#include "voxgen/volume.hpp"

namespace voxgen::oracles {

// Literal transcription of the sharpness definition: separable x,y,z
// Gaussian passes with border renormalization, 6-neighbor clamped Laplacian
// accumulated in the fixed z-,z+,y-,y+,x-,x+ order, population variance per
// patch, mean over patches.
inline double sharpness(const Volume& v, double sigma, int patch, int n, Rng& rng) {
    const Shape3 sh = v.shape;
    const int radius = int(std::ceil(3.0 * sigma));
    std::vector<double> kern(std::size_t(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kern[std::size_t(i + radius)] = std::exp(-0.5 * (double(i) / sigma) * (double(i) / sigma));
        ksum += kern[std::size_t(i + radius)];
    }
    for (auto& k : kern) k /= ksum;

    std::vector<double> cur(v.data.begin(), v.data.end());
    for (int axis : {2, 1, 0}) {
        std::vector<double> next(cur.size());
        for (i64 z = 0; z < sh.d; ++z)
            for (i64 y = 0; y < sh.h; ++y)
                for (i64 x = 0; x < sh.w; ++x) {
                    double acc = 0.0, wsum = 0.0;
                    for (int t = -radius; t <= radius; ++t) {
                        i64 zz = z, yy = y, xx = x;
                        if (axis == 0) zz += t;
                        if (axis == 1) yy += t;
                        if (axis == 2) xx += t;
                        if (zz < 0 || zz >= sh.d || yy < 0 || yy >= sh.h || xx < 0 || xx >= sh.w)
                            continue;
                        acc += kern[std::size_t(t + radius)] *
                               cur[std::size_t(linear_index(sh, zz, yy, xx))];
                        wsum += kern[std::size_t(t + radius)];
                    }
                    next[std::size_t(linear_index(sh, z, y, x))] = acc / wsum;
                }
        cur = next;
    }

    auto at = [&](i64 z, i64 y, i64 x) {
        z = std::clamp<i64>(z, 0, sh.d - 1);
        y = std::clamp<i64>(y, 0, sh.h - 1);
        x = std::clamp<i64>(x, 0, sh.w - 1);
        return cur[std::size_t(linear_index(sh, z, y, x))];
    };
    std::vector<double> lap(cur.size());
    for (i64 z = 0; z < sh.d; ++z)
        for (i64 y = 0; y < sh.h; ++y)
            for (i64 x = 0; x < sh.w; ++x) {
                double acc = at(z - 1, y, x);
                acc += at(z + 1, y, x);
                acc += at(z, y - 1, x);
                acc += at(z, y + 1, x);
                acc += at(z, y, x - 1);
                acc += at(z, y, x + 1);
                lap[std::size_t(linear_index(sh, z, y, x))] = acc - 6.0 * at(z, y, x);
            }

    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const i64 oz = rng.uniform_int(sh.d - patch + 1);
        const i64 oy = rng.uniform_int(sh.h - patch + 1);
        const i64 ox = rng.uniform_int(sh.w - patch + 1);
        double mean = 0.0;
        for (int z = 0; z < patch; ++z)
            for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch; ++x)
                    mean += lap[std::size_t(linear_index(sh, oz + z, oy + y, ox + x))];
        mean /= double(patch) * patch * patch;
        double var = 0.0;
        for (int z = 0; z < patch; ++z)
            for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch; ++x) {
                    const double d =
                        lap[std::size_t(linear_index(sh, oz + z, oy + y, ox + x))] - mean;
                    var += d * d;
                }
        total += var / (double(patch) * patch * patch);
    }
    return total / double(n);
}

// Exhaustive pairwise-distance evaluation of coverage and density.
inline std::pair<double, double> coverage_density(const FeatureSet& real, const FeatureSet& gen,
                                                  int k) {
    const i64 nr = real.size(), ng = gen.size();
    const int d = real.dim();
    auto dist = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j)
            acc +=
                (a[std::size_t(j)] - b[std::size_t(j)]) * (a[std::size_t(j)] - b[std::size_t(j)]);
        return std::sqrt(acc);
    };
    std::vector<double> radius;
    for (i64 i = 0; i < nr; ++i) {
        std::vector<double> ds;
        for (i64 j = 0; j < nr; ++j)
            if (i != j) ds.push_back(dist(real.rows[std::size_t(i)], real.rows[std::size_t(j)]));
        std::sort(ds.begin(), ds.end());
        radius.push_back(ds[std::size_t(k - 1)]);
    }
    i64 covered = 0, hits = 0;
    for (i64 i = 0; i < nr; ++i) {
        bool any = false;
        for (i64 j = 0; j < ng; ++j)
            if (dist(gen.rows[std::size_t(j)], real.rows[std::size_t(i)]) <=
                radius[std::size_t(i)]) {
                any = true;
                ++hits;
            }
        if (any) ++covered;
    }
    return {double(covered) / double(nr), double(hits) / (double(k) * double(ng))};
}

}  // namespace voxgen::oracles
