#include "voxgen/volume.hpp"

#include <algorithm>
#include <cmath>

namespace voxgen {

Volume normalize_intensity(const Volume& v, double lo, double hi) {
    if (!(lo < hi))
        throw ArgumentError("normalize_intensity: lo must be < hi, got lo=" + std::to_string(lo) +
                            " hi=" + std::to_string(hi));
    Volume out = v;
    const double scale = 2.0 / (hi - lo);
    for (auto& x : out.data) {
        double y = (double(x) - lo) * scale - 1.0;
        x = float(std::clamp(y, -1.0, 1.0));
    }
    out.intensity_range = {-1.0, 1.0};
    return out;
}

Volume crop_center(const Volume& v, Shape3 target) {
    if (target.d > v.shape.d || target.h > v.shape.h || target.w > v.shape.w)
        throw ArgumentError("crop_center: target " + target.str() + " exceeds source " +
                            v.shape.str());
    // floor((src-tgt)/2): odd remainder leaves the extra voxel on the high side
    const i64 oz = (v.shape.d - target.d) / 2;
    const i64 oy = (v.shape.h - target.h) / 2;
    const i64 ox = (v.shape.w - target.w) / 2;
    Volume out(target);
    out.spacing = v.spacing;
    out.intensity_range = v.intensity_range;
    for (i64 z = 0; z < target.d; ++z)
        for (i64 y = 0; y < target.h; ++y)
            for (i64 x = 0; x < target.w; ++x)
                out.at(z, y, x) = v.at(z + oz, y + oy, x + ox);
    return out;
}

static std::vector<i64> axis_origin_list(i64 extent, int p, int s) {
    std::vector<i64> origins;
    const i64 last = extent - p;
    for (i64 o = 0;; o += s) {
        if (o >= last) {
            origins.push_back(last);  // clamp final patch to the boundary
            break;
        }
        origins.push_back(o);
    }
    // clamping can duplicate the previous multiple when stride divides extent-p
    origins.erase(std::unique(origins.begin(), origins.end()), origins.end());
    return origins;
}

PatchGrid build_patch_grid(Shape3 volume_shape, int patch_size, int stride) {
    if (patch_size <= 0 || stride <= 0 || stride > patch_size)
        throw ArgumentError("build_patch_grid: need 0 < stride <= patch_size, got patch=" +
                            std::to_string(patch_size) + " stride=" + std::to_string(stride));
    if (patch_size > volume_shape.d || patch_size > volume_shape.h || patch_size > volume_shape.w)
        throw ArgumentError("build_patch_grid: patch " + std::to_string(patch_size) +
                            " exceeds volume " + volume_shape.str());
    PatchGrid grid;
    grid.volume_shape = volume_shape;
    grid.patch_size = patch_size;
    grid.stride = stride;
    for (int a = 0; a < 3; ++a)
        grid.axis_origins[std::size_t(a)] = axis_origin_list(volume_shape[a], patch_size, stride);
    for (i64 oz : grid.axis_origins[0])
        for (i64 oy : grid.axis_origins[1])
            for (i64 ox : grid.axis_origins[2])
                grid.origins.push_back({oz, oy, ox});
    return grid;
}

static void check_patch_bounds(const Volume& v, const std::array<i64, 3>& o, int p) {
    if (o[0] < 0 || o[1] < 0 || o[2] < 0 || o[0] + p > v.shape.d || o[1] + p > v.shape.h ||
        o[2] + p > v.shape.w)
        throw ArgumentError("patch origin (" + std::to_string(o[0]) + "," + std::to_string(o[1]) +
                            "," + std::to_string(o[2]) + ") with size " + std::to_string(p) +
                            " out of bounds for volume " + v.shape.str());
}

Tensor extract_patch(const Volume& v, const std::array<i64, 3>& origin, int p) {
    check_patch_bounds(v, origin, p);
    Tensor patch({p, p, p});
    i64 i = 0;
    for (i64 z = 0; z < p; ++z)
        for (i64 y = 0; y < p; ++y) {
            const float* row = &v.data[std::size_t(
                linear_index(v.shape, origin[0] + z, origin[1] + y, origin[2]))];
            for (i64 x = 0; x < p; ++x) patch[i++] = row[x];
        }
    return patch;
}

void insert_patch(Volume& canvas, const std::array<i64, 3>& origin, const Tensor& patch,
                  const std::vector<std::uint8_t>& region) {
    const int p = int(patch.dim(0));
    check_patch_bounds(canvas, origin, p);
    if (patch.numel() != i64(region.size()))
        throw ArgumentError("insert_patch: region size " + std::to_string(region.size()) +
                            " != patch voxels " + std::to_string(patch.numel()));
    i64 i = 0;
    for (i64 z = 0; z < p; ++z)
        for (i64 y = 0; y < p; ++y) {
            float* row = &canvas.data[std::size_t(
                linear_index(canvas.shape, origin[0] + z, origin[1] + y, origin[2]))];
            for (i64 x = 0; x < p; ++x, ++i)
                if (region[std::size_t(i)]) row[x] = patch[i];
        }
}

RegionMask erode_mask(const RegionMask& m, int radius) {
    if (radius < 0) throw ArgumentError("erode_mask: radius must be >= 0");
    RegionMask out(m.shape, m.label);
    for (i64 z = 0; z < m.shape.d; ++z)
        for (i64 y = 0; y < m.shape.h; ++y)
            for (i64 x = 0; x < m.shape.w; ++x) {
                bool keep = m.at(z, y, x);
                for (i64 dz = -radius; keep && dz <= radius; ++dz)
                    for (i64 dy = -radius; keep && dy <= radius; ++dy)
                        for (i64 dx = -radius; keep && dx <= radius; ++dx) {
                            const i64 zz = z + dz, yy = y + dy, xx = x + dx;
                            if (zz < 0 || zz >= m.shape.d || yy < 0 || yy >= m.shape.h ||
                                xx < 0 || xx >= m.shape.w || !m.at(zz, yy, xx))
                                keep = false;
                        }
                out.data[std::size_t(linear_index(m.shape, z, y, x))] = keep ? 1 : 0;
            }
    return out;
}

static std::vector<double> gaussian_kernel(double sigma) {
    const int radius = int(std::ceil(3.0 * sigma));
    std::vector<double> k(std::size_t(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-0.5 * (double(i) / sigma) * (double(i) / sigma));
        k[std::size_t(i + radius)] = v;
        sum += v;
    }
    for (auto& v : k) v /= sum;
    return k;
}

// One axis pass; kernel weight renormalized over the in-bounds taps.
static void smooth_axis(const DoubleVec& in, DoubleVec& out, Shape3 s, int axis,
                        const std::vector<double>& k) {
    const int radius = int(k.size() / 2);
    const i64 n = s[axis];
    const i64 stride = axis == 2 ? 1 : (axis == 1 ? s.w : s.h * s.w);
    for (i64 z = 0; z < s.d; ++z)
        for (i64 y = 0; y < s.h; ++y)
            for (i64 x = 0; x < s.w; ++x) {
                const i64 idx = linear_index(s, z, y, x);
                const i64 pos = axis == 0 ? z : (axis == 1 ? y : x);
                double acc = 0.0, wsum = 0.0;
                for (int t = -radius; t <= radius; ++t) {
                    const i64 q = pos + t;
                    if (q < 0 || q >= n) continue;
                    const double w = k[std::size_t(t + radius)];
                    acc += w * in[std::size_t(idx + t * stride)];
                    wsum += w;
                }
                out[std::size_t(idx)] = acc / wsum;
            }
}

DoubleVec gaussian_smooth3d(const DoubleVec& in, Shape3 shape, double sigma) {
    if (sigma <= 0.0) throw ArgumentError("gaussian_smooth3d: sigma must be > 0");
    const auto k = gaussian_kernel(sigma);
    DoubleVec a = in, b(in.size());
    smooth_axis(a, b, shape, 2, k);
    smooth_axis(b, a, shape, 1, k);
    smooth_axis(a, b, shape, 0, k);
    return b;
}

DoubleVec volume_to_double(const Volume& v) {
    DoubleVec d(v.data.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = double(v.data[i]);
    return d;
}

Volume volume_from_double(const DoubleVec& d, Shape3 shape) {
    Volume v(shape);
    for (std::size_t i = 0; i < d.size(); ++i) v.data[i] = float(d[i]);
    return v;
}

}  // namespace voxgen
