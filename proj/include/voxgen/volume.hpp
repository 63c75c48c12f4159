#pragma once

#include <array>
#include <string>
#include <vector>

#include "voxgen/common.hpp"
#include "voxgen/tensor.hpp"

namespace voxgen {

// 3D scalar image with spacing metadata. Data is stored C-order (D,H,W).
// intensity_range declares the (lo,hi) the data was normalized from;
// normalized volumes carry {-1,1}.
struct Volume {
    Shape3 shape;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::array<double, 2> intensity_range{-1.0, 1.0};
    FloatVec data;

    Volume() = default;
    Volume(Shape3 s, float fill = 0.0f) : shape(s) {
        data.assign(std::size_t(s.numel()), fill);
    }

    float& at(i64 z, i64 y, i64 x) { return data[std::size_t(linear_index(shape, z, y, x))]; }
    float at(i64 z, i64 y, i64 x) const { return data[std::size_t(linear_index(shape, z, y, x))]; }
    i64 numel() const { return shape.numel(); }
};

// Boolean mask over a volume, e.g. a tissue label region.
struct RegionMask {
    Shape3 shape;
    std::string label;
    std::vector<std::uint8_t> data;

    RegionMask() = default;
    RegionMask(Shape3 s, std::string lbl) : shape(s), label(std::move(lbl)) {
        data.assign(std::size_t(s.numel()), 0);
    }

    i64 count() const {
        i64 c = 0;
        for (auto v : data) c += v ? 1 : 0;
        return c;
    }
    bool at(i64 z, i64 y, i64 x) const { return data[std::size_t(linear_index(shape, z, y, x))] != 0; }
};

// Overlapping cubic patch decomposition of a volume. Origins are the
// Cartesian product of the per-axis origin lists.
struct PatchGrid {
    Shape3 volume_shape;
    int patch_size = 0;
    int stride = 0;
    std::array<std::vector<i64>, 3> axis_origins;
    std::vector<std::array<i64, 3>> origins;  // ordered: z-major over axis lists
};

// Affine map lo -> -1, hi -> +1 with clipping outside [lo,hi].
Volume normalize_intensity(const Volume& v, double lo, double hi);

// Centered sub-volume; for odd remainders the extra voxel stays on the
// high-index side.
Volume crop_center(const Volume& v, Shape3 target);

// Origins at multiples of stride per axis, last origin clamped to
// shape - patch so the final patch abuts the boundary. Guarantees coverage.
PatchGrid build_patch_grid(Shape3 volume_shape, int patch_size, int stride);

// Cubic patch copy-out as a (p,p,p) tensor.
Tensor extract_patch(const Volume& v, const std::array<i64, 3>& origin, int p);

// Writes patch voxels into canvas only where region is true. region has
// patch shape (p^3 bytes). Callers serialize per canvas.
void insert_patch(Volume& canvas, const std::array<i64, 3>& origin, const Tensor& patch,
                  const std::vector<std::uint8_t>& region);

// Chebyshev (box) erosion: keeps a voxel only if the whole radius-r
// neighborhood is inside the mask and in bounds.
RegionMask erode_mask(const RegionMask& m, int radius);

// Separable Gaussian smoothing, double precision, kernel truncated at
// ceil(3*sigma) and renormalized at borders (constants are preserved).
// Pass order is fixed (x, then y, then z) so results are reproducible.
DoubleVec gaussian_smooth3d(const DoubleVec& in, Shape3 shape, double sigma);

DoubleVec volume_to_double(const Volume& v);
Volume volume_from_double(const DoubleVec& d, Shape3 shape);

}  // namespace voxgen
