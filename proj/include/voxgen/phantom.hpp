#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "voxgen/volume.hpp"

namespace voxgen {

// Voxel labels of the synthetic phantom. Mutually disjoint and covering.
enum class PhantomLabel : std::uint8_t {
    background = 0,
    skull = 1,        // outer shell
    white_matter = 2, // tissue-A, brightest tissue
    gray_matter = 3,  // tissue-B
    ventricle = 4,    // cavity
};

struct Phantom {
    Volume volume;                    // normalized to [-1,1]
    std::vector<std::uint8_t> labels; // PhantomLabel per voxel
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
};

// Deterministic structured test volume: nested deformed ellipsoids with
// distinct per-label means, band-limited texture (correlation length ~3
// voxels) inside tissue, sharp boundaries, and i.i.d. Gaussian noise of
// std noise_sigma everywhere (normalized units).
Phantom generate_phantom(std::uint64_t seed, Shape3 shape, double noise_sigma, double texture_amp);

// Region lookup by name. Besides the five label names, "whole-brain" is the
// union of white-matter/gray-matter/ventricle and "cerebellum" is the
// designated gray-matter sub-label used by the texture metrics.
RegionMask region_from_labels(const std::vector<std::uint8_t>& labels, Shape3 shape,
                              const std::string& name);

struct DatasetSplit {
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
    double train_frac = 0.8;
    double test_frac = 0.2;
};

struct DatasetParams {
    Shape3 shape{48, 48, 48};
    double noise_sigma = 0.05;
    double texture_amp = 0.1;
    double train_frac = 0.8;
    double test_frac = 0.2;
};

// Writes n phantoms (volume + labels, raw+sidecar format) under
// out_dir/train and out_dir/test, split by seed order with floor(n*train)
// going to train. Also writes out_dir/split.json. Fully deterministic in
// (base_seed, n, params).
DatasetSplit make_dataset(const std::string& out_dir, int n, const DatasetParams& params,
                          std::uint64_t base_seed);

}  // namespace voxgen
