#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "voxgen/volume.hpp"

namespace voxgen {

// Canonical raw format: <name>.f32raw (little-endian float32, C-order D,H,W)
// with JSON sidecar <name>.json {shape, spacing, intensity_range, seed}.
// NIfTI-1 (.nii / .nii.gz) is supported for reading real data.

// path may be the .f32raw, the .json sidecar, a bare stem, or a NIfTI file.
Volume load_volume(const std::string& path);

// Writes <stem>.f32raw + <stem>.json. `seed` lands in the sidecar when given.
void save_volume(const Volume& v, const std::string& stem,
                 std::optional<std::uint64_t> seed = std::nullopt);

// Label companions: one byte per voxel at <stem>.labels.u8raw.
void save_labels(const std::vector<std::uint8_t>& labels, Shape3 shape, const std::string& stem);
std::vector<std::uint8_t> load_labels(const std::string& stem, Shape3 shape);

// "phantom_0003.f32raw" -> "phantom_0003"; also strips .json/.nii/.nii.gz.
std::string volume_stem(const std::string& path);

// Sorted .f32raw volume stems in a directory (full paths without extension).
std::vector<std::string> list_volume_stems(const std::string& dir);

}  // namespace voxgen
