#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "voxgen/features.hpp"
#include "voxgen/rng.hpp"
#include "voxgen/volume.hpp"

namespace voxgen {

// ------------------------------------------------------------- noise

struct NoiseEstimate {
    Volume noise;
    std::string method;
    double smooth_sigma = 0.0;
};

// High-pass residual v - GaussianSmooth(v, sigma). Accepts externally
// estimated noise volumes everywhere a NoiseEstimate is consumed, for users
// with a dedicated denoising tool.
NoiseEstimate extract_noise(const Volume& v, double smooth_sigma = 1.0);

// Discrete KL(hist_a || hist_b) over the pooled masked value range with
// additive smoothing 1e-8 per bin. Callers pass the original image's noise
// as `a` (the fixed direction recorded in reports).
double noise_kl(const Volume& noise_a, const Volume& noise_b, const RegionMask& region,
                int bins = 64);

// --------------------------------------------------------- sharpness

// Mean over n random cubic patches of the variance of the 3D Laplacian
// response (6-neighbor stencil, out-of-bounds neighbors clamped to the
// border) after Gaussian smoothing with `sigma`. Double precision with a
// fixed accumulation order; the value is a pure function of (v, sigma,
// patch, n, rng-stream).
double laplacian_variance_sharpness(const Volume& v, double sigma, int patch, int n, Rng& rng);

// ---------------------------------------------------------------- HOG

// Standard HOG over a 2D plane: central-difference gradients, unsigned
// orientation bins over [0,pi), cell histograms, overlapping 2x2-cell
// blocks with L2-hys normalization.
std::vector<double> hog_descriptor(const Plane& plane, int cell = 8, int orient_bins = 9);

// Mean over slices (along `axis`, spanning the region's bounding box) of the
// L2 distance between HOG descriptors of the bbox-cropped slices. Lower is
// more similar.
double hog_similarity(const Volume& a, const Volume& b, const RegionMask& region, int axis,
                      int cell = 8, int orient_bins = 9);

// -------------------------------------------------------------- LPIPS

// Mean perceptual distance over n shared 2D patch locations on slices
// perpendicular to `axis`. Patch locations are drawn from `rng`, so two
// calls with equal streams compare at identical locations.
double lpips_patches(const Volume& orig, const Volume& other, int n, int patch, int axis,
                     const FeatureBackbone& backbone, Rng& rng);

// ------------------------------------------------- distribution metrics

struct FeatureSet {
    std::vector<std::vector<double>> rows;
    std::string extractor;

    i64 size() const { return i64(rows.size()); }
    int dim() const { return rows.empty() ? 0 : int(rows[0].size()); }
};

// Patch features: n_per_volume random patches per volume on slices
// perpendicular to `axis`, embedded with the backbone's pooled activations.
FeatureSet patch_feature_set(const std::vector<const Volume*>& vols, int axis, int n_per_volume,
                             int patch, const FeatureBackbone& backbone, Rng& rng);

// Frechet distance between Gaussian fits (symmetric matrix square root via
// eigendecomposition, 1e-6 diagonal jitter when near-singular).
double fid(const FeatureSet& real, const FeatureSet& gen);

// k-NN manifold metrics: coverage = fraction of real points whose k-NN ball
// (radius to the k-th nearest other real point) contains a generated point;
// density = average ball hits per generated point, normalized by k.
std::pair<double, double> coverage_density(const FeatureSet& real, const FeatureSet& gen, int k);

// ------------------------------------------------------------ reporting

struct MetricProtocol {
    std::vector<int> axes{0, 1, 2};
    int lpips_patch = 64;
    int lpips_n = 1000;
    int sharp_patch = 64;
    int sharp_n = 1000;
    double sharp_sigma = 0.5;
    double noise_smooth_sigma = 1.0;
    int kl_bins = 64;
    int hog_cell = 8;
    int hog_bins = 9;
    int feat_patch = 64;
    int feat_n = 128;  // patches per volume for FID/coverage/density
    std::vector<int> k_values{5, 10, 20};
    BackboneSpec backbone;
    std::uint64_t seed = 0;

    nlohmann::ordered_json to_json() const;
    static MetricProtocol from_json(const nlohmann::ordered_json& j);
};

struct MetricReport {
    nlohmann::ordered_json doc;

    std::string to_json_string() const { return doc.dump(2) + "\n"; }
    // dim0/dim1/dim2 summary table, one block per metric
    std::string table() const;
};

// Runs the full suite over four directories of volumes. recon/refined
// volumes pair with originals by file stem; refined volumes whose stem
// matches a synthetic id are treated as refined synthetics for the
// distributional metrics. Missing pairs or regions produce explicit
// "skipped" rows, never silent omission.
MetricReport evaluate_sets(const std::string& orig_dir, const std::string& recon_dir,
                           const std::string& refined_dir, const std::string& synth_dir,
                           const MetricProtocol& protocol);

// Slice of a volume perpendicular to axis at the given index.
Plane slice_plane(const Volume& v, int axis, i64 index);

// Gaussian-blurred copy; used by the degradation probes.
Volume blur_volume(const Volume& v, double sigma);

}  // namespace voxgen
