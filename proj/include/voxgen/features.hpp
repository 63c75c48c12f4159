#pragma once

#include <vector>

#include "voxgen/common.hpp"
#include "voxgen/rng.hpp"

namespace voxgen {

// 2D plane of doubles, row-major (rows, cols).
struct Plane {
    i64 rows = 0, cols = 0;
    DoubleVec data;

    Plane() = default;
    Plane(i64 r, i64 c) : rows(r), cols(c) { data.assign(std::size_t(r * c), 0.0); }
    double& at(i64 r, i64 c) { return data[std::size_t(r * cols + c)]; }
    double at(i64 r, i64 c) const { return data[std::size_t(r * cols + c)]; }
};

struct BackboneSpec {
    std::uint64_t seed = 17;
    std::vector<int> channels{8, 16, 32};
};

// Fixed-seed random-convolution feature stack: per stage a 3x3 conv
// (He-scaled weights drawn once from the seed), ReLU, then 2x average
// pooling between stages. Training-free and fully deterministic; stands in
// for a pretrained perceptual network at desk scale. Any extractor with the
// same interface can be swapped in for paper-faithful runs.
class FeatureBackbone {
public:
    explicit FeatureBackbone(const BackboneSpec& spec);

    // Per-stage post-ReLU feature maps of an input plane; stage s has
    // channels[s] maps of size (rows/2^s, cols/2^s).
    struct StageFeatures {
        int channels = 0;
        i64 rows = 0, cols = 0;
        DoubleVec data;  // (channels, rows, cols)
        double at(int c, i64 r, i64 cc) const {
            return data[std::size_t((i64(c) * rows + r) * cols + cc)];
        }
    };
    std::vector<StageFeatures> forward(const Plane& p) const;

    // Channel-normalized squared feature distance, averaged over space and
    // channels, summed over stages. Zero for identical inputs.
    double perceptual_distance(const Plane& a, const Plane& b) const;

    // Global-average-pooled stage activations concatenated into one vector.
    std::vector<double> feature_vector(const Plane& p) const;

    int feature_dim() const;
    const BackboneSpec& spec() const { return spec_; }

private:
    BackboneSpec spec_;
    // weights[s]: (cout, cin, 3, 3) flattened
    std::vector<std::vector<double>> weights_;
};

}  // namespace voxgen
