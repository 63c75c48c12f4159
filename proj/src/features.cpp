#include "voxgen/features.hpp"

#include <cmath>

namespace voxgen {

FeatureBackbone::FeatureBackbone(const BackboneSpec& spec) : spec_(spec) {
    if (spec_.channels.empty()) throw ConfigError("FeatureBackbone: no stages configured");
    Rng rng(spec_.seed);
    int cin = 1;
    for (int cout : spec_.channels) {
        if (cout <= 0) throw ConfigError("FeatureBackbone: stage width must be positive");
        std::vector<double> w(std::size_t(cout) * std::size_t(cin) * 9);
        const double scale = std::sqrt(2.0 / double(cin * 9));
        for (auto& v : w) v = rng.normal() * scale;
        weights_.push_back(std::move(w));
        cin = cout;
    }
}

namespace {

// 3x3 conv, zero padding, then ReLU.
void conv_relu(const DoubleVec& in, int cin, i64 rows, i64 cols, const std::vector<double>& w,
               int cout, DoubleVec& out) {
    out.assign(std::size_t(i64(cout) * rows * cols), 0.0);
    for (int co = 0; co < cout; ++co)
        for (i64 r = 0; r < rows; ++r)
            for (i64 c = 0; c < cols; ++c) {
                double acc = 0.0;
                for (int ci = 0; ci < cin; ++ci) {
                    const double* plane = in.data() + std::size_t(i64(ci) * rows * cols);
                    const double* kw = w.data() + std::size_t(((i64(co) * cin) + ci) * 9);
                    for (int dr = -1; dr <= 1; ++dr) {
                        const i64 rr = r + dr;
                        if (rr < 0 || rr >= rows) continue;
                        for (int dc = -1; dc <= 1; ++dc) {
                            const i64 cc = c + dc;
                            if (cc < 0 || cc >= cols) continue;
                            acc += kw[(dr + 1) * 3 + (dc + 1)] * plane[rr * cols + cc];
                        }
                    }
                }
                out[std::size_t((i64(co) * rows + r) * cols + c)] = acc > 0.0 ? acc : 0.0;
            }
}

void avg_pool2(const DoubleVec& in, int ch, i64 rows, i64 cols, DoubleVec& out, i64& orows,
               i64& ocols) {
    orows = rows / 2;
    ocols = cols / 2;
    out.assign(std::size_t(i64(ch) * orows * ocols), 0.0);
    for (int c = 0; c < ch; ++c)
        for (i64 r = 0; r < orows; ++r)
            for (i64 cc = 0; cc < ocols; ++cc) {
                const double* p = in.data() + std::size_t(i64(c) * rows * cols);
                const double s = p[(2 * r) * cols + 2 * cc] + p[(2 * r) * cols + 2 * cc + 1] +
                                 p[(2 * r + 1) * cols + 2 * cc] +
                                 p[(2 * r + 1) * cols + 2 * cc + 1];
                out[std::size_t((i64(c) * orows + r) * ocols + cc)] = 0.25 * s;
            }
}

}  // namespace

std::vector<FeatureBackbone::StageFeatures> FeatureBackbone::forward(const Plane& p) const {
    if (p.rows < 4 || p.cols < 4)
        throw ArgumentError("FeatureBackbone: plane too small (" + std::to_string(p.rows) + "x" +
                            std::to_string(p.cols) + ")");
    std::vector<StageFeatures> stages;
    DoubleVec cur = p.data;
    int cin = 1;
    i64 rows = p.rows, cols = p.cols;
    for (std::size_t s = 0; s < weights_.size(); ++s) {
        if (s > 0) {
            DoubleVec pooled;
            i64 orows, ocols;
            avg_pool2(cur, cin, rows, cols, pooled, orows, ocols);
            cur = std::move(pooled);
            rows = orows;
            cols = ocols;
            if (rows < 1 || cols < 1)
                throw ArgumentError("FeatureBackbone: plane exhausted at stage " +
                                    std::to_string(s));
        }
        const int cout = spec_.channels[s];
        DoubleVec out;
        conv_relu(cur, cin, rows, cols, weights_[s], cout, out);
        StageFeatures f;
        f.channels = cout;
        f.rows = rows;
        f.cols = cols;
        f.data = out;
        stages.push_back(std::move(f));
        cur = std::move(out);
        cin = cout;
    }
    return stages;
}

double FeatureBackbone::perceptual_distance(const Plane& a, const Plane& b) const {
    if (a.rows != b.rows || a.cols != b.cols)
        throw ArgumentError("perceptual_distance: plane sizes differ");
    const auto fa = forward(a);
    const auto fb = forward(b);
    const double eps = 1e-10;
    double total = 0.0;
    for (std::size_t s = 0; s < fa.size(); ++s) {
        const auto& A = fa[s];
        const auto& B = fb[s];
        const i64 sites = A.rows * A.cols;
        double stage_acc = 0.0;
        for (i64 i = 0; i < sites; ++i) {
            double na = 0.0, nb = 0.0;
            for (int c = 0; c < A.channels; ++c) {
                const double va = A.data[std::size_t(i64(c) * sites + i)];
                const double vb = B.data[std::size_t(i64(c) * sites + i)];
                na += va * va;
                nb += vb * vb;
            }
            na = std::sqrt(na) + eps;
            nb = std::sqrt(nb) + eps;
            double d = 0.0;
            for (int c = 0; c < A.channels; ++c) {
                const double va = A.data[std::size_t(i64(c) * sites + i)] / na;
                const double vb = B.data[std::size_t(i64(c) * sites + i)] / nb;
                d += (va - vb) * (va - vb);
            }
            stage_acc += d / double(A.channels);
        }
        total += stage_acc / double(sites);
    }
    return total;
}

std::vector<double> FeatureBackbone::feature_vector(const Plane& p) const {
    const auto stages = forward(p);
    std::vector<double> v;
    v.reserve(std::size_t(feature_dim()));
    // mean and spatial dispersion per channel: the mean tracks intensity
    // statistics, the dispersion tracks texture/sharpness (pooling alone is
    // nearly blind to blur)
    for (const auto& f : stages) {
        const i64 sites = f.rows * f.cols;
        for (int c = 0; c < f.channels; ++c) {
            double acc = 0.0, sq = 0.0;
            for (i64 i = 0; i < sites; ++i) {
                const double x = f.data[std::size_t(i64(c) * sites + i)];
                acc += x;
                sq += x * x;
            }
            const double mean = acc / double(sites);
            v.push_back(mean);
            v.push_back(std::sqrt(std::max(0.0, sq / double(sites) - mean * mean)));
        }
    }
    return v;
}

int FeatureBackbone::feature_dim() const {
    int d = 0;
    for (int c : spec_.channels) d += c;
    return 2 * d;
}

}  // namespace voxgen
