#include "voxgen/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>

#include "voxgen/phantom.hpp"
#include "voxgen/volume_io.hpp"

namespace voxgen {

// ----------------------------------------------------------------- noise

NoiseEstimate extract_noise(const Volume& v, double smooth_sigma) {
    if (smooth_sigma <= 0.0) throw ArgumentError("extract_noise: smooth_sigma must be > 0");
    const DoubleVec field = volume_to_double(v);
    const DoubleVec smooth = gaussian_smooth3d(field, v.shape, smooth_sigma);
    NoiseEstimate est;
    est.method = "gaussian_highpass";
    est.smooth_sigma = smooth_sigma;
    est.noise = Volume(v.shape);
    est.noise.spacing = v.spacing;
    for (std::size_t i = 0; i < field.size(); ++i)
        est.noise.data[i] = float(field[i] - smooth[i]);
    return est;
}

double noise_kl(const Volume& noise_a, const Volume& noise_b, const RegionMask& region,
                int bins) {
    if (bins < 2) throw ArgumentError("noise_kl: bins must be >= 2");
    if (noise_a.shape != region.shape || noise_b.shape != region.shape)
        throw ArgumentError("noise_kl: region shape " + region.shape.str() +
                            " does not match volumes");
    std::vector<double> va, vb;
    for (i64 i = 0; i < region.shape.numel(); ++i) {
        if (!region.data[std::size_t(i)]) continue;
        va.push_back(double(noise_a.data[std::size_t(i)]));
        vb.push_back(double(noise_b.data[std::size_t(i)]));
    }
    if (va.empty()) throw ArgumentError("noise_kl: region '" + region.label + "' is empty");

    double lo = va[0], hi = va[0];
    for (double x : va) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    for (double x : vb) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    if (!(hi > lo)) return 0.0;  // all pooled values identical

    std::vector<double> ca(std::size_t(bins), 0.0), cb(std::size_t(bins), 0.0);
    const double scale = double(bins) / (hi - lo);
    auto bin_of = [&](double x) {
        const i64 b = i64((x - lo) * scale);
        return std::size_t(std::clamp<i64>(b, 0, bins - 1));
    };
    for (double x : va) ca[bin_of(x)] += 1.0;
    for (double x : vb) cb[bin_of(x)] += 1.0;

    const double eps = 1e-8;
    double za = 0.0, zb = 0.0;
    for (int i = 0; i < bins; ++i) {
        za += ca[std::size_t(i)] + eps;
        zb += cb[std::size_t(i)] + eps;
    }
    double kl = 0.0;
    for (int i = 0; i < bins; ++i) {
        const double p = (ca[std::size_t(i)] + eps) / za;
        const double q = (cb[std::size_t(i)] + eps) / zb;
        kl += p * std::log(p / q);
    }
    return kl;
}

// ------------------------------------------------------------- sharpness

namespace {

// 6-neighbor Laplacian with out-of-bounds neighbors clamped to the border
// voxel. Accumulation order is fixed: z-, z+, y-, y+, x-, x+.
DoubleVec laplacian_response(const DoubleVec& s, Shape3 sh) {
    DoubleVec lap(s.size());
    for (i64 z = 0; z < sh.d; ++z)
        for (i64 y = 0; y < sh.h; ++y)
            for (i64 x = 0; x < sh.w; ++x) {
                const double c = s[std::size_t(linear_index(sh, z, y, x))];
                double acc = s[std::size_t(linear_index(sh, std::max<i64>(z - 1, 0), y, x))];
                acc += s[std::size_t(linear_index(sh, std::min(z + 1, sh.d - 1), y, x))];
                acc += s[std::size_t(linear_index(sh, z, std::max<i64>(y - 1, 0), x))];
                acc += s[std::size_t(linear_index(sh, z, std::min(y + 1, sh.h - 1), x))];
                acc += s[std::size_t(linear_index(sh, z, y, std::max<i64>(x - 1, 0)))];
                acc += s[std::size_t(linear_index(sh, z, y, std::min(x + 1, sh.w - 1)))];
                lap[std::size_t(linear_index(sh, z, y, x))] = acc - 6.0 * c;
            }
    return lap;
}

double patch_variance(const DoubleVec& lap, Shape3 sh, const std::array<i64, 3>& o, int p) {
    const i64 n = i64(p) * p * p;
    double mean = 0.0;
    for (int z = 0; z < p; ++z)
        for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x)
                mean += lap[std::size_t(linear_index(sh, o[0] + z, o[1] + y, o[2] + x))];
    mean /= double(n);
    double var = 0.0;
    for (int z = 0; z < p; ++z)
        for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x) {
                const double d =
                    lap[std::size_t(linear_index(sh, o[0] + z, o[1] + y, o[2] + x))] - mean;
                var += d * d;
            }
    return var / double(n);
}

}  // namespace

double laplacian_variance_sharpness(const Volume& v, double sigma, int patch, int n, Rng& rng) {
    if (n < 1) throw ArgumentError("laplacian_variance_sharpness: n must be >= 1");
    if (patch < 1 || patch > v.shape.d || patch > v.shape.h || patch > v.shape.w)
        throw ArgumentError("laplacian_variance_sharpness: patch " + std::to_string(patch) +
                            " too large for volume " + v.shape.str());
    const DoubleVec smooth = gaussian_smooth3d(volume_to_double(v), v.shape, sigma);
    const DoubleVec lap = laplacian_response(smooth, v.shape);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const std::array<i64, 3> o{rng.uniform_int(v.shape.d - patch + 1),
                                   rng.uniform_int(v.shape.h - patch + 1),
                                   rng.uniform_int(v.shape.w - patch + 1)};
        acc += patch_variance(lap, v.shape, o, patch);
    }
    return acc / double(n);
}

// ------------------------------------------------------------------- HOG

std::vector<double> hog_descriptor(const Plane& plane, int cell, int orient_bins) {
    if (cell < 1 || orient_bins < 1) throw ArgumentError("hog_descriptor: bad cell/bins");
    if (plane.rows < cell || plane.cols < cell)
        throw ArgumentError("hog_descriptor: plane " + std::to_string(plane.rows) + "x" +
                            std::to_string(plane.cols) + " smaller than cell " +
                            std::to_string(cell));
    const i64 ncy = plane.rows / cell;
    const i64 ncx = plane.cols / cell;
    const double pi = 3.14159265358979323846;

    // cell histograms: magnitude-weighted unsigned orientation votes
    std::vector<double> hist(std::size_t(ncy * ncx * orient_bins), 0.0);
    for (i64 r = 0; r < ncy * cell; ++r)
        for (i64 c = 0; c < ncx * cell; ++c) {
            const i64 rp = std::min(r + 1, plane.rows - 1), rm = std::max<i64>(r - 1, 0);
            const i64 cp = std::min(c + 1, plane.cols - 1), cm = std::max<i64>(c - 1, 0);
            const double gy = 0.5 * (plane.at(rp, c) - plane.at(rm, c));
            const double gx = 0.5 * (plane.at(r, cp) - plane.at(r, cm));
            const double mag = std::sqrt(gx * gx + gy * gy);
            if (mag == 0.0) continue;
            double theta = std::atan2(gy, gx);
            if (theta < 0.0) theta += pi;
            if (theta >= pi) theta = 0.0;
            i64 bin = i64(theta / pi * orient_bins);
            bin = std::clamp<i64>(bin, 0, orient_bins - 1);
            hist[std::size_t(((r / cell) * ncx + (c / cell)) * orient_bins + bin)] += mag;
        }

    // overlapping 2x2 blocks, L2-hys (normalize, clip at 0.2, renormalize)
    const i64 nby = std::max<i64>(ncy - 1, 1);
    const i64 nbx = std::max<i64>(ncx - 1, 1);
    const i64 block_len = (ncy > 1 && ncx > 1) ? 4 * orient_bins : ncy * ncx * orient_bins;
    const double eps = 1e-10;
    std::vector<double> desc;
    desc.reserve(std::size_t(nby * nbx * block_len));
    std::vector<double> block(static_cast<std::size_t>(block_len));
    for (i64 by = 0; by < nby; ++by)
        for (i64 bx = 0; bx < nbx; ++bx) {
            i64 k = 0;
            if (ncy > 1 && ncx > 1) {
                for (i64 dy = 0; dy < 2; ++dy)
                    for (i64 dx = 0; dx < 2; ++dx)
                        for (int b = 0; b < orient_bins; ++b)
                            block[std::size_t(k++)] = hist[std::size_t(
                                ((by + dy) * ncx + (bx + dx)) * orient_bins + b)];
            } else {
                for (std::size_t i = 0; i < hist.size(); ++i) block[i] = hist[i];
                k = block_len;
            }
            double n2 = 0.0;
            for (i64 i = 0; i < k; ++i) n2 += block[std::size_t(i)] * block[std::size_t(i)];
            const double inv = 1.0 / std::sqrt(n2 + eps * eps);
            double n2c = 0.0;
            for (i64 i = 0; i < k; ++i) {
                block[std::size_t(i)] = std::min(block[std::size_t(i)] * inv, 0.2);
                n2c += block[std::size_t(i)] * block[std::size_t(i)];
            }
            const double inv2 = 1.0 / std::sqrt(n2c + eps * eps);
            for (i64 i = 0; i < k; ++i) desc.push_back(block[std::size_t(i)] * inv2);
        }
    return desc;
}

namespace {

struct Bbox3 {
    std::array<i64, 3> lo{0, 0, 0}, hi{-1, -1, -1};  // inclusive
    bool empty() const { return hi[0] < lo[0]; }
};

Bbox3 region_bbox(const RegionMask& region) {
    Bbox3 bb;
    bb.lo = {region.shape.d, region.shape.h, region.shape.w};
    bb.hi = {-1, -1, -1};
    for (i64 z = 0; z < region.shape.d; ++z)
        for (i64 y = 0; y < region.shape.h; ++y)
            for (i64 x = 0; x < region.shape.w; ++x)
                if (region.at(z, y, x)) {
                    bb.lo = {std::min(bb.lo[0], z), std::min(bb.lo[1], y), std::min(bb.lo[2], x)};
                    bb.hi = {std::max(bb.hi[0], z), std::max(bb.hi[1], y), std::max(bb.hi[2], x)};
                }
    return bb;
}

Plane crop_slice(const Volume& v, int axis, i64 index, const Bbox3& bb) {
    const int r_ax = axis == 0 ? 1 : 0;
    const int c_ax = axis == 2 ? 1 : 2;
    Plane p(bb.hi[std::size_t(r_ax)] - bb.lo[std::size_t(r_ax)] + 1,
            bb.hi[std::size_t(c_ax)] - bb.lo[std::size_t(c_ax)] + 1);
    for (i64 r = 0; r < p.rows; ++r)
        for (i64 c = 0; c < p.cols; ++c) {
            i64 idx[3];
            idx[axis] = index;
            idx[r_ax] = bb.lo[std::size_t(r_ax)] + r;
            idx[c_ax] = bb.lo[std::size_t(c_ax)] + c;
            p.at(r, c) = double(v.at(idx[0], idx[1], idx[2]));
        }
    return p;
}

}  // namespace

double hog_similarity(const Volume& a, const Volume& b, const RegionMask& region, int axis,
                      int cell, int orient_bins) {
    if (a.shape != b.shape || a.shape != region.shape)
        throw ArgumentError("hog_similarity: shapes differ");
    if (axis < 0 || axis > 2) throw ArgumentError("hog_similarity: axis must be 0, 1 or 2");
    const Bbox3 bb = region_bbox(region);
    if (bb.empty()) throw ArgumentError("hog_similarity: region '" + region.label + "' is empty");

    double acc = 0.0;
    i64 n_slices = 0;
    for (i64 s = bb.lo[std::size_t(axis)]; s <= bb.hi[std::size_t(axis)]; ++s) {
        const Plane pa = crop_slice(a, axis, s, bb);
        const Plane pb = crop_slice(b, axis, s, bb);
        const auto da = hog_descriptor(pa, cell, orient_bins);
        const auto db = hog_descriptor(pb, cell, orient_bins);
        double d2 = 0.0;
        for (std::size_t i = 0; i < da.size(); ++i) {
            const double d = da[i] - db[i];
            d2 += d * d;
        }
        acc += std::sqrt(d2);
        ++n_slices;
    }
    return acc / double(n_slices);
}

// ----------------------------------------------------------------- LPIPS

Plane slice_plane(const Volume& v, int axis, i64 index) {
    if (axis < 0 || axis > 2) throw ArgumentError("slice_plane: axis must be 0, 1 or 2");
    if (index < 0 || index >= v.shape[axis])
        throw ArgumentError("slice_plane: index " + std::to_string(index) +
                            " out of range for axis extent " + std::to_string(v.shape[axis]));
    Bbox3 bb;
    bb.lo = {0, 0, 0};
    bb.hi = {v.shape.d - 1, v.shape.h - 1, v.shape.w - 1};
    return crop_slice(v, axis, index, bb);
}

double lpips_patches(const Volume& orig, const Volume& other, int n, int patch, int axis,
                     const FeatureBackbone& backbone, Rng& rng) {
    if (orig.shape != other.shape)
        throw ArgumentError("lpips_patches: volume shapes differ: " + orig.shape.str() + " vs " +
                            other.shape.str());
    if (n < 1) throw ArgumentError("lpips_patches: n must be >= 1");
    const int r_ax = axis == 0 ? 1 : 0;
    const int c_ax = axis == 2 ? 1 : 2;
    const i64 rows = orig.shape[r_ax], cols = orig.shape[c_ax];
    if (patch > rows || patch > cols)
        throw ArgumentError("lpips_patches: patch " + std::to_string(patch) +
                            " exceeds slice extent");
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const i64 s = rng.uniform_int(orig.shape[axis]);
        const i64 r0 = rng.uniform_int(rows - patch + 1);
        const i64 c0 = rng.uniform_int(cols - patch + 1);
        Bbox3 bb;
        bb.lo[std::size_t(axis)] = 0;
        bb.hi[std::size_t(axis)] = 0;
        bb.lo[std::size_t(r_ax)] = r0;
        bb.hi[std::size_t(r_ax)] = r0 + patch - 1;
        bb.lo[std::size_t(c_ax)] = c0;
        bb.hi[std::size_t(c_ax)] = c0 + patch - 1;
        const Plane pa = crop_slice(orig, axis, s, bb);
        const Plane pb = crop_slice(other, axis, s, bb);
        acc += backbone.perceptual_distance(pa, pb);
    }
    return acc / double(n);
}

// --------------------------------------------------- distribution metrics

FeatureSet patch_feature_set(const std::vector<const Volume*>& vols, int axis, int n_per_volume,
                             int patch, const FeatureBackbone& backbone, Rng& rng) {
    FeatureSet fs;
    fs.extractor = "randconv_s" + std::to_string(backbone.spec().seed);
    for (std::size_t vi = 0; vi < vols.size(); ++vi) {
        const Volume& v = *vols[vi];
        // per-volume stream: sets compared at the same volume index sample
        // the same patch locations (paired sampling)
        Rng vol_rng = rng.fork(vi);
        const int r_ax = axis == 0 ? 1 : 0;
        const int c_ax = axis == 2 ? 1 : 2;
        const i64 rows = v.shape[r_ax], cols = v.shape[c_ax];
        if (patch > rows || patch > cols)
            throw ArgumentError("patch_feature_set: patch exceeds slice extent");
        for (int i = 0; i < n_per_volume; ++i) {
            const i64 s = vol_rng.uniform_int(v.shape[axis]);
            const i64 r0 = vol_rng.uniform_int(rows - patch + 1);
            const i64 c0 = vol_rng.uniform_int(cols - patch + 1);
            Bbox3 bb;
            bb.lo[std::size_t(axis)] = 0;
            bb.hi[std::size_t(axis)] = 0;
            bb.lo[std::size_t(r_ax)] = r0;
            bb.hi[std::size_t(r_ax)] = r0 + patch - 1;
            bb.lo[std::size_t(c_ax)] = c0;
            bb.hi[std::size_t(c_ax)] = c0 + patch - 1;
            fs.rows.push_back(backbone.feature_vector(crop_slice(v, axis, s, bb)));
        }
    }
    return fs;
}

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

Mat sym_sqrt(const Mat& m) {
    Eigen::SelfAdjointEigenSolver<Mat> es(m);
    Vec ev = es.eigenvalues();
    for (i64 i = 0; i < ev.size(); ++i) ev[i] = ev[i] > 0.0 ? std::sqrt(ev[i]) : 0.0;
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

void mean_cov(const FeatureSet& fs, Vec& mu, Mat& cov) {
    const i64 n = fs.size();
    const int d = fs.dim();
    mu = Vec::Zero(d);
    for (const auto& row : fs.rows)
        for (int j = 0; j < d; ++j) mu[j] += row[std::size_t(j)];
    mu /= double(n);
    cov = Mat::Zero(d, d);
    for (const auto& row : fs.rows) {
        Vec x(d);
        for (int j = 0; j < d; ++j) x[j] = row[std::size_t(j)] - mu[j];
        cov.noalias() += x * x.transpose();
    }
    cov /= double(std::max<i64>(n - 1, 1));
}

}  // namespace

double fid(const FeatureSet& real, const FeatureSet& gen) {
    if (real.size() < 2 || gen.size() < 2)
        throw ArgumentError("fid: need at least 2 samples per set, got " +
                            std::to_string(real.size()) + "/" + std::to_string(gen.size()));
    if (real.dim() != gen.dim()) throw ArgumentError("fid: feature dimensions differ");
    Vec mu_r, mu_g;
    Mat cov_r, cov_g;
    mean_cov(real, mu_r, cov_r);
    mean_cov(gen, mu_g, cov_g);

    const int d = real.dim();
    auto trace_sqrt_product = [&](const Mat& a, const Mat& b) {
        const Mat sa = sym_sqrt(a);
        return sym_sqrt(sa * b * sa).trace();
    };
    double ts = trace_sqrt_product(cov_r, cov_g);
    // near-singular product: retry with a small diagonal jitter
    if (!std::isfinite(ts)) {
        const Mat jitter = 1e-6 * Mat::Identity(d, d);
        ts = trace_sqrt_product(cov_r + jitter, cov_g + jitter);
    }
    const double mean_term = (mu_r - mu_g).squaredNorm();
    const double value = mean_term + cov_r.trace() + cov_g.trace() - 2.0 * ts;
    return value;
}

std::pair<double, double> coverage_density(const FeatureSet& real, const FeatureSet& gen,
                                           int k) {
    const i64 nr = real.size(), ng = gen.size();
    if (k < 1) throw ArgumentError("coverage_density: k must be >= 1");
    if (nr <= k)
        throw ArgumentError("coverage_density: need more real points than k (" +
                            std::to_string(nr) + " <= " + std::to_string(k) + ")");
    if (ng < 1) throw ArgumentError("coverage_density: empty generated set");
    if (real.dim() != gen.dim()) throw ArgumentError("coverage_density: dimensions differ");
    const int d = real.dim();

    auto dist = [d](const std::vector<double>& a, const std::vector<double>& b) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j) {
            const double v = a[std::size_t(j)] - b[std::size_t(j)];
            acc += v * v;
        }
        return std::sqrt(acc);
    };

    // radius of each real point's k-NN ball among the other real points
    std::vector<double> radius(static_cast<std::size_t>(nr));
    std::vector<double> dists;
    for (i64 i = 0; i < nr; ++i) {
        dists.clear();
        for (i64 j = 0; j < nr; ++j)
            if (j != i) dists.push_back(dist(real.rows[std::size_t(i)], real.rows[std::size_t(j)]));
        std::nth_element(dists.begin(), dists.begin() + (k - 1), dists.end());
        radius[std::size_t(i)] = dists[std::size_t(k - 1)];
    }

    i64 covered = 0;
    i64 hits = 0;
    for (i64 i = 0; i < nr; ++i) {
        bool hit = false;
        for (i64 j = 0; j < ng; ++j) {
            if (dist(gen.rows[std::size_t(j)], real.rows[std::size_t(i)]) <=
                radius[std::size_t(i)]) {
                hit = true;
                ++hits;
            }
        }
        if (hit) ++covered;
    }
    const double coverage = double(covered) / double(nr);
    const double density = double(hits) / (double(k) * double(ng));
    return {coverage, density};
}

// -------------------------------------------------------------- protocol

nlohmann::ordered_json MetricProtocol::to_json() const {
    nlohmann::ordered_json j;
    j["axes"] = axes;
    j["lpips_patch"] = lpips_patch;
    j["lpips_n"] = lpips_n;
    j["sharp_patch"] = sharp_patch;
    j["sharp_n"] = sharp_n;
    j["sharp_sigma"] = sharp_sigma;
    j["noise_smooth_sigma"] = noise_smooth_sigma;
    j["kl_bins"] = kl_bins;
    j["hog_cell"] = hog_cell;
    j["hog_bins"] = hog_bins;
    j["feat_patch"] = feat_patch;
    j["feat_n"] = feat_n;
    j["k_values"] = k_values;
    j["backbone_seed"] = backbone.seed;
    j["backbone_channels"] = backbone.channels;
    j["seed"] = seed;
    j["kl_direction"] = "KL(original || candidate)";
    return j;
}

MetricProtocol MetricProtocol::from_json(const nlohmann::ordered_json& j) {
    MetricProtocol p;
    if (j.contains("axes")) p.axes = j["axes"].get<std::vector<int>>();
    p.lpips_patch = j.value("lpips_patch", p.lpips_patch);
    p.lpips_n = j.value("lpips_n", p.lpips_n);
    p.sharp_patch = j.value("sharp_patch", p.sharp_patch);
    p.sharp_n = j.value("sharp_n", p.sharp_n);
    p.sharp_sigma = j.value("sharp_sigma", p.sharp_sigma);
    p.noise_smooth_sigma = j.value("noise_smooth_sigma", p.noise_smooth_sigma);
    p.kl_bins = j.value("kl_bins", p.kl_bins);
    p.hog_cell = j.value("hog_cell", p.hog_cell);
    p.hog_bins = j.value("hog_bins", p.hog_bins);
    p.feat_patch = j.value("feat_patch", p.feat_patch);
    p.feat_n = j.value("feat_n", p.feat_n);
    if (j.contains("k_values")) p.k_values = j["k_values"].get<std::vector<int>>();
    p.backbone.seed = j.value("backbone_seed", p.backbone.seed);
    if (j.contains("backbone_channels"))
        p.backbone.channels = j["backbone_channels"].get<std::vector<int>>();
    p.seed = j.value("seed", p.seed);
    return p;
}

// ---------------------------------------------------------- evaluate_sets

namespace {

struct Entry {
    std::string id;
    std::string stem;  // full path stem
    Volume vol;
    std::vector<std::uint8_t> labels;
    bool has_labels = false;
    NoiseEstimate noise;  // filled lazily
    bool has_noise = false;
};

std::vector<Entry> load_set(const std::string& dir, bool want_labels, double noise_sigma) {
    std::vector<Entry> out;
    for (const std::string& stem : list_volume_stems(dir)) {
        Entry e;
        e.stem = stem;
        e.id = std::filesystem::path(stem).filename().string();
        e.vol = load_volume(stem + ".f32raw");
        if (want_labels && std::filesystem::exists(stem + ".labels.u8raw")) {
            e.labels = load_labels(stem, e.vol.shape);
            e.has_labels = true;
        }
        (void)noise_sigma;
        out.push_back(std::move(e));
    }
    return out;
}

const NoiseEstimate& noise_of(Entry& e, double sigma) {
    if (!e.has_noise) {
        e.noise = extract_noise(e.vol, sigma);
        e.has_noise = true;
    }
    return e.noise;
}

struct Paired {
    Entry* orig;
    Entry* cand;
};

}  // namespace

MetricReport evaluate_sets(const std::string& orig_dir, const std::string& recon_dir,
                           const std::string& refined_dir, const std::string& synth_dir,
                           const MetricProtocol& protocol) {
    const FeatureBackbone backbone(protocol.backbone);

    auto orig = load_set(orig_dir, true, protocol.noise_smooth_sigma);
    auto recon = load_set(recon_dir, false, 0.0);
    auto refined = load_set(refined_dir, false, 0.0);
    auto synth = load_set(synth_dir, false, 0.0);
    if (orig.empty()) throw ArgumentError("evaluate_sets: no volumes in " + orig_dir);

    std::map<std::string, Entry*> orig_by_id, synth_by_id;
    for (auto& e : orig) orig_by_id[e.id] = &e;
    for (auto& e : synth) synth_by_id[e.id] = &e;

    std::vector<Paired> recon_pairs, refined_pairs;
    std::vector<Entry*> refined_synth;
    for (auto& e : recon)
        if (auto it = orig_by_id.find(e.id); it != orig_by_id.end())
            recon_pairs.push_back({it->second, &e});
    for (auto& e : refined) {
        if (auto it = orig_by_id.find(e.id); it != orig_by_id.end())
            refined_pairs.push_back({it->second, &e});
        else if (synth_by_id.count(e.id))
            refined_synth.push_back(&e);
    }

    MetricReport report;
    report.doc["protocol"] = protocol.to_json();
    report.doc["inputs"] = {{"orig", orig_dir},
                            {"recon", recon_dir},
                            {"refined", refined_dir},
                            {"synth", synth_dir}};
    auto rows = nlohmann::ordered_json::array();

    auto skip_row = [&rows](const std::string& metric, const std::string& set,
                            const std::string& reason) {
        rows.push_back({{"metric", metric}, {"set", set}, {"status", "skipped"},
                        {"reason", reason}});
    };
    auto ids_of = [](const std::vector<Paired>& ps) {
        std::vector<std::string> ids;
        for (const auto& p : ps) ids.push_back(p.orig->id);
        return ids;
    };

    Rng root(protocol.seed);

    // LPIPS, per axis, candidate vs original at shared patch locations
    const std::vector<std::pair<std::string, std::vector<Paired>*>> paired_sets{
        {"recon", &recon_pairs}, {"refined", &refined_pairs}};
    for (const auto& [set_name, pairs] : paired_sets) {
        if (pairs->empty()) {
            skip_row("lpips", set_name, "no paired volumes");
            continue;
        }
        for (int axis : protocol.axes) {
            double acc = 0.0;
            for (std::size_t pi = 0; pi < pairs->size(); ++pi) {
                // same stream for every candidate of the same original
                Rng stream = root.fork(1).fork(std::uint64_t(axis)).fork(pi);
                acc += lpips_patches((*pairs)[pi].orig->vol, (*pairs)[pi].cand->vol,
                                     protocol.lpips_n, protocol.lpips_patch, axis, backbone,
                                     stream);
            }
            rows.push_back({{"metric", "lpips"},
                            {"set", set_name},
                            {"axis", axis},
                            {"value", acc / double(pairs->size())},
                            {"n_samples", protocol.lpips_n * i64(pairs->size())},
                            {"params", {{"patch", protocol.lpips_patch}}},
                            {"seed", protocol.seed},
                            {"inputs", ids_of(*pairs)}});
        }
    }

    // HOG textural similarity over whole brain and cerebellum
    for (const std::string region_name : {"whole-brain", "cerebellum"}) {
        const std::string metric = region_name == std::string("whole-brain")
                                       ? "hog_whole_brain"
                                       : "hog_cerebellum";
        for (const auto& [set_name, pairs] : paired_sets) {
            if (pairs->empty()) {
                skip_row(metric, set_name, "no paired volumes");
                continue;
            }
            bool labels_ok = true;
            for (const auto& p : *pairs) labels_ok = labels_ok && p.orig->has_labels;
            if (!labels_ok) {
                skip_row(metric, set_name, "original volumes lack label masks");
                continue;
            }
            for (int axis : protocol.axes) {
                double acc = 0.0;
                for (const auto& p : *pairs) {
                    const RegionMask region =
                        region_from_labels(p.orig->labels, p.orig->vol.shape, region_name);
                    acc += hog_similarity(p.orig->vol, p.cand->vol, region, axis,
                                          protocol.hog_cell, protocol.hog_bins);
                }
                rows.push_back({{"metric", metric},
                                {"set", set_name},
                                {"axis", axis},
                                {"value", acc / double(pairs->size())},
                                {"n_samples", i64(pairs->size())},
                                {"params", {{"cell", protocol.hog_cell}, {"bins", protocol.hog_bins}}},
                                {"seed", protocol.seed},
                                {"inputs", ids_of(*pairs)}});
            }
        }
    }

    // noise KL per region, direction KL(original || candidate)
    for (const std::string region_name : {"white-matter", "ventricle"}) {
        const std::string metric = region_name == std::string("white-matter")
                                       ? "noise_kl_white_matter"
                                       : "noise_kl_ventricle";
        for (const auto& [set_name, pairs] : paired_sets) {
            if (pairs->empty()) {
                skip_row(metric, set_name, "no paired volumes");
                continue;
            }
            bool labels_ok = true;
            for (const auto& p : *pairs) labels_ok = labels_ok && p.orig->has_labels;
            if (!labels_ok) {
                skip_row(metric, set_name, "original volumes lack label masks");
                continue;
            }
            double acc = 0.0;
            bool ok = true;
            std::string reason;
            for (const auto& p : *pairs) {
                const RegionMask region =
                    region_from_labels(p.orig->labels, p.orig->vol.shape, region_name);
                if (region.count() == 0) {
                    ok = false;
                    reason = "region '" + region_name + "' empty for " + p.orig->id;
                    break;
                }
                acc += noise_kl(noise_of(*p.orig, protocol.noise_smooth_sigma).noise,
                                noise_of(*p.cand, protocol.noise_smooth_sigma).noise, region,
                                protocol.kl_bins);
            }
            if (!ok) {
                skip_row(metric, set_name, reason);
                continue;
            }
            rows.push_back({{"metric", metric},
                            {"set", set_name},
                            {"value", acc / double(pairs->size())},
                            {"n_samples", i64(pairs->size())},
                            {"params",
                             {{"bins", protocol.kl_bins},
                              {"smooth_sigma", protocol.noise_smooth_sigma},
                              {"direction", "KL(original || candidate)"}}},
                            {"seed", protocol.seed},
                            {"inputs", ids_of(*pairs)}});
        }
    }

    // sharpness per set
    {
        std::vector<std::pair<std::string, std::vector<Entry*>>> sets;
        auto collect = [](std::vector<Entry>& es) {
            std::vector<Entry*> out;
            for (auto& e : es) out.push_back(&e);
            return out;
        };
        sets.emplace_back("orig", collect(orig));
        sets.emplace_back("recon", collect(recon));
        std::vector<Entry*> rr;
        for (auto& p : refined_pairs) rr.push_back(p.cand);
        sets.emplace_back("refined", rr);
        sets.emplace_back("synth", collect(synth));
        sets.emplace_back("refined_synth", refined_synth);
        for (auto& [set_name, entries] : sets) {
            if (entries.empty()) {
                skip_row("sharpness", set_name, "no volumes");
                continue;
            }
            double acc = 0.0;
            for (std::size_t i = 0; i < entries.size(); ++i) {
                Rng stream = root.fork(4).fork(i);
                acc += laplacian_variance_sharpness(entries[i]->vol, protocol.sharp_sigma,
                                                    protocol.sharp_patch, protocol.sharp_n,
                                                    stream);
            }
            std::vector<std::string> ids;
            for (auto* e : entries) ids.push_back(e->id);
            rows.push_back({{"metric", "sharpness"},
                            {"set", set_name},
                            {"value", acc / double(entries.size())},
                            {"n_samples", protocol.sharp_n * i64(entries.size())},
                            {"params",
                             {{"sigma", protocol.sharp_sigma}, {"patch", protocol.sharp_patch}}},
                            {"seed", protocol.seed},
                            {"inputs", ids}});
        }
    }

    // FID / coverage / density on pooled patch features, per axis
    {
        std::vector<const Volume*> orig_vols;
        for (auto& e : orig) orig_vols.push_back(&e.vol);
        std::vector<std::pair<std::string, std::vector<const Volume*>>> cands;
        {
            std::vector<const Volume*> sv;
            for (auto& e : synth) sv.push_back(&e.vol);
            cands.emplace_back("synth", sv);
            std::vector<const Volume*> rv;
            for (auto* e : refined_synth) rv.push_back(&e->vol);
            cands.emplace_back("refined_synth", rv);
        }
        for (int axis : protocol.axes) {
            Rng real_stream = root.fork(5).fork(std::uint64_t(axis));
            const FeatureSet real_fs = patch_feature_set(orig_vols, axis, protocol.feat_n,
                                                         protocol.feat_patch, backbone,
                                                         real_stream);
            // originals-vs-originals baseline: deterministic even/odd split
            if (orig_vols.size() >= 4) {
                FeatureSet even, odd;
                even.extractor = odd.extractor = real_fs.extractor;
                const i64 per_vol = protocol.feat_n;
                for (i64 r = 0; r < real_fs.size(); ++r) {
                    const i64 vol_idx = r / per_vol;
                    (vol_idx % 2 == 0 ? even : odd).rows.push_back(real_fs.rows[std::size_t(r)]);
                }
                rows.push_back({{"metric", "fid"},
                                {"set", "orig"},
                                {"axis", axis},
                                {"value", fid(even, odd)},
                                {"n_samples", real_fs.size()},
                                {"params", {{"patch", protocol.feat_patch}}},
                                {"seed", protocol.seed}});
                for (int k : protocol.k_values) {
                    if (even.size() <= k) {
                        skip_row("coverage", "orig", "k too large for split set");
                        continue;
                    }
                    const auto [cov, den] = coverage_density(even, odd, k);
                    rows.push_back({{"metric", "coverage"}, {"set", "orig"}, {"axis", axis},
                                    {"k", k}, {"value", cov}, {"seed", protocol.seed}});
                    rows.push_back({{"metric", "density"}, {"set", "orig"}, {"axis", axis},
                                    {"k", k}, {"value", den}, {"seed", protocol.seed}});
                }
            }
            for (const auto& [set_name, vols] : cands) {
                if (vols.empty()) {
                    skip_row("fid", set_name, "no volumes");
                    continue;
                }
                Rng cand_stream = root.fork(5).fork(std::uint64_t(axis));  // shared origins
                const FeatureSet cand_fs = patch_feature_set(vols, axis, protocol.feat_n,
                                                             protocol.feat_patch, backbone,
                                                             cand_stream);
                rows.push_back({{"metric", "fid"},
                                {"set", set_name},
                                {"axis", axis},
                                {"value", fid(real_fs, cand_fs)},
                                {"n_samples", cand_fs.size()},
                                {"params", {{"patch", protocol.feat_patch}}},
                                {"seed", protocol.seed}});
                for (int k : protocol.k_values) {
                    if (real_fs.size() <= k) {
                        skip_row("coverage", set_name, "k too large for real set");
                        continue;
                    }
                    const auto [cov, den] = coverage_density(real_fs, cand_fs, k);
                    rows.push_back({{"metric", "coverage"}, {"set", set_name}, {"axis", axis},
                                    {"k", k}, {"value", cov}, {"seed", protocol.seed}});
                    rows.push_back({{"metric", "density"}, {"set", set_name}, {"axis", axis},
                                    {"k", k}, {"value", den}, {"seed", protocol.seed}});
                }
            }
        }
    }

    report.doc["rows"] = rows;
    return report;
}

std::string MetricReport::table() const {
    // group rows by (metric, set, k); columns are axes where present
    struct Key {
        std::string metric, set;
        int k;
        bool operator<(const Key& o) const {
            return std::tie(metric, set, k) < std::tie(o.metric, o.set, o.k);
        }
    };
    std::map<Key, std::map<int, double>> per_axis;
    std::map<Key, double> scalar;
    std::vector<Key> order;
    auto remember = [&order](const Key& k) {
        for (const auto& o : order)
            if (!(o < k) && !(k < o)) return;
        order.push_back(k);
    };
    for (const auto& row : doc.at("rows")) {
        if (row.contains("status")) continue;
        Key key{row.at("metric").get<std::string>(), row.value("set", std::string("-")),
                row.value("k", -1)};
        remember(key);
        if (row.contains("axis"))
            per_axis[key][row.at("axis").get<int>()] = row.at("value").get<double>();
        else
            scalar[key] = row.at("value").get<double>();
    }
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%-24s %-14s %-4s %10s %10s %10s\n", "metric", "set", "k",
                  "dim0", "dim1", "dim2");
    out += buf;
    out += std::string(76, '-') + "\n";
    for (const auto& key : order) {
        std::string kstr = key.k >= 0 ? std::to_string(key.k) : "";
        if (per_axis.count(key)) {
            std::string cols;
            for (int axis = 0; axis < 3; ++axis) {
                char cell[32];
                if (per_axis[key].count(axis))
                    std::snprintf(cell, sizeof(cell), "%10.4f", per_axis[key][axis]);
                else
                    std::snprintf(cell, sizeof(cell), "%10s", "-");
                cols += cell;
                if (axis != 2) cols += " ";
            }
            std::snprintf(buf, sizeof(buf), "%-24s %-14s %-4s %s\n", key.metric.c_str(),
                          key.set.c_str(), kstr.c_str(), cols.c_str());
        } else {
            std::snprintf(buf, sizeof(buf), "%-24s %-14s %-4s %10.4f\n", key.metric.c_str(),
                          key.set.c_str(), kstr.c_str(), scalar[key]);
        }
        out += buf;
    }
    return out;
}

Volume blur_volume(const Volume& v, double sigma) {
    Volume out = v;
    const DoubleVec sm = gaussian_smooth3d(volume_to_double(v), v.shape, sigma);
    for (std::size_t i = 0; i < sm.size(); ++i) out.data[i] = float(sm[i]);
    return out;
}

}  // namespace voxgen
