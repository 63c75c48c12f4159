#include "voxgen/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "voxgen/rng.hpp"
#include "voxgen/volume_io.hpp"

namespace fs = std::filesystem;

namespace voxgen {

namespace {

struct Warp {
    // low-frequency sinusoidal coordinate perturbation; makes the nested
    // ellipsoids "deformed" in a seed-dependent way
    double amp[3], freq[3][2], phase[3][2];

    static Warp from_rng(Rng& rng, double amplitude) {
        Warp w{};
        for (int a = 0; a < 3; ++a) {
            w.amp[a] = amplitude * (0.6 + 0.4 * rng.uniform());
            for (int j = 0; j < 2; ++j) {
                w.freq[a][j] = 1.0 + 2.0 * rng.uniform();
                w.phase[a][j] = 6.2831853 * rng.uniform();
            }
        }
        return w;
    }

    void apply(double& u, double& v, double& t) const {
        const double u0 = u, v0 = v, t0 = t;
        u = u0 + amp[0] * std::sin(freq[0][0] * v0 + phase[0][0]) *
                     std::cos(freq[0][1] * t0 + phase[0][1]);
        v = v0 + amp[1] * std::sin(freq[1][0] * t0 + phase[1][0]) *
                     std::cos(freq[1][1] * u0 + phase[1][1]);
        t = t0 + amp[2] * std::sin(freq[2][0] * u0 + phase[2][0]) *
                     std::cos(freq[2][1] * v0 + phase[2][1]);
    }
};

double ellipsoid_rho(double u, double v, double t, const double radii[3]) {
    const double a = u / radii[0], b = v / radii[1], c = t / radii[2];
    return a * a + b * b + c * c;
}

// Per-label mean intensity in normalized units. White matter is the
// brightest tissue so region statistics have the expected ordering.
double label_mean(PhantomLabel l) {
    switch (l) {
        case PhantomLabel::background: return -0.90;
        case PhantomLabel::skull: return -0.15;
        case PhantomLabel::white_matter: return 0.45;
        case PhantomLabel::gray_matter: return 0.10;
        case PhantomLabel::ventricle: return -0.55;
    }
    return 0.0;
}

}  // namespace

Phantom generate_phantom(std::uint64_t seed, Shape3 shape, double noise_sigma,
                         double texture_amp) {
    if (shape.d < 16 || shape.h < 16 || shape.w < 16)
        throw ArgumentError("generate_phantom: shape must be >= 16 per axis, got " + shape.str());
    if (noise_sigma < 0.0) throw ArgumentError("generate_phantom: noise_sigma must be >= 0");
    if (texture_amp < 0.0) throw ArgumentError("generate_phantom: texture_amp must be >= 0");

    Rng root(seed);
    Rng geom_rng = root.fork(1);
    Rng texture_rng = root.fork(2);
    Rng noise_rng = root.fork(3);

    const Warp outer_warp = Warp::from_rng(geom_rng, 0.05);
    const Warp wm_warp = Warp::from_rng(geom_rng, 0.06);
    const double head_radii[3] = {0.90, 0.84, 0.88};
    const double brain_scale = 0.86;  // inner edge of the shell
    const double wm_radii[3] = {0.58, 0.54, 0.56};
    // paired cavities offset along H, mimicking lateral ventricles
    const double vent_radii[3] = {0.14, 0.30, 0.14};
    const double vent_off = 0.18;

    Phantom ph;
    ph.seed = seed;
    ph.noise_sigma = noise_sigma;
    ph.volume = Volume(shape);
    ph.volume.spacing = {0.7, 0.7, 0.7};
    ph.labels.assign(std::size_t(shape.numel()), 0);

    for (i64 z = 0; z < shape.d; ++z)
        for (i64 y = 0; y < shape.h; ++y)
            for (i64 x = 0; x < shape.w; ++x) {
                double u = 2.0 * (double(z) + 0.5) / double(shape.d) - 1.0;
                double v = 2.0 * (double(y) + 0.5) / double(shape.h) - 1.0;
                double t = 2.0 * (double(x) + 0.5) / double(shape.w) - 1.0;
                double uo = u, vo = v, to = t;
                outer_warp.apply(uo, vo, to);
                PhantomLabel lbl;
                if (ellipsoid_rho(uo, vo, to, head_radii) > 1.0) {
                    lbl = PhantomLabel::background;
                } else if (ellipsoid_rho(uo / brain_scale, vo / brain_scale, to / brain_scale,
                                         head_radii) > 1.0) {
                    lbl = PhantomLabel::skull;
                } else {
                    double uw = u, vw = v, tw = t;
                    wm_warp.apply(uw, vw, tw);
                    const double dv1 = ellipsoid_rho(uw, vw - vent_off, tw, vent_radii);
                    const double dv2 = ellipsoid_rho(uw, vw + vent_off, tw, vent_radii);
                    if (dv1 <= 1.0 || dv2 <= 1.0)
                        lbl = PhantomLabel::ventricle;
                    else if (ellipsoid_rho(uw, vw, tw, wm_radii) <= 1.0)
                        lbl = PhantomLabel::white_matter;
                    else
                        lbl = PhantomLabel::gray_matter;
                }
                ph.labels[std::size_t(linear_index(shape, z, y, x))] = std::uint8_t(lbl);
            }

    // band-limited texture: white noise smoothed to a ~3-voxel correlation
    // length, rescaled to unit std before applying texture_amp; smooth enough
    // that the noise estimator's high-pass barely sees it
    DoubleVec texture(std::size_t(shape.numel()));
    for (auto& v : texture) v = texture_rng.normal();
    texture = gaussian_smooth3d(texture, shape, 3.0);
    double tex_var = 0.0;
    for (double v : texture) tex_var += v * v;
    tex_var /= double(texture.size());
    const double tex_scale = tex_var > 0.0 ? 1.0 / std::sqrt(tex_var) : 0.0;

    for (i64 i = 0; i < shape.numel(); ++i) {
        const auto lbl = PhantomLabel(ph.labels[std::size_t(i)]);
        double val = label_mean(lbl);
        if (lbl == PhantomLabel::white_matter || lbl == PhantomLabel::gray_matter)
            val += texture_amp * tex_scale * texture[std::size_t(i)];
        val += noise_sigma * noise_rng.normal();
        ph.volume.data[std::size_t(i)] = float(val);
    }
    ph.volume = normalize_intensity(ph.volume, -1.0, 1.0);  // clip tails into range
    return ph;
}

RegionMask region_from_labels(const std::vector<std::uint8_t>& labels, Shape3 shape,
                              const std::string& name) {
    if (i64(labels.size()) != shape.numel())
        throw ArgumentError("region_from_labels: label count does not match shape " + shape.str());
    if (name == "cerebellum") {
        // designated phantom stand-in: the inferior-posterior gray-matter lobe
        RegionMask m(shape, name);
        for (i64 z = 0; z < shape.d; ++z)
            for (i64 y = 0; y < shape.h; ++y)
                for (i64 x = 0; x < shape.w; ++x) {
                    const bool gm =
                        labels[std::size_t(linear_index(shape, z, y, x))] ==
                        std::uint8_t(PhantomLabel::gray_matter);
                    const bool lobe = z * 5 >= shape.d * 3 && y * 2 >= shape.h;
                    m.data[std::size_t(linear_index(shape, z, y, x))] = (gm && lobe) ? 1 : 0;
                }
        return m;
    }

    std::vector<std::uint8_t> wanted;
    if (name == "background") wanted = {0};
    else if (name == "skull") wanted = {1};
    else if (name == "white-matter") wanted = {2};
    else if (name == "gray-matter") wanted = {3};
    else if (name == "ventricle") wanted = {4};
    else if (name == "whole-brain") wanted = {2, 3, 4};
    else throw ArgumentError("region_from_labels: unknown region name '" + name + "'");

    RegionMask m(shape, name);
    for (std::size_t i = 0; i < labels.size(); ++i)
        m.data[i] = std::find(wanted.begin(), wanted.end(), labels[i]) != wanted.end() ? 1 : 0;
    return m;
}

DatasetSplit make_dataset(const std::string& out_dir, int n, const DatasetParams& params,
                          std::uint64_t base_seed) {
    if (n < 2) throw ArgumentError("make_dataset: need n >= 2, got " + std::to_string(n));
    if (params.train_frac < 0 || params.test_frac < 0 ||
        std::abs(params.train_frac + params.test_frac - 1.0) > 1e-9)
        throw ArgumentError("make_dataset: split fractions must be >= 0 and sum to 1");

    std::error_code ec;
    fs::create_directories(out_dir + "/train", ec);
    fs::create_directories(out_dir + "/test", ec);
    if (!fs::is_directory(out_dir + "/train") || !fs::is_directory(out_dir + "/test"))
        throw IoError("make_dataset: cannot create output directories under " + out_dir);

    const int n_train = int(std::floor(double(n) * params.train_frac));
    Rng seed_rng(base_seed);

    DatasetSplit split;
    split.train_frac = params.train_frac;
    split.test_frac = params.test_frac;
    for (int i = 0; i < n; ++i) {
        const std::uint64_t seed = seed_rng.next_u64();
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "phantom_%04d", i);
        const std::string id = idbuf;
        const bool is_train = i < n_train;
        const std::string stem = out_dir + (is_train ? "/train/" : "/test/") + id;
        const Phantom ph = generate_phantom(seed, params.shape, params.noise_sigma,
                                            params.texture_amp);
        save_volume(ph.volume, stem, seed);
        save_labels(ph.labels, params.shape, stem);
        (is_train ? split.train_ids : split.test_ids).push_back(id);
    }

    nlohmann::ordered_json manifest;
    manifest["n"] = n;
    manifest["seed"] = base_seed;
    manifest["shape"] = {params.shape.d, params.shape.h, params.shape.w};
    manifest["noise_sigma"] = params.noise_sigma;
    manifest["texture_amp"] = params.texture_amp;
    manifest["fractions"] = {params.train_frac, params.test_frac};
    manifest["train_ids"] = split.train_ids;
    manifest["test_ids"] = split.test_ids;
    std::ofstream mf(out_dir + "/split.json");
    if (!mf) throw IoError("make_dataset: cannot write " + out_dir + "/split.json");
    mf << manifest.dump(2) << "\n";
    return split;
}

}  // namespace voxgen
