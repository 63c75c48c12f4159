#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <unistd.h>
#include <zlib.h>

#include "voxgen/rng.hpp"
#include "voxgen/volume.hpp"
#include "voxgen/volume_io.hpp"

using namespace voxgen;
namespace fs = std::filesystem;

namespace {

std::string temp_dir() {
    static int counter = 0;
    const std::string dir =
        (fs::temp_directory_path() / ("voxgen_vol_" + std::to_string(::getpid()) + "_" +
                                      std::to_string(counter++)))
            .string();
    fs::create_directories(dir);
    return dir;
}

Volume ramp_volume(Shape3 s) {
    Volume v(s);
    for (i64 i = 0; i < s.numel(); ++i) v.data[std::size_t(i)] = float(i % 17) / 17.0f;
    return v;
}

}  // namespace

TEST_CASE("normalize_intensity endpoint, midpoint, clipping") {
    Volume v({2, 2, 2});
    const double lo = 10.0, hi = 30.0;
    v.data = {10.0f, 30.0f, 20.0f, 40.0f, 5.0f, 15.0f, 25.0f, 30.0f};
    const Volume n = normalize_intensity(v, lo, hi);
    CHECK(n.data[0] == doctest::Approx(-1.0));    // lo -> -1
    CHECK(n.data[1] == doctest::Approx(1.0));     // hi -> +1
    CHECK(n.data[2] == doctest::Approx(0.0));     // midpoint -> 0
    CHECK(n.data[3] == doctest::Approx(1.0));     // above hi clips
    CHECK(n.data[4] == doctest::Approx(-1.0));    // below lo clips
    CHECK(n.data[5] == doctest::Approx(-0.5));
    CHECK(n.intensity_range[0] == -1.0);
    CHECK(n.intensity_range[1] == 1.0);
    CHECK_THROWS_AS(normalize_intensity(v, 3.0, 3.0), ArgumentError);
    CHECK_THROWS_AS(normalize_intensity(v, 5.0, 2.0), ArgumentError);
}

TEST_CASE("normalize_intensity idempotent on normalized data") {
    Rng rng(3);
    Volume v({4, 4, 4});
    for (auto& x : v.data) x = float(rng.uniform() * 2.0 - 1.0);
    const Volume once = normalize_intensity(v, -1.0, 1.0);
    const Volume twice = normalize_intensity(once, -1.0, 1.0);
    for (i64 i = 0; i < v.numel(); ++i)
        CHECK(once.data[std::size_t(i)] ==
              doctest::Approx(twice.data[std::size_t(i)]).epsilon(1e-7));
}

TEST_CASE("crop_center identity and symmetric crop") {
    const Volume v = ramp_volume({10, 10, 10});
    const Volume same = crop_center(v, {10, 10, 10});
    CHECK(same.shape == v.shape);
    for (i64 i = 0; i < v.numel(); ++i) CHECK(same.data[std::size_t(i)] == v.data[std::size_t(i)]);

    const Volume v6 = ramp_volume({6, 6, 6});
    const Volume c = crop_center(v6, {4, 4, 4});
    for (i64 z = 0; z < 4; ++z)
        for (i64 y = 0; y < 4; ++y)
            for (i64 x = 0; x < 4; ++x) CHECK(c.at(z, y, x) == v6.at(z + 1, y + 1, x + 1));

    CHECK_THROWS_AS(crop_center(v6, {8, 4, 4}), ArgumentError);
}

TEST_CASE("crop_center odd remainder: extra voxel stays on the high side") {
    // enumerate all offsets of a length-4 window in a length-7 axis and keep
    // those satisfying the centering rule (margins differ by at most one,
    // high margin gets the extra): only offset 1 qualifies
    const i64 src = 7, tgt = 4;
    std::vector<i64> valid;
    for (i64 off = 0; off + tgt <= src; ++off) {
        const i64 low = off, high = src - tgt - off;
        if (low <= high && high - low <= 1) valid.push_back(off);
    }
    REQUIRE(valid.size() == 1);
    CHECK(valid[0] == 1);

    Volume v({7, 4, 4});
    for (i64 i = 0; i < v.numel(); ++i) v.data[std::size_t(i)] = float(i);
    const Volume c = crop_center(v, {4, 4, 4});
    for (i64 z = 0; z < 4; ++z) CHECK(c.at(z, 0, 0) == v.at(z + valid[0], 0, 0));
}

TEST_CASE("build_patch_grid examples") {
    SUBCASE("single patch") {
        const PatchGrid g = build_patch_grid({64, 64, 64}, 64, 32);
        REQUIRE(g.origins.size() == 1);
        CHECK(g.origins[0] == std::array<i64, 3>{0, 0, 0});
    }
    SUBCASE("axis 96: multiples of 32 clamped to 32") {
        std::set<i64> expect;  // independent derivation
        for (i64 o = 0; o < 96; o += 32) expect.insert(std::min<i64>(o, 96 - 64));
        REQUIRE(expect == std::set<i64>{0, 32});
        const PatchGrid g = build_patch_grid({96, 96, 96}, 64, 32);
        CHECK(g.axis_origins[0] == std::vector<i64>{0, 32});
        CHECK(g.origins.size() == 8);
    }
    SUBCASE("axis 100: clamp creates the 36 origin") {
        std::set<i64> expect;
        for (i64 o = 0; o <= 100 - 64 + 31; o += 32) expect.insert(std::min<i64>(o, 100 - 64));
        REQUIRE(expect == std::set<i64>{0, 32, 36});
        const PatchGrid g = build_patch_grid({100, 100, 100}, 64, 32);
        CHECK(g.axis_origins[1] == std::vector<i64>{0, 32, 36});
        CHECK(g.origins.size() == 27);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(build_patch_grid({32, 32, 32}, 64, 32), ArgumentError);
        CHECK_THROWS_AS(build_patch_grid({32, 32, 32}, 16, 0), ArgumentError);
        CHECK_THROWS_AS(build_patch_grid({32, 32, 32}, 16, 17), ArgumentError);
    }
}

TEST_CASE("build_patch_grid coverage and uniqueness, exhaustive over shapes") {
    for (i64 extent : {16, 17, 20, 23, 24, 31, 33, 48}) {
        for (int stride : {4, 8, 13, 16}) {
            const int p = 16;
            const PatchGrid g = build_patch_grid({extent, 16, 16}, p, stride);
            std::set<std::array<i64, 3>> uniq(g.origins.begin(), g.origins.end());
            CHECK(uniq.size() == g.origins.size());
            std::vector<int> cover(std::size_t(extent), 0);
            for (i64 o : g.axis_origins[0]) {
                REQUIRE(o >= 0);
                REQUIRE(o + p <= extent);
                for (i64 z = o; z < o + p; ++z) cover[std::size_t(z)]++;
            }
            for (i64 z = 0; z < extent; ++z) CHECK(cover[std::size_t(z)] >= 1);
        }
    }
}

TEST_CASE("extract/insert round trip and masked writes") {
    Rng rng(11);
    Volume v({12, 12, 12});
    for (auto& x : v.data) x = rng.normalf();

    const std::array<i64, 3> origin{2, 3, 4};
    const Tensor patch = extract_patch(v, origin, 6);
    CHECK(patch.shape == std::vector<i64>{6, 6, 6});

    SUBCASE("full region: canvas voxels equal patch") {
        Volume canvas({12, 12, 12});
        std::vector<std::uint8_t> all(216, 1);
        insert_patch(canvas, origin, patch, all);
        for (i64 z = 0; z < 6; ++z)
            for (i64 y = 0; y < 6; ++y)
                for (i64 x = 0; x < 6; ++x)
                    CHECK(canvas.at(2 + z, 3 + y, 4 + x) == v.at(2 + z, 3 + y, 4 + x));
    }
    SUBCASE("all-false region leaves canvas unchanged") {
        Volume canvas({12, 12, 12}, 0.5f);
        std::vector<std::uint8_t> none(216, 0);
        insert_patch(canvas, origin, patch, none);
        for (auto x : canvas.data) CHECK(x == 0.5f);
    }
    SUBCASE("overlapping patches with disjoint regions never double-write") {
        // brute-force write-count oracle over the canvas
        Volume canvas({12, 12, 12});
        std::vector<int> writes(std::size_t(canvas.numel()), 0);
        const std::array<i64, 3> o1{0, 0, 0}, o2{3, 0, 0};  // overlap in z [3,6)
        std::vector<std::uint8_t> r1(216, 0), r2(216, 0);
        i64 i = 0;
        for (i64 z = 0; z < 6; ++z)
            for (i64 y = 0; y < 6; ++y)
                for (i64 x = 0; x < 6; ++x, ++i) {
                    r1[std::size_t(i)] = z < 4 ? 1 : 0;         // writes global z in [0,4)
                    r2[std::size_t(i)] = (z + 3) >= 4 ? 1 : 0;  // writes global z in [4,9)
                }
        const Tensor p1 = extract_patch(v, o1, 6), p2 = extract_patch(v, o2, 6);
        insert_patch(canvas, o1, p1, r1);
        insert_patch(canvas, o2, p2, r2);
        auto tally = [&](const std::array<i64, 3>& o, const std::vector<std::uint8_t>& r) {
            i64 k = 0;
            for (i64 z = 0; z < 6; ++z)
                for (i64 y = 0; y < 6; ++y)
                    for (i64 x = 0; x < 6; ++x, ++k)
                        if (r[std::size_t(k)])
                            writes[std::size_t(
                                linear_index(canvas.shape, o[0] + z, o[1] + y, o[2] + x))]++;
        };
        tally(o1, r1);
        tally(o2, r2);
        for (int w : writes) CHECK(w <= 1);
    }
    SUBCASE("out of bounds origin") {
        CHECK_THROWS_AS(extract_patch(v, {8, 0, 0}, 6), ArgumentError);
        Volume canvas({12, 12, 12});
        std::vector<std::uint8_t> all(216, 1);
        CHECK_THROWS_AS(insert_patch(canvas, {0, -1, 0}, patch, all), ArgumentError);
    }
}

TEST_CASE("save/load round trip: 48^3 at 0.7mm") {
    const std::string dir = temp_dir();
    Volume v({48, 48, 48});
    v.spacing = {0.7, 0.7, 0.7};
    Rng rng(5);
    for (auto& x : v.data) x = float(rng.uniform() * 2.0 - 1.0);
    save_volume(v, dir + "/ph", 42);

    const Volume r = load_volume(dir + "/ph.f32raw");
    CHECK(r.shape == Shape3{48, 48, 48});
    CHECK(r.spacing[0] == doctest::Approx(0.7));
    CHECK(std::memcmp(r.data.data(), v.data.data(), v.data.size() * 4) == 0);

    CHECK(load_volume(dir + "/ph.json").shape == v.shape);
    CHECK(load_volume(dir + "/ph").shape == v.shape);
}

TEST_CASE("sidecar shape mismatch is an error naming the field") {
    const std::string dir = temp_dir();
    {
        std::ofstream js(dir + "/bad.json");
        js << R"({"shape":[8,8,8],"spacing":[1,1,1],"intensity_range":[-1,1]})";
        std::ofstream rf(dir + "/bad.f32raw", std::ios::binary);
        std::vector<float> floats(100, 0.0f);
        rf.write(reinterpret_cast<const char*>(floats.data()), 400);
    }
    try {
        load_volume(dir + "/bad.f32raw");
        FAIL("expected IoError");
    } catch (const IoError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("shape") != std::string::npos);
        CHECK(msg.find("100") != std::string::npos);
    }
}

TEST_CASE("non-finite voxels rejected with a count") {
    const std::string dir = temp_dir();
    {
        std::ofstream js(dir + "/nan.json");
        js << R"({"shape":[2,2,2],"spacing":[1,1,1]})";
        std::ofstream rf(dir + "/nan.f32raw", std::ios::binary);
        std::vector<float> floats(8, 1.0f);
        floats[1] = std::nanf("");
        floats[5] = std::numeric_limits<float>::infinity();
        rf.write(reinterpret_cast<const char*>(floats.data()), 32);
    }
    try {
        load_volume(dir + "/nan.f32raw");
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("2") != std::string::npos);
        CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
    }
}

namespace {

// minimal NIfTI-1 writer for tests
std::vector<unsigned char> make_nifti_bytes(Shape3 shape, const std::vector<float>& vals,
                                            float slope = 0.0f, float inter = 0.0f,
                                            bool int16_data = false) {
    std::vector<unsigned char> h(348, 0);
    auto put16 = [&](std::size_t off, std::int16_t v) { std::memcpy(h.data() + off, &v, 2); };
    auto put32i = [&](std::size_t off, std::int32_t v) { std::memcpy(h.data() + off, &v, 4); };
    auto put32f = [&](std::size_t off, float v) { std::memcpy(h.data() + off, &v, 4); };
    put32i(0, 348);
    put16(40, 3);                      // dim[0]
    put16(42, std::int16_t(shape.w));  // dim[1] = x
    put16(44, std::int16_t(shape.h));  // dim[2] = y
    put16(46, std::int16_t(shape.d));  // dim[3] = z
    put16(48, 1);
    put16(70, int16_data ? 4 : 16);  // datatype
    put16(72, int16_data ? 16 : 32);
    put32f(80, 0.5f);  // pixdim[1] (x)
    put32f(84, 0.6f);
    put32f(88, 0.7f);
    put32f(108, 352.0f);  // vox_offset
    put32f(112, slope);
    put32f(116, inter);
    h[344] = 'n';
    h[345] = '+';
    h[346] = '1';
    std::vector<unsigned char> out = h;
    out.resize(352, 0);
    if (int16_data) {
        for (float v : vals) {
            const std::int16_t s = std::int16_t(v);
            const unsigned char* b = reinterpret_cast<const unsigned char*>(&s);
            out.insert(out.end(), b, b + 2);
        }
    } else {
        for (float v : vals) {
            const unsigned char* b = reinterpret_cast<const unsigned char*>(&v);
            out.insert(out.end(), b, b + 4);
        }
    }
    return out;
}

}  // namespace

TEST_CASE("NIfTI float32 read with pixdim") {
    const std::string dir = temp_dir();
    const Shape3 shape{3, 4, 5};
    std::vector<float> vals(std::size_t(shape.numel()));
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = float(i) * 0.5f;
    const auto bytes = make_nifti_bytes(shape, vals);
    {
        std::ofstream f(dir + "/t.nii", std::ios::binary);
        f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    }
    const Volume v = load_volume(dir + "/t.nii");
    CHECK(v.shape == shape);
    CHECK(v.spacing[2] == doctest::Approx(0.5));  // x spacing
    CHECK(v.spacing[0] == doctest::Approx(0.7));  // z spacing
    CHECK(v.data[7] == doctest::Approx(3.5f));
}

TEST_CASE("NIfTI int16 with scl_slope/scl_inter, gzipped") {
    const std::string dir = temp_dir();
    const Shape3 shape{2, 3, 4};
    std::vector<float> vals(std::size_t(shape.numel()));
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = float(i);
    const auto bytes = make_nifti_bytes(shape, vals, 2.0f, 10.0f, true);
    gzFile f = gzopen((dir + "/t.nii.gz").c_str(), "wb");
    REQUIRE(f != nullptr);
    gzwrite(f, bytes.data(), unsigned(bytes.size()));
    gzclose(f);

    const Volume v = load_volume(dir + "/t.nii.gz");
    CHECK(v.shape == shape);
    CHECK(v.data[5] == doctest::Approx(5.0 * 2.0 + 10.0));
    CHECK(v.intensity_range[0] == doctest::Approx(10.0));
    CHECK(v.intensity_range[1] == doctest::Approx(2.0 * 23 + 10.0));
}

TEST_CASE("NIfTI with NaN voxels is rejected") {
    const std::string dir = temp_dir();
    std::vector<float> vals(24, 1.0f);
    vals[3] = std::nanf("");
    const auto bytes = make_nifti_bytes({2, 3, 4}, vals);
    {
        std::ofstream f(dir + "/nan.nii", std::ios::binary);
        f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    }
    try {
        load_volume(dir + "/nan.nii");
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("1 non-finite") != std::string::npos);
    }
}

TEST_CASE("gaussian_smooth3d preserves constants at borders") {
    const Shape3 s{9, 9, 9};
    DoubleVec field(std::size_t(s.numel()), 3.25);
    const DoubleVec out = gaussian_smooth3d(field, s, 1.0);
    for (double v : out) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));
}
