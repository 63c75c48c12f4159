#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "voxgen/volume_io.hpp"

using namespace voxgen;
namespace fs = std::filesystem;

namespace {

std::string temp_dir() {
    static int counter = 0;
    const std::string dir =
        (fs::temp_directory_path() / ("voxgen_cli_" + std::to_string(::getpid()) + "_" +
                                      std::to_string(counter++)))
            .string();
    fs::create_directories(dir);
    return dir;
}

int run(const std::string& args, const std::string& log = "/dev/null") {
    const std::string cmd = std::string(VOXGEN_BIN) + " " + args + " >" + log + " 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

std::string write_micro_config(const std::string& dir) {
    const std::string path = dir + "/cfg.json";
    std::ofstream f(path);
    f << R"({
  "seed": 11,
  "out": ")" << dir
      << R"(/run",
  "data": {"n": 10, "shape": [16, 16, 16], "noise_sigma": 0.05, "texture_amp": 0.1,
           "train_frac": 0.8, "test_frac": 0.2},
  "ae": {"channels": [6, 8, 8], "epochs": 1, "batch": 2, "lr": 0.001},
  "ldm": {"channels": [8, 12], "attn_levels": [1], "T": 6, "beta_start": 0.05,
          "beta_end": 0.3, "schedule": "linear", "epochs": 1, "batch": 2, "lr": 0.001},
  "refiner": {"patch": 8, "stride": 4, "channels": [6, 8], "attn_levels": [], "T": 4,
              "beta_start": 0.05, "beta_end": 0.3, "schedule": "scaled_linear",
              "epochs": 1, "batch": 2, "patches_per_volume": 2, "lr": 0.001},
  "generate": {"n": 2},
  "metrics": {"lpips_patch": 8, "lpips_n": 8, "sharp_patch": 8, "sharp_n": 8,
              "feat_patch": 8, "feat_n": 8, "kl_bins": 16, "hog_cell": 4, "k_values": [2]}
})";
    return path;
}

}  // namespace

TEST_CASE("make-data writes the 8/2 split and reruns bit-identically") {
    const std::string dir = temp_dir();
    const std::string cfg = write_micro_config(dir);

    REQUIRE(run("--config " + cfg + " make-data") == 0);
    CHECK(list_volume_stems(dir + "/run/data/train").size() == 8);
    CHECK(list_volume_stems(dir + "/run/data/test").size() == 2);

    const std::string first = slurp(dir + "/run/data/train/phantom_0000.f32raw");
    REQUIRE(run("--config " + cfg + " make-data") == 0);
    CHECK(slurp(dir + "/run/data/train/phantom_0000.f32raw") == first);
    CHECK(!first.empty());
}

TEST_CASE("train refiner without the ae checkpoint names the missing stage") {
    const std::string dir = temp_dir();
    const std::string cfg = write_micro_config(dir);
    REQUIRE(run("--config " + cfg + " make-data") == 0);
    const std::string log = dir + "/err.txt";
    CHECK(run("--config " + cfg + " train refiner", log) == 2);
    const std::string msg = slurp(log);
    INFO(msg);
    CHECK(msg.find("'ae'") != std::string::npos);
}

TEST_CASE("full micro pipeline: train, reconstruct, generate, refine, evaluate") {
    const std::string dir = temp_dir();
    const std::string cfg = write_micro_config(dir);
    REQUIRE(run("--config " + cfg + " make-data") == 0);
    REQUIRE(run("--config " + cfg + " train ae") == 0);
    REQUIRE(run("--config " + cfg + " train ldm") == 0);
    REQUIRE(run("--config " + cfg + " train refiner") == 0);
    CHECK(fs::exists(dir + "/run/checkpoints/ae.ckpt"));
    CHECK(fs::exists(dir + "/run/checkpoints/ae_loss.txt"));
    CHECK(fs::exists(dir + "/run/checkpoints/ldm.ckpt"));
    CHECK(fs::exists(dir + "/run/checkpoints/refiner.ckpt"));

    REQUIRE(run("--config " + cfg + " reconstruct") == 0);
    CHECK(list_volume_stems(dir + "/run/recon").size() == 2);
    CHECK(fs::exists(dir + "/run/recon/phantom_0008.prov.json"));

    REQUIRE(run("--config " + cfg + " generate") == 0);
    CHECK(list_volume_stems(dir + "/run/synth").size() == 2);

    REQUIRE(run("--config " + cfg + " refine") == 0);
    REQUIRE(run("--config " + cfg + " refine --in " + dir + "/run/synth") == 0);
    CHECK(list_volume_stems(dir + "/run/refined").size() == 4);
    CHECK(fs::exists(dir + "/run/refined/synth_0000.prov.json"));

    // refined exports are clipped to [-1,1]
    const Volume refined = load_volume(dir + "/run/refined/synth_0000.f32raw");
    for (float v : refined.data) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }

    const std::string log = dir + "/eval.txt";
    REQUIRE(run("--config " + cfg + " evaluate", log) == 0);
    CHECK(fs::exists(dir + "/run/reports/metrics.json"));
    const std::string table = slurp(log);
    CHECK(table.find("dim0") != std::string::npos);
    CHECK(table.find("dim1") != std::string::npos);
    CHECK(table.find("dim2") != std::string::npos);
    CHECK(table.find("lpips") != std::string::npos);

    // deterministic outputs: same seed reruns produce identical volumes
    const std::string snap = slurp(dir + "/run/synth/synth_0001.f32raw");
    REQUIRE(run("--config " + cfg + " generate") == 0);
    CHECK(slurp(dir + "/run/synth/synth_0001.f32raw") == snap);

    // reports are byte-identical across reruns
    const std::string report = slurp(dir + "/run/reports/metrics.json");
    REQUIRE(run("--config " + cfg + " evaluate") == 0);
    CHECK(slurp(dir + "/run/reports/metrics.json") == report);

    // resumed training continues the epoch numbering in the loss log
    REQUIRE(run("--config " + cfg + " train ae --resume") == 0);
    std::ifstream loss(dir + "/run/checkpoints/ae_loss.txt");
    std::string line, last;
    int lines = 0;
    while (std::getline(loss, line))
        if (!line.empty()) {
            last = line;
            ++lines;
        }
    CHECK(lines == 2);
    CHECK(last.substr(0, 2) == "2\t");
}

TEST_CASE("generate --n 0 is a no-op success even without checkpoints") {
    const std::string dir = temp_dir();
    const std::string cfg = write_micro_config(dir);
    CHECK(run("--config " + cfg + " generate --n 0") == 0);
}

TEST_CASE("export-slices: constant volume maps to uniform mid-gray") {
    const std::string dir = temp_dir();
    const std::string cfg = write_micro_config(dir);
    Volume v({8, 8, 8}, 0.0f);
    save_volume(v, dir + "/flat");
    REQUIRE(run("--config " + cfg + " export-slices --volume " + dir +
                "/flat.f32raw --axis 0 --index 4 --out-file " + dir + "/flat.pgm") == 0);
    const std::string pgm = slurp(dir + "/flat.pgm");
    REQUIRE(pgm.substr(0, 2) == "P5");
    const std::size_t header_end = pgm.find("255\n") + 4;
    REQUIRE(pgm.size() == header_end + 64);
    for (std::size_t i = header_end; i < pgm.size(); ++i)
        CHECK(int(std::uint8_t(pgm[i])) == 128);  // (0+1)/2*255 rounded
}

TEST_CASE("usage and input errors exit with code 2") {
    const std::string dir = temp_dir();
    const std::string cfg = write_micro_config(dir);
    CHECK(run("--config " + cfg + " evaluate --orig " + dir + "/missing") == 2);
    CHECK(run("--config /nonexistent.json make-data") == 2);
    CHECK(run("--config " + cfg + " train bogus") == 2);
    CHECK(run("--config " + cfg + " no-such-command") != 0);
    fs::create_directories(dir + "/empty");
    CHECK(run("--config " + cfg + " evaluate --orig " + dir + "/empty") == 2);
}

TEST_CASE("environment overrides reach the pipeline") {
    const std::string dir = temp_dir();
    const std::string cfg = write_micro_config(dir);
    ::setenv("VOXGEN_DATA__N", "4", 1);
    const int rc = run("--config " + cfg + " make-data");
    ::unsetenv("VOXGEN_DATA__N");
    REQUIRE(rc == 0);
    CHECK(list_volume_stems(dir + "/run/data/train").size() == 3);
    CHECK(list_volume_stems(dir + "/run/data/test").size() == 1);
}
