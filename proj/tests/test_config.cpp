#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "voxgen/config.hpp"

using namespace voxgen;

namespace {

std::string write_config(const std::string& body) {
    static int counter = 0;
    const std::string path =
        (std::filesystem::temp_directory_path() /
         ("voxgen_cfg_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) + ".json"))
            .string();
    std::ofstream f(path);
    f << body;
    return path;
}

}  // namespace

TEST_CASE("typed getters with dotted paths") {
    const std::string path = write_config(R"({
        "seed": 42,
        "data": {"n": 10, "shape": [32, 32, 32], "noise_sigma": 0.05},
        "refiner": {"patch": 16, "schedule": "scaled_linear"}
    })");
    const ExperimentConfig cfg = ExperimentConfig::from_file(path, false);
    CHECK(cfg.get<int>("seed") == 42);
    CHECK(cfg.get<int>("data.n") == 10);
    CHECK(cfg.get<double>("data.noise_sigma") == doctest::Approx(0.05));
    CHECK(cfg.get<std::string>("refiner.schedule") == "scaled_linear");
    CHECK(cfg.get<std::vector<i64>>("data.shape") == std::vector<i64>{32, 32, 32});
    CHECK(cfg.get_or<int>("data.missing", 7) == 7);
    CHECK(cfg.has("refiner.patch"));
    CHECK(!cfg.has("refiner.missing"));
    CHECK_THROWS_AS(cfg.get<int>("nope.nope"), ConfigError);
    CHECK_THROWS_AS(cfg.get<int>("refiner.schedule"), ConfigError);  // type mismatch
}

TEST_CASE("environment overrides map VOXGEN_A__B to a.b") {
    const std::string path = write_config(R"({
        "seed": 1,
        "refiner": {"epochs": 50, "lr": 0.001}
    })");
    ::setenv("VOXGEN_REFINER__EPOCHS", "7", 1);
    ::setenv("VOXGEN_REFINER__LR", "0.25", 1);
    ::setenv("VOXGEN_DATA__TAG", "hello", 1);  // non-JSON value stays a string
    const ExperimentConfig cfg = ExperimentConfig::from_file(path);
    ::unsetenv("VOXGEN_REFINER__EPOCHS");
    ::unsetenv("VOXGEN_REFINER__LR");
    ::unsetenv("VOXGEN_DATA__TAG");
    CHECK(cfg.get<int>("refiner.epochs") == 7);
    CHECK(cfg.get<double>("refiner.lr") == doctest::Approx(0.25));
    CHECK(cfg.get<std::string>("data.tag") == "hello");
    CHECK(cfg.get<int>("seed") == 1);  // untouched keys stay
}

TEST_CASE("hash is stable for equal documents and sensitive to changes") {
    const std::string p1 = write_config(R"({"a": 1, "b": {"c": 2}})");
    const std::string p2 = write_config(R"({"a": 1, "b": {"c": 3}})");
    const ExperimentConfig a = ExperimentConfig::from_file(p1, false);
    const ExperimentConfig b = ExperimentConfig::from_file(p1, false);
    const ExperimentConfig c = ExperimentConfig::from_file(p2, false);
    CHECK(a.hash() == b.hash());
    CHECK(a.hash() != c.hash());
}

TEST_CASE("set() creates intermediate objects") {
    ExperimentConfig cfg = ExperimentConfig::from_json(nlohmann::ordered_json::object(), false);
    cfg.set("a.b.c", 5);
    CHECK(cfg.get<int>("a.b.c") == 5);
    cfg.set("a.b.c", 6);
    CHECK(cfg.get<int>("a.b.c") == 6);
}

TEST_CASE("bad files are loud") {
    CHECK_THROWS_AS(ExperimentConfig::from_file("/nonexistent/cfg.json"), ConfigError);
    const std::string bad = write_config("{not json");
    CHECK_THROWS_AS(ExperimentConfig::from_file(bad), ConfigError);
}

TEST_CASE("shipped experiment profiles parse") {
    for (const char* name : {"desk.json", "desk32.json", "paper.json"}) {
        const std::string path = std::string(VOXGEN_SRC_DIR) + "/experiments/" + name;
        const ExperimentConfig cfg = ExperimentConfig::from_file(path, false);
        CHECK(cfg.get<int>("data.n") >= 2);
        CHECK(cfg.get<int>("refiner.patch") > 0);
        CHECK(cfg.get<std::vector<int>>("ae.channels").size() == 3);
    }
}
