#pragma once

#include <string>

#include <json.hpp>

#include "voxgen/common.hpp"

namespace voxgen {

// Declarative experiment configuration: one JSON document driving every
// pipeline stage. Any key can be overridden from the environment with
// VOXGEN_<PATH> where path segments are joined by double underscores,
// e.g. VOXGEN_REFINER__EPOCHS=4.
struct ExperimentConfig {
    nlohmann::ordered_json doc;

    static ExperimentConfig from_file(const std::string& path, bool apply_env = true);
    static ExperimentConfig from_json(nlohmann::ordered_json j, bool apply_env = true);

    bool has(const std::string& dotted) const;

    template <typename T>
    T get(const std::string& dotted) const {
        const auto* node = find(dotted);
        if (!node) throw ConfigError("config: missing required key '" + dotted + "'");
        try {
            return node->get<T>();
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + dotted + "' has unexpected type");
        }
    }

    template <typename T>
    T get_or(const std::string& dotted, T fallback) const {
        const auto* node = find(dotted);
        if (!node) return fallback;
        try {
            return node->get<T>();
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + dotted + "' has unexpected type");
        }
    }

    const nlohmann::ordered_json* find(const std::string& dotted) const;
    void set(const std::string& dotted, nlohmann::ordered_json value);

    // FNV-1a over the canonical serialization; recorded in provenance files
    std::uint64_t hash() const;

    void apply_env_overrides(const std::string& prefix = "VOXGEN_");
};

}  // namespace voxgen
