#include "voxgen/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

extern char** environ;

namespace voxgen {

ExperimentConfig ExperimentConfig::from_file(const std::string& path, bool apply_env) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    nlohmann::ordered_json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw ConfigError("config: bad JSON in " + path + ": " + e.what());
    }
    return from_json(std::move(j), apply_env);
}

ExperimentConfig ExperimentConfig::from_json(nlohmann::ordered_json j, bool apply_env) {
    ExperimentConfig cfg;
    cfg.doc = std::move(j);
    if (apply_env) cfg.apply_env_overrides();
    return cfg;
}

const nlohmann::ordered_json* ExperimentConfig::find(const std::string& dotted) const {
    const nlohmann::ordered_json* node = &doc;
    std::size_t pos = 0;
    while (pos <= dotted.size()) {
        const std::size_t dot = dotted.find('.', pos);
        const std::string key = dotted.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (!node->is_object() || !node->contains(key)) return nullptr;
        node = &(*node)[key];
        if (dot == std::string::npos) return node;
        pos = dot + 1;
    }
    return nullptr;
}

bool ExperimentConfig::has(const std::string& dotted) const { return find(dotted) != nullptr; }

void ExperimentConfig::set(const std::string& dotted, nlohmann::ordered_json value) {
    nlohmann::ordered_json* node = &doc;
    std::size_t pos = 0;
    while (true) {
        const std::size_t dot = dotted.find('.', pos);
        const std::string key = dotted.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (dot == std::string::npos) {
            (*node)[key] = std::move(value);
            return;
        }
        if (!node->contains(key) || !(*node)[key].is_object())
            (*node)[key] = nlohmann::ordered_json::object();
        node = &(*node)[key];
        pos = dot + 1;
    }
}

std::uint64_t ExperimentConfig::hash() const {
    const std::string s = doc.dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

void ExperimentConfig::apply_env_overrides(const std::string& prefix) {
    for (char** env = environ; env && *env; ++env) {
        const std::string entry(*env);
        if (entry.rfind(prefix, 0) != 0) continue;
        const std::size_t eq = entry.find('=');
        if (eq == std::string::npos) continue;
        std::string key = entry.substr(prefix.size(), eq - prefix.size());
        const std::string value = entry.substr(eq + 1);
        // VOXGEN_REFINER__EPOCHS -> refiner.epochs
        std::string dotted;
        for (std::size_t i = 0; i < key.size(); ++i) {
            if (key[i] == '_' && i + 1 < key.size() && key[i + 1] == '_') {
                dotted += '.';
                ++i;
            } else {
                dotted += char(std::tolower(key[i]));
            }
        }
        nlohmann::ordered_json parsed;
        try {
            parsed = nlohmann::ordered_json::parse(value);
        } catch (const std::exception&) {
            parsed = value;  // plain string
        }
        set(dotted, std::move(parsed));
    }
}

}  // namespace voxgen
