#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>

#include "hipt/common.hpp"

namespace hipt {

/**
 * Flat key-value run configuration with dotted keys, e.g.
 * "train.stage1.lr0 = 0.002". Lines starting with '#' are comments. Flags
 * override file values; the full map is echoed into every results file.
 */
class RunConfig {
public:
    RunConfig() = default;

    static RunConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error("cannot open config file: " + path);
        RunConfig cfg;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string stripped = trim(line);
            if (stripped.empty() || stripped[0] == '#') continue;
            std::size_t eq = stripped.find('=');
            if (eq == std::string::npos) {
                throw Error("config file " + path + " line " + std::to_string(lineno) +
                            ": expected 'key = value'");
            }
            std::string key = trim(stripped.substr(0, eq));
            std::string value = trim(stripped.substr(eq + 1));
            if (key.empty()) {
                throw Error("config file " + path + " line " + std::to_string(lineno) +
                            ": empty key");
            }
            cfg.values_[key] = value;
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (const std::exception&) {
            throw Error("config key '" + key + "': cannot parse '" + it->second + "' as number");
        }
    }

    long long get_int(const std::string& key, long long fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stoll(it->second);
        } catch (const std::exception&) {
            throw Error("config key '" + key + "': cannot parse '" + it->second + "' as integer");
        }
    }

    std::uint64_t get_seed(const std::string& key, std::uint64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stoull(it->second);
        } catch (const std::exception&) {
            throw Error("config key '" + key + "': cannot parse '" + it->second + "' as seed");
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::string v = to_lower(it->second);
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw Error("config key '" + key + "': cannot parse '" + it->second + "' as bool");
    }

    /// Sorted key-value view, serialized into every results file.
    const std::map<std::string, std::string>& echo() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace hipt
