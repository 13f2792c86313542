#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

namespace knnattn {

inline constexpr const char* kToolVersion = "0.1.0";

// Written to <out>/manifest.json before a subcommand starts working; the
// embedded config snapshot is sufficient to reproduce the run.
struct RunManifest {
    std::string subcommand;
    std::string config_path;  // empty when flags-only
    nlohmann::json config_snapshot;
    std::uint64_t seed = 0;
    std::string out_dir;
    std::string tool_version = kToolVersion;
    std::string start_time;
    std::string end_time;  // filled on completion

    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);

    // Writes <out_dir>/manifest.json (creating the directory).
    void write() const;
};

std::string iso8601_now();

}  // namespace knnattn
