#include "knnattn/manifest.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace knnattn {

std::string iso8601_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02dZ", tm.tm_year + 1900,
                  tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec);
    return buf;
}

nlohmann::json RunManifest::to_json() const {
    return {{"subcommand", subcommand},
            {"config_path", config_path},
            {"config_snapshot", config_snapshot},
            {"seed", seed},
            {"out_dir", out_dir},
            {"tool_version", tool_version},
            {"start_time", start_time},
            {"end_time", end_time.empty() ? nlohmann::json() : nlohmann::json(end_time)}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
    RunManifest m;
    m.subcommand = j.at("subcommand").get<std::string>();
    m.config_path = j.value("config_path", std::string{});
    m.config_snapshot = j.at("config_snapshot");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.out_dir = j.value("out_dir", std::string{});
    m.tool_version = j.value("tool_version", std::string{});
    m.start_time = j.value("start_time", std::string{});
    if (j.contains("end_time") && !j.at("end_time").is_null()) {
        m.end_time = j.at("end_time").get<std::string>();
    }
    return m;
}

void RunManifest::write() const {
    std::filesystem::create_directories(out_dir);
    const std::string path = out_dir + "/manifest.json";
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write manifest: " + path);
    os << to_json().dump(2) << '\n';
}

}  // namespace knnattn
