#pragma once

#include <initializer_list>
#include <string>

#include <json.hpp>

#include "knnattn/vit.hpp"

namespace knnattn {

// Configs reject unknown keys so a typo cannot silently change an experiment.
inline void require_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const std::string& context) {
    if (!j.is_object()) throw std::invalid_argument(context + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed) {
            if (key == a) {
                known = true;
                break;
            }
        }
        if (!known) throw std::invalid_argument(context + ": unknown key '" + key + "'");
    }
}

inline constexpr int kConfigSchemaVersion = 1;

inline void check_schema_version(const nlohmann::json& j, const std::string& context) {
    if (!j.contains("schema_version")) {
        throw std::invalid_argument(context + ": missing schema_version");
    }
    if (j.at("schema_version").get<int>() != kConfigSchemaVersion) {
        throw std::invalid_argument(context + ": unsupported schema_version");
    }
}

}  // namespace knnattn

namespace knnattn::vit {

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);
void to_json(nlohmann::json& j, const SyntheticTaskConfig& cfg);
void from_json(const nlohmann::json& j, SyntheticTaskConfig& cfg);
void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

}  // namespace knnattn::vit
