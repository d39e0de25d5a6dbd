#pragma once

// JSON mappings for the configuration structs. Missing keys keep their
// defaults; unknown keys are rejected so typos surface as ConfigError.

#include <initializer_list>
#include <string_view>

#include <json.hpp>

#include "pvfl/dataset.hpp"
#include "pvfl/model.hpp"

namespace pvfl {

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view context);

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

void to_json(nlohmann::json& j, const ConsumptionArchetype& c);
void from_json(const nlohmann::json& j, ConsumptionArchetype& c);

void to_json(nlohmann::json& j, const SynthCenter& c);
void from_json(const nlohmann::json& j, SynthCenter& c);

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

}  // namespace pvfl
