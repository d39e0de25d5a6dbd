#include "pvfl/config.hpp"

#include <algorithm>
#include <cstdint>
#include <string>
#include <type_traits>

#include "pvfl/error.hpp"

namespace pvfl {

namespace {

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, std::string_view context) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
    if (!it->is_number_integer() || it->template get<std::int64_t>() < 0) {
      throw ConfigError(std::string(context) + "." + key + " must be a non-negative integer");
    }
  }
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(context) + "." + key + ": " + e.what());
  }
}

void require_object(const nlohmann::json& j, std::string_view context) {
  if (!j.is_object()) throw ConfigError(std::string(context) + " must be a JSON object");
}

}  // namespace

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view context) {
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(std::string(context) + ": unknown key '" + key + "'");
    }
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"blocks", c.blocks},
                     {"d_emb", c.d_emb},
                     {"d_k", c.d_k},
                     {"d_ff", c.d_ff},
                     {"window_days", c.window_days},
                     {"slots", c.slots},
                     {"learning_rate", c.learning_rate},
                     {"epochs_per_round", c.epochs_per_round},
                     {"batch_size", c.batch_size},
                     {"recent_days", c.recent_days}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  constexpr std::string_view ctx = "model";
  require_object(j, ctx);
  reject_unknown_keys(j,
                      {"blocks", "d_emb", "d_k", "d_ff", "window_days", "slots", "learning_rate",
                       "epochs_per_round", "batch_size", "recent_days"},
                      ctx);
  read(j, "blocks", c.blocks, ctx);
  read(j, "d_emb", c.d_emb, ctx);
  read(j, "d_k", c.d_k, ctx);
  read(j, "d_ff", c.d_ff, ctx);
  read(j, "window_days", c.window_days, ctx);
  read(j, "slots", c.slots, ctx);
  read(j, "learning_rate", c.learning_rate, ctx);
  read(j, "epochs_per_round", c.epochs_per_round, ctx);
  read(j, "batch_size", c.batch_size, ctx);
  read(j, "recent_days", c.recent_days, ctx);
  c.validate();
}

void to_json(nlohmann::json& j, const ConsumptionArchetype& c) {
  j = nlohmann::json{{"base", c.base},
                     {"morning_peak", c.morning_peak},
                     {"morning_hour", c.morning_hour},
                     {"evening_peak", c.evening_peak},
                     {"evening_hour", c.evening_hour},
                     {"midday", c.midday},
                     {"noise", c.noise}};
}

void from_json(const nlohmann::json& j, ConsumptionArchetype& c) {
  constexpr std::string_view ctx = "consumption";
  require_object(j, ctx);
  reject_unknown_keys(j, {"base", "morning_peak", "morning_hour", "evening_peak", "evening_hour", "midday", "noise"},
                      ctx);
  read(j, "base", c.base, ctx);
  read(j, "morning_peak", c.morning_peak, ctx);
  read(j, "morning_hour", c.morning_hour, ctx);
  read(j, "evening_peak", c.evening_peak, ctx);
  read(j, "evening_hour", c.evening_hour, ctx);
  read(j, "midday", c.midday, ctx);
  read(j, "noise", c.noise, ctx);
}

void to_json(nlohmann::json& j, const SynthCenter& c) {
  j = nlohmann::json{{"id", c.center_id},
                     {"prosumers", c.prosumers},
                     {"days", c.days},
                     {"irradiance_amplitude", c.irradiance_amplitude},
                     {"irradiance_variability", c.irradiance_variability},
                     {"panel_kw_mean", c.panel_kw_mean},
                     {"panel_kw_spread", c.panel_kw_spread},
                     {"panel_orientation", c.panel_orientation},
                     {"consumption", c.consumption},
                     {"onboard", c.onboard}};
}

void from_json(const nlohmann::json& j, SynthCenter& c) {
  constexpr std::string_view ctx = "synthetic center";
  require_object(j, ctx);
  reject_unknown_keys(j,
                      {"id", "prosumers", "days", "irradiance_amplitude", "irradiance_variability", "panel_kw_mean",
                       "panel_kw_spread", "panel_orientation", "consumption", "onboard"},
                      ctx);
  read(j, "id", c.center_id, ctx);
  read(j, "prosumers", c.prosumers, ctx);
  read(j, "days", c.days, ctx);
  read(j, "irradiance_amplitude", c.irradiance_amplitude, ctx);
  read(j, "irradiance_variability", c.irradiance_variability, ctx);
  read(j, "panel_kw_mean", c.panel_kw_mean, ctx);
  read(j, "panel_kw_spread", c.panel_kw_spread, ctx);
  read(j, "panel_orientation", c.panel_orientation, ctx);
  if (j.contains("consumption")) c.consumption = j.at("consumption").get<ConsumptionArchetype>();
  read(j, "onboard", c.onboard, ctx);
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{
      {"start_date", c.start_date}, {"days", c.days}, {"pv_noise", c.pv_noise}, {"centers", c.centers}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  constexpr std::string_view ctx = "synthetic";
  require_object(j, ctx);
  reject_unknown_keys(j, {"start_date", "days", "pv_noise", "centers"}, ctx);
  read(j, "start_date", c.start_date, ctx);
  read(j, "days", c.days, ctx);
  read(j, "pv_noise", c.pv_noise, ctx);
  if (j.contains("centers")) {
    if (!j.at("centers").is_array()) throw ConfigError("synthetic.centers must be an array");
    c.centers.clear();
    for (const auto& cj : j.at("centers")) c.centers.push_back(cj.get<SynthCenter>());
  }
  c.validate();
}

}  // namespace pvfl
