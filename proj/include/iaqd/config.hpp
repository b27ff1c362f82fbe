#pragma once

// Flat JSON form of TrainConfig. Keys mirror the field names; unknown keys are
// rejected so a run's config.json always describes the run completely.

#include <filesystem>

#include <json.hpp>

#include "iaqd/core.hpp"

namespace iaqd {

nlohmann::ordered_json config_to_json(const TrainConfig& config);

/// Starts from `base` and overrides every key present in `json`. The result is validated.
TrainConfig config_from_json(const nlohmann::json& json, const TrainConfig& base = {});

TrainConfig load_config(const std::filesystem::path& path, const TrainConfig& base = {});
void save_config(const std::filesystem::path& path, const TrainConfig& config,
                 const nlohmann::ordered_json& derived = nlohmann::ordered_json::object());

}  // namespace iaqd
