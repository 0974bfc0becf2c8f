#pragma once

// Mixture checkpoints: a versioned, checksummed JSON archive. Hyperparameters
// are stored both as named positive reals and as their exact logs, datasets
// as row-major arrays; doubles are written in shortest round-trip form.

#include <string>

#include <json.hpp>

#include "gpmm/mixture.hpp"

namespace gpmm {

inline constexpr int kCheckpointVersion = 1;

nlohmann::ordered_json checkpoint_json(const MixtureState& state);
MixtureState checkpoint_from_json(const nlohmann::json& j);

void checkpoint_save(const MixtureState& state, const std::string& path);
/// Throws FormatError on a missing, truncated, corrupt or wrong-version file.
MixtureState checkpoint_load(const std::string& path);

nlohmann::ordered_json mixture_config_json(const MixtureConfig& config);
MixtureConfig mixture_config_from_json(const nlohmann::json& j);

} // namespace gpmm
