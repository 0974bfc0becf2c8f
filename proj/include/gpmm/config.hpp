#pragma once

// Run configuration and its JSON file format. Keys match the model and
// environment parameter names (alpha, beta, epsilon, n_merge, ...).

#include <cstdint>
#include <string>

#include <json.hpp>

#include "gpmm/envs.hpp"
#include "gpmm/mixture.hpp"
#include "gpmm/planner.hpp"

namespace gpmm {

enum class EnvironmentKind { cartpole, synthetic };

std::string to_string(EnvironmentKind kind);
EnvironmentKind environment_from_string(const std::string& s);

struct RunConfig {
    MixtureConfig mixture;
    PlannerConfig planner;
    EnvironmentKind environment = EnvironmentKind::cartpole;
    DynamicsSchedule schedule;
    SyntheticStreamConfig stream;
    int warmup_episodes = 1;     // episodes driven by uniform random actions
    int checkpoint_every = 0;    // steps between intermediate checkpoints, 0 = final only
    std::uint64_t seed = 0;
    std::string output_dir = "out";

    void validate() const;
};

/// Cart-pole defaults: model parameters, planner and the 4-dynamics schedule.
RunConfig default_cartpole_config();

/// Reduced cart-pole run that fits a desktop budget.
RunConfig desk_scale_cartpole_config();

/// Two 1-D linear regimes alternating A/B/A.
RunConfig default_synthetic_config();

nlohmann::ordered_json to_json(const RunConfig& config);
/// Missing keys keep their defaults; unknown keys raise FormatError.
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::string& path);
void save_run_config(const RunConfig& config, const std::string& path);

} // namespace gpmm
