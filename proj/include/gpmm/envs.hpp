#pragma once

// Nonstationary test environments: a cart-pole swing-up whose (pole mass,
// pole length) cycles through a schedule, and a labeled piecewise-linear
// regression stream.

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "gpmm/gp_core.hpp"
#include "gpmm/random.hpp"

namespace gpmm {

struct CartpoleParams {
    double pole_mass = 0.4;   // m
    double pole_length = 0.5; // l, pivot to pole center of mass
    double cart_mass = 1.0;   // M
    double gravity = 9.8;
    double force_limit = 10.0;
    double track_limit = 3.0;
    double dt = 0.04;

    void validate() const;
};

/// Internal state; theta is measured from upright and wrapped to (-pi, pi].
struct CartpoleState {
    double x = 0.0;
    double x_dot = 0.0;
    double theta = 0.0;
    double theta_dot = 0.0;
};

inline constexpr int kCartpoleObsDim = 5;
inline constexpr int kCartpoleActionDim = 1;

/// Observation (x, x_dot, cos theta, sin theta, theta_dot).
Vector observe(const CartpoleState& s);

/// (x_ddot, theta_ddot) of the frictionless cart-pole under `force`.
std::pair<double, double> cartpole_accelerations(const CartpoleParams& p, const CartpoleState& s,
                                                 double force);

/// One semi-implicit Euler step of length p.dt; force is clipped to the limit.
/// Throws NumericalDegeneracy if the state becomes non-finite.
CartpoleState cartpole_step(const CartpoleParams& p, const CartpoleState& s, double force);

/// Same equations integrated with `substeps` equal sub-intervals.
CartpoleState cartpole_step_fine(const CartpoleParams& p, const CartpoleState& s, double force,
                                 int substeps);

/// Total mechanical energy, zero at the hanging rest configuration.
double cartpole_energy(const CartpoleParams& p, const CartpoleState& s);

/// cos(theta) - 0.01 x^2 - 0.001 u^2, with theta = atan2(sin, cos) of the
/// observation.
double cartpole_reward(const Vector& obs, const Vector& action);

/// Planning objective: the reward, minus 2 for every predicted state beyond
/// the track limit (worse than hanging still, where the episode would stop).
double cartpole_planning_reward(const Vector& obs, const Vector& action, double track_limit);

/// Hanging start with uniform +-0.05 noise on each coordinate.
CartpoleState cartpole_initial_state(Rng& rng);

struct ScheduleEntry {
    CartpoleParams params;
    int episodes = 3;
};

struct DynamicsSchedule {
    std::vector<ScheduleEntry> entries;
    int cycles = 1;
    int episode_length = 200;

    int total_episodes() const;
    /// Hidden dynamics label (index into entries) of a given episode.
    int label_of_episode(int episode) const;
    const CartpoleParams& params_of_episode(int episode) const;
    void validate() const;
};

/// The four (m, l) combinations in order, `episodes` each, `cycles` times.
DynamicsSchedule default_cartpole_schedule(int episodes_per_dynamics = 3, int cycles = 1);

/// What the agent is told about the current step. Carries no dynamics label.
struct StepContext {
    long t = 0;       // global step
    int episode = 0;
    int step = 0;     // within episode
};

struct Transition {
    Vector obs;
    Vector action;
    Vector next_obs;
};

struct AgentFeedback {
    int assignment = -1;
    int live_experts = 0;
};

class Agent {
public:
    virtual ~Agent() = default;
    virtual void begin_episode(int episode) { (void)episode; }
    virtual Vector act(const Vector& obs, const StepContext& ctx) = 0;
    virtual AgentFeedback observe(const Transition& transition, const StepContext& ctx) = 0;
};

/// One row of the evaluation log. The truth label is written here by the
/// environment runner and never passed to the agent.
struct StepRecord {
    long t = 0;
    int episode = 0;
    int step = 0;
    Vector obs;
    Vector action;
    double reward = 0.0;
    int truth_label = -1;
    int predicted = -1;
    int live_experts = 0;
};

struct EpisodeRecord {
    int episode = 0;
    int truth_label = -1;
    int cycle = 0;
    double total_reward = 0.0;
    int length = 0;
};

struct ScheduleLog {
    std::vector<StepRecord> steps;
    std::vector<EpisodeRecord> episodes;
};

/// Runs every episode of the schedule. Rows are appended to `log` as they
/// happen, so an exception from the agent leaves the partial log in place.
void run_schedule(const DynamicsSchedule& schedule, Agent& agent, std::uint64_t seed,
                  ScheduleLog& log);

struct Segment {
    int regime = 0;
    int length = 60;
};

struct SyntheticStreamConfig {
    /// Linear maps, each output_dim x input_dim.
    std::vector<Matrix> maps;
    std::vector<Segment> segments;
    double noise_std = 0.01;
    double input_low = -1.0;
    double input_high = 1.0;
    std::uint64_t seed = 0;

    /// Pass the consumer's n_merge to also check segment lengths.
    void validate(std::optional<int> n_merge = std::nullopt) const;
};

struct LabeledPoint {
    ExperienceTuple point;
    int label = -1;
};

std::vector<LabeledPoint> synthetic_stream(const SyntheticStreamConfig& cfg);

/// 1-D regimes y = 2x and y = -2x in segments A/B/A of `length` points.
SyntheticStreamConfig two_regime_stream(std::uint64_t seed, int length = 60, double noise_std = 0.01);

} // namespace gpmm
