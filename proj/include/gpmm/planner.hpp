#pragma once

// Model predictive control by the cross-entropy method over action
// sequences, rolling out an expert's predictive mean.

#include <cstdint>
#include <functional>
#include <vector>

#include "gpmm/gp_core.hpp"

namespace gpmm {

struct PlannerConfig {
    int horizon = 20;
    int popsize = 200;
    int n_elites = 20;
    int iterations = 5;
    Vector action_low;
    Vector action_high;
    Vector init_std;
    double discount = 1.0;

    int action_dim() const { return static_cast<int>(action_low.size()); }
    void validate() const;
};

/// horizon x action_dim; row h is the action applied at step h.
using ActionSequence = Matrix;

using RewardFn = std::function<double(const Vector& obs, const Vector& action)>;

/// Iterates s <- s + mean(f(s, u_h)) and accumulates discount^h r(s_h, u_h).
/// Returns -inf when the state leaves the finite range.
double rollout_return(const GpModel& expert, const Vector& state, const ActionSequence& actions,
                      const RewardFn& reward, double discount);

/// Same quantity for many sequences at once, using batched mean predictions.
Vector rollout_returns(const GpModel& expert, const Vector& state,
                       const std::vector<ActionSequence>& sequences, const RewardFn& reward,
                       double discount);

struct PlanResult {
    Vector action;
    ActionSequence mean;
    double best_return = 0.0;
    /// Mean return of the elite set after each iteration.
    std::vector<double> elite_scores;
    bool all_failed = false;
};

/// Stateful CEM planner: keeps the previous solution for a one-step-shifted
/// warm start.
class CemPlanner {
public:
    explicit CemPlanner(PlannerConfig config);

    PlanResult plan(const GpModel& expert, const Vector& state, const RewardFn& reward,
                    std::uint64_t seed);

    /// Forget the warm start (the next plan starts from the action midpoint).
    void reset();

    const PlannerConfig& config() const { return config_; }
    const ActionSequence& warm_start() const { return mean_; }

private:
    PlannerConfig config_;
    ActionSequence mean_;
};

/// One-shot CEM plan from a cold start; returns the first action.
Vector cem_plan(const GpModel& expert, const Vector& state, const PlannerConfig& config,
                const RewardFn& reward, std::uint64_t seed);

} // namespace gpmm
