#pragma once

// The online loop: random first episode, then CEM-MPC with the most recently
// assigned expert, feeding every transition to the mixture.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gpmm/config.hpp"
#include "gpmm/metrics.hpp"

namespace gpmm {

class GpmmAgent : public Agent {
public:
    using StepHook = std::function<void(const MixtureState&, long steps_done)>;

    GpmmAgent(const MixtureConfig& mixture, const PlannerConfig& planner, std::uint64_t seed,
              int warmup_episodes, int obs_dim, RewardFn reward);

    void begin_episode(int episode) override;
    Vector act(const Vector& obs, const StepContext& ctx) override;
    AgentFeedback observe(const Transition& transition, const StepContext& ctx) override;

    MixtureState& mixture() { return mixture_; }
    const MixtureState& mixture() const { return mixture_; }
    /// Called after each observation.
    void set_step_hook(StepHook hook) { hook_ = std::move(hook); }

    /// Inputs and targets in the order they were streamed, with assignments.
    const Dataset& streamed() const { return streamed_; }
    const std::vector<int>& assignments() const { return assignments_; }

    double plan_seconds() const { return plan_seconds_; }
    double observe_seconds() const { return observe_seconds_; }

private:
    MixtureState mixture_;
    CemPlanner planner_;
    std::uint64_t seed_;
    int warmup_episodes_;
    RewardFn reward_;
    std::optional<int> last_assigned_;
    int episode_ = 0;
    StepHook hook_;
    Dataset streamed_;
    std::vector<int> assignments_;
    double plan_seconds_ = 0.0;
    double observe_seconds_ = 0.0;
};

struct RunResult {
    ScheduleLog log;
    MetricsReport report;
    std::vector<Event> events;
    std::map<std::string, long> event_counts;
    std::optional<MixtureState> final_state;
    Dataset streamed;
    std::vector<int> assignments;
    double seconds = 0.0;
    bool failed = false;
    std::string error;
};

/// Runs the configured environment. When `write_outputs` is set, writes
/// steps.csv, episodes.csv, transitions.csv, report.json, config.json and
/// checkpoint.json into config.output_dir, also after a failure.
RunResult run(const RunConfig& config, bool write_outputs = true);

/// Streams the transitions.csv rows from the checkpoint's step onward (at most
/// `max_steps`, negative for all) and returns the assignments.
struct ReplayResult {
    long first_step = 0;
    std::vector<int> assignments;
    std::vector<int> recorded;
};

ReplayResult replay(MixtureState state, const Dataset& stream, const std::vector<long>& steps,
                    const std::vector<int>& recorded, long max_steps);
ReplayResult replay_files(const std::string& checkpoint_path, const std::string& transitions_path,
                          long max_steps);

void write_transitions_csv(const Dataset& streamed, const std::vector<int>& assignments,
                           const std::string& path);
/// Reads transitions.csv back into (steps, data, recorded assignments).
void read_transitions_csv(const std::string& path, std::vector<long>& steps, Dataset& data,
                          std::vector<int>& recorded);

} // namespace gpmm
