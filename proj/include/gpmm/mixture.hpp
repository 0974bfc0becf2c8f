#pragma once

// Infinite mixture of GP dynamics experts learned from a stream: sticky
// transition prior, hard assignment, expert spawning, per-expert
// hyperparameter updates, merge/prune and data distillation.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gpmm/distill.hpp"
#include "gpmm/gp_core.hpp"

namespace gpmm {

enum class PriorMode { transition, dp };

std::string to_string(PriorMode mode);
PriorMode prior_mode_from_string(const std::string& s);

/// Scalar initial hyperparameters; expanded to every dimension on use.
struct InitialKernel {
    double output_scale = 0.5;
    double inv_lengthscale = 1.0;
    double noise_std = 0.001;

    KernelParams expand(int input_dim, int output_dim) const
    {
        return KernelParams(output_dim, input_dim, output_scale, inv_lengthscale, noise_std);
    }
};

struct MixtureConfig {
    double alpha = 0.1;          // concentration
    double beta = 1.0;           // sticky mass on self-transition
    double epsilon = 20.0;       // merge KL threshold
    int n_merge = 15;            // burn-in length
    int n_distill = 1500;        // distillation trigger
    int m = 1300;                // inducing points kept by distillation
    InitialKernel theta_init;
    double lr = 0.1;
    int steps_per_tick = 10;
    int K_max = 16;

    PriorMode prior_mode = PriorMode::transition;
    bool merge_prune = true;

    int hyper_batch = 0;             // rows per stochastic step, 0 = full batch
    int global_refresh_every = 200;  // observations between global-prior refits
    int global_reservoir = 2000;     // N_g
    int global_steps = 20;
    int global_batch = 256;
    int distill_trials = 16;
    int distill_max_swap_evaluations = -1;
    double min_noise_std = 0.01;     // floor on every learned sigma_i, 0 = none
    std::uint64_t seed = 0;

    /// Throws ContractViolation when a field is out of range.
    void validate() const;
};

struct Expert {
    int id = -1;
    GpModel model;
    /// Every observation ever routed here, including merged-in ones. Used as
    /// the cluster size by the DP prior; unaffected by distillation.
    long assigned_total = 0;
    bool burn_in = true;

    int count() const { return model.data().rows(); }
};

/// Hard-assignment transition counts N(from -> to) plus the previous assignment.
class TransitionStats {
public:
    long count(int from, int to) const;
    long total() const;
    /// Count of transitions leaving `from`.
    long row_total(int from) const;

    std::optional<int> prev() const { return prev_; }
    void set_prev(std::optional<int> prev) { prev_ = prev; }

    /// Records prev -> to (when prev exists) and makes `to` the new prev.
    void record(int to);

    /// Folds row and column `from` into `into` (used when experts merge).
    void fold(int from, int into);

    const std::map<std::pair<int, int>, long>& counts() const { return counts_; }
    void set_count(int from, int to, long value);

private:
    std::map<std::pair<int, int>, long> counts_;
    std::optional<int> prev_;
};

struct GlobalPrior {
    Dataset reservoir;
    KernelParams params;
    long seen = 0;
    long since_refresh = 0;
    int refreshes = 0;
};

enum class EventKind {
    spawn,
    merge,
    burn_in_end,
    prune,
    distill,
    cap_reached,
    likelihood_degenerate,
    hyper_rejected,
    hyper_non_finite,
    global_refresh,
    global_refresh_failed,
    planner_all_failed,
};

std::string to_string(EventKind kind);

struct Event {
    EventKind kind;
    long step = 0;
    int expert = -1;
    int other = -1;
    std::string detail;
};

class EventLog {
public:
    void emit(Event event);
    long count(EventKind kind) const;
    const std::vector<Event>& events() const { return events_; }
    void clear() { events_.clear(); counts_.clear(); }

private:
    static constexpr std::size_t kMaxKept = 100000;
    std::vector<Event> events_;
    std::map<EventKind, long> counts_;
};

/// Normalized prior over [existing experts..., new expert].
///
/// Transition mode: weight_k = N(prev -> k) + beta [k == prev], new = alpha.
/// With no previous assignment all mass goes to the new slot.
Vector transition_prior(const TransitionStats& stats, std::span<const int> expert_ids,
                        const MixtureConfig& cfg);

/// DP (Chinese restaurant) prior: weight_k = cluster size, new = alpha.
Vector dp_prior(std::span<const long> cluster_sizes, double alpha);

/// Posterior over slots from prior weights and per-slot log-likelihoods,
/// computed in the log domain with max subtraction. Zero prior weight gives
/// zero posterior.
Vector assignment_posterior(const Vector& prior, const Vector& loglikes);

/// KL(N(mean_p, var_p) || N(mean_q, var_q)) for scalars.
double gaussian_kl(double mean_p, double var_p, double mean_q, double var_q);

/// sum over rows x of the newer expert's data of
///   sum_i KL(p_old(y_i | x) || p_new(y_i | x)),
/// using each expert's predictive (latent variance plus sigma_i^2).
double merge_distance(const GpModel& newer, const GpModel& older);

struct ObserveResult {
    int assignment = -1;           // id holding the point after merge/prune
    int chosen = -1;               // id picked by the argmax (before merges)
    bool spawned = false;
    std::optional<int> merged_into; // burn-in merge target of the chosen expert
    std::optional<int> pruned;      // expert removed by the prune check
    std::vector<int> distilled;     // experts distilled on this step
    Vector posterior;               // assignment probabilities over slots
};

/// Everything needed to reproduce a MixtureState exactly.
struct MixtureSnapshot {
    MixtureConfig config;
    int input_dim = 0;
    int output_dim = 0;
    long step = 0;
    int next_id = 0;
    std::vector<Expert> experts;
    TransitionStats stats;
    GlobalPrior global;
};

class MixtureState {
public:
    MixtureState(MixtureConfig config, int input_dim, int output_dim);
    explicit MixtureState(MixtureSnapshot snapshot);

    ObserveResult observe(const ExperienceTuple& point);

    const MixtureConfig& config() const { return config_; }
    int input_dim() const { return input_dim_; }
    int output_dim() const { return output_dim_; }
    long steps_observed() const { return step_; }

    const std::vector<Expert>& experts() const { return experts_; }
    int live_count() const { return static_cast<int>(experts_.size()); }
    const Expert* find(int id) const;
    const Expert& expert(int id) const;
    std::vector<int> expert_ids() const;
    long total_points() const;

    const TransitionStats& stats() const { return stats_; }
    const GlobalPrior& global_prior() const { return global_; }
    /// Params a newly spawned expert starts from (and that score the new slot).
    KernelParams new_expert_params() const;

    EventLog& events() { return events_; }
    const EventLog& events() const { return events_; }

    /// Prior over [experts()..., new] for the next observation.
    Vector current_prior() const;

    /// Burn-in end check for `expert_id`: merges it into the closest older
    /// expert when the distance is <= epsilon. Returns the survivor id.
    std::optional<int> end_burn_in_merge(int expert_id);

    /// After a switch z_old -> z_new: merges z_old away when it holds at most
    /// n_merge points. Returns the pruned id.
    std::optional<int> prune_check(int z_old, int z_new);

    /// Merges expert `from` into `into`; data, counts and transitions move over.
    void merge_experts(int from, int into);

    /// Refits the global prior on the reservoir.
    void refresh_global_prior();

    /// Distills `expert_id` when it holds at least n_distill points.
    bool distill_if_due(int expert_id);

    MixtureSnapshot snapshot() const;

    /// Test hook: inserts an expert with the given model (as if spawned).
    int add_expert(GpModel model, bool burn_in);

private:
    Expert& mutable_expert(int id);
    void update_hyperparams(Expert& e, std::uint64_t salt);
    void add_to_reservoir(const ExperienceTuple& point);
    int pick_slot(const Vector& log_post, int k_live) const;

    MixtureConfig config_;
    int input_dim_ = 0;
    int output_dim_ = 0;
    long step_ = 0;
    int next_id_ = 0;
    std::vector<Expert> experts_;
    TransitionStats stats_;
    GlobalPrior global_;
    EventLog events_;
};

} // namespace gpmm
