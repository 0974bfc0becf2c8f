#include "gpmm/planner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "gpmm/errors.hpp"
#include "gpmm/random.hpp"

namespace gpmm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kStdFloor = 1e-3;

ActionSequence midpoint_sequence(const PlannerConfig& cfg)
{
    ActionSequence m(cfg.horizon, cfg.action_dim());
    const Vector mid = 0.5 * (cfg.action_low + cfg.action_high);
    for (int h = 0; h < cfg.horizon; ++h)
        m.row(h) = mid.transpose();
    return m;
}

ActionSequence clip(ActionSequence a, const PlannerConfig& cfg)
{
    for (int h = 0; h < a.rows(); ++h)
        a.row(h) = a.row(h).cwiseMax(cfg.action_low.transpose()).cwiseMin(cfg.action_high.transpose());
    return a;
}

} // namespace

void PlannerConfig::validate() const
{
    require(horizon >= 1, "horizon must be >= 1");
    require(popsize >= 1, "popsize must be >= 1");
    require(n_elites >= 1 && n_elites <= popsize, "need 1 <= n_elites <= popsize");
    require(iterations >= 0, "iterations must be >= 0");
    require(action_low.size() >= 1 && action_low.size() == action_high.size() &&
                init_std.size() == action_low.size(),
            "action bounds and init_std must have equal nonzero length");
    require((action_low.array() < action_high.array()).all(), "action_low < action_high required");
    require((init_std.array() > 0.0).all(), "init_std must be positive");
    require(discount > 0.0 && discount <= 1.0, "discount must lie in (0, 1]");
}

double rollout_return(const GpModel& expert, const Vector& state, const ActionSequence& actions,
                      const RewardFn& reward, double discount)
{
    const int c = expert.output_dim();
    require(state.size() == c, "state has wrong dimension");
    require(actions.cols() + c == expert.input_dim(), "actions have wrong dimension");
    require(state.allFinite(), "start state must be finite");
    Vector s = state;
    Vector q(expert.input_dim());
    double total = 0.0;
    double g = 1.0;
    for (int h = 0; h < actions.rows(); ++h) {
        const Vector u = actions.row(h).transpose();
        total += g * reward(s, u);
        g *= discount;
        q << s, u;
        s += expert.predict(q).mean;
        if (!s.allFinite() || !std::isfinite(total))
            return kNegInf;
    }
    return total;
}

Vector rollout_returns(const GpModel& expert, const Vector& state,
                       const std::vector<ActionSequence>& sequences, const RewardFn& reward,
                       double discount)
{
    const int c = expert.output_dim();
    const int d = expert.input_dim() - c;
    require(state.size() == c, "state has wrong dimension");
    const auto pop = static_cast<Eigen::Index>(sequences.size());
    Vector totals = Vector::Zero(pop);
    if (pop == 0)
        return totals;
    const Eigen::Index horizon = sequences.front().rows();
    for (const ActionSequence& a : sequences)
        require(a.rows() == horizon && a.cols() == d, "action sequences have inconsistent shape");

    RowMatrix s(pop, c);
    for (Eigen::Index p = 0; p < pop; ++p)
        s.row(p) = state.transpose();
    std::vector<char> alive(static_cast<std::size_t>(pop), 1);
    RowMatrix q(pop, c + d);
    double g = 1.0;
    for (Eigen::Index h = 0; h < horizon; ++h) {
        for (Eigen::Index p = 0; p < pop; ++p) {
            if (!alive[static_cast<std::size_t>(p)])
                continue;
            const Vector sp = s.row(p).transpose();
            const Vector u = sequences[static_cast<std::size_t>(p)].row(h).transpose();
            totals(p) += g * reward(sp, u);
            q.row(p).head(c) = s.row(p);
            q.row(p).tail(d) = u.transpose();
        }
        g *= discount;
        s += expert.predict_mean_batch(q);
        for (Eigen::Index p = 0; p < pop; ++p) {
            if (alive[static_cast<std::size_t>(p)] && (!s.row(p).allFinite() || !std::isfinite(totals(p)))) {
                alive[static_cast<std::size_t>(p)] = 0;
                totals(p) = kNegInf;
                s.row(p).setZero();
            }
        }
    }
    return totals;
}

CemPlanner::CemPlanner(PlannerConfig config) : config_(std::move(config))
{
    config_.validate();
    reset();
}

void CemPlanner::reset() { mean_ = midpoint_sequence(config_); }

PlanResult CemPlanner::plan(const GpModel& expert, const Vector& state, const RewardFn& reward,
                            std::uint64_t seed)
{
    const PlannerConfig& cfg = config_;
    const int d = cfg.action_dim();
    require(expert.input_dim() == expert.output_dim() + d, "expert does not match the action dimension");
    Rng rng(derive_seed(seed, seed_stream::cem));
    std::normal_distribution<double> normal(0.0, 1.0);

    ActionSequence mean = mean_;
    ActionSequence stdev(cfg.horizon, d);
    for (int h = 0; h < cfg.horizon; ++h)
        stdev.row(h) = cfg.init_std.transpose();

    PlanResult result;
    std::vector<ActionSequence> elites;
    Vector elite_returns;
    bool any_finite = cfg.iterations == 0;
    for (int it = 0; it < cfg.iterations; ++it) {
        std::vector<ActionSequence> pop;
        pop.reserve(static_cast<std::size_t>(cfg.popsize));
        // Previous elites stay in the population so the elite score cannot drop.
        for (const ActionSequence& e : elites)
            pop.push_back(e);
        while (static_cast<int>(pop.size()) < cfg.popsize) {
            ActionSequence a(cfg.horizon, d);
            for (int h = 0; h < cfg.horizon; ++h)
                for (int j = 0; j < d; ++j)
                    a(h, j) = mean(h, j) + stdev(h, j) * normal(rng);
            pop.push_back(clip(std::move(a), cfg));
        }
        const Vector returns = rollout_returns(expert, state, pop, reward, cfg.discount);

        std::vector<int> order(pop.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return returns(a) > returns(b); });
        const int ne = cfg.n_elites;
        std::vector<ActionSequence> next_elites;
        Vector next_returns(ne);
        for (int k = 0; k < ne; ++k) {
            next_elites.push_back(pop[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])]);
            next_returns(k) = returns(order[static_cast<std::size_t>(k)]);
        }
        if (!std::isfinite(next_returns(0))) {
            result.elite_scores.push_back(kNegInf);
            continue;
        }
        any_finite = true;
        // Refit on the finite elites only.
        int finite_count = 0;
        ActionSequence sum = ActionSequence::Zero(cfg.horizon, d);
        for (int k = 0; k < ne; ++k)
            if (std::isfinite(next_returns(k))) {
                sum += next_elites[static_cast<std::size_t>(k)];
                ++finite_count;
            }
        mean = sum / finite_count;
        ActionSequence var = ActionSequence::Zero(cfg.horizon, d);
        for (int k = 0; k < ne; ++k)
            if (std::isfinite(next_returns(k)))
                var += (next_elites[static_cast<std::size_t>(k)] - mean).cwiseAbs2();
        stdev = (var / finite_count).cwiseSqrt().cwiseMax(kStdFloor);
        elites = std::move(next_elites);
        elite_returns = next_returns;
        result.elite_scores.push_back(elite_returns.mean());
        result.best_return = elite_returns(0);
    }

    if (!any_finite) {
        result.all_failed = true;
        mean = midpoint_sequence(cfg);
    }
    mean = clip(std::move(mean), cfg);
    result.mean = mean;
    result.action = mean.row(0).transpose();

    // Warm start: shift by one step and repeat the last action.
    if (cfg.horizon > 1)
        mean_.topRows(cfg.horizon - 1) = mean.bottomRows(cfg.horizon - 1);
    mean_.row(cfg.horizon - 1) = mean.row(cfg.horizon - 1);
    return result;
}

Vector cem_plan(const GpModel& expert, const Vector& state, const PlannerConfig& config,
                const RewardFn& reward, std::uint64_t seed)
{
    CemPlanner planner(config);
    return planner.plan(expert, state, reward, seed).action;
}

} // namespace gpmm
