#include "gpmm/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "gpmm/errors.hpp"

namespace gpmm {

namespace {

double wrap_angle(double a)
{
    const double two_pi = 2.0 * std::numbers::pi;
    a = std::fmod(a, two_pi);
    if (a <= -std::numbers::pi)
        a += two_pi;
    else if (a > std::numbers::pi)
        a -= two_pi;
    return a;
}

CartpoleState integrate(const CartpoleParams& p, CartpoleState s, double force, double dt)
{
    const auto [xdd, tdd] = cartpole_accelerations(p, s, force);
    s.x_dot += dt * xdd;
    s.x += dt * s.x_dot;
    s.theta_dot += dt * tdd;
    s.theta = wrap_angle(s.theta + dt * s.theta_dot);
    return s;
}

void check_finite(const CartpoleState& s)
{
    if (!std::isfinite(s.x) || !std::isfinite(s.x_dot) || !std::isfinite(s.theta) ||
        !std::isfinite(s.theta_dot))
        throw NumericalDegeneracy("cart-pole integration produced a non-finite state");
}

} // namespace

void CartpoleParams::validate() const
{
    require(pole_mass > 0 && pole_length > 0 && cart_mass > 0 && gravity > 0 && force_limit > 0 &&
                track_limit > 0 && dt > 0,
            "cart-pole parameters must be positive");
}

Vector observe(const CartpoleState& s)
{
    Vector o(kCartpoleObsDim);
    o << s.x, s.x_dot, std::cos(s.theta), std::sin(s.theta), s.theta_dot;
    return o;
}

std::pair<double, double> cartpole_accelerations(const CartpoleParams& p, const CartpoleState& s,
                                                 double force)
{
    const double total = p.cart_mass + p.pole_mass;
    const double sin_t = std::sin(s.theta);
    const double cos_t = std::cos(s.theta);
    const double temp = (force + p.pole_mass * p.pole_length * s.theta_dot * s.theta_dot * sin_t) / total;
    const double theta_acc = (p.gravity * sin_t - cos_t * temp) /
                             (p.pole_length * (4.0 / 3.0 - p.pole_mass * cos_t * cos_t / total));
    const double x_acc = temp - p.pole_mass * p.pole_length * theta_acc * cos_t / total;
    return {x_acc, theta_acc};
}

CartpoleState cartpole_step(const CartpoleParams& p, const CartpoleState& s, double force)
{
    const double f = std::clamp(force, -p.force_limit, p.force_limit);
    CartpoleState next = integrate(p, s, f, p.dt);
    check_finite(next);
    return next;
}

CartpoleState cartpole_step_fine(const CartpoleParams& p, const CartpoleState& s, double force,
                                 int substeps)
{
    require(substeps >= 1, "substeps must be >= 1");
    const double f = std::clamp(force, -p.force_limit, p.force_limit);
    CartpoleState next = s;
    for (int k = 0; k < substeps; ++k)
        next = integrate(p, next, f, p.dt / substeps);
    check_finite(next);
    return next;
}

double cartpole_energy(const CartpoleParams& p, const CartpoleState& s)
{
    const double m = p.pole_mass;
    const double l = p.pole_length;
    const double kinetic = 0.5 * (p.cart_mass + m) * s.x_dot * s.x_dot +
                           m * l * s.x_dot * s.theta_dot * std::cos(s.theta) +
                           (2.0 / 3.0) * m * l * l * s.theta_dot * s.theta_dot;
    const double potential = m * p.gravity * l * (std::cos(s.theta) + 1.0);
    return kinetic + potential;
}

double cartpole_reward(const Vector& obs, const Vector& action)
{
    require(obs.size() == kCartpoleObsDim, "cart-pole observation has 5 entries");
    const double x = obs(0);
    // Angle recovered from (cos, sin): model rollouts drift off the unit circle.
    const double norm = std::hypot(obs(2), obs(3));
    const double cos_theta = norm > 0.0 ? obs(2) / norm : obs(2);
    return cos_theta - 0.01 * x * x - 0.001 * action.squaredNorm();
}

double cartpole_planning_reward(const Vector& obs, const Vector& action, double track_limit)
{
    const double r = cartpole_reward(obs, action);
    return std::abs(obs(0)) > track_limit ? r - 2.0 : r;
}

CartpoleState cartpole_initial_state(Rng& rng)
{
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    CartpoleState s;
    s.x = u(rng);
    s.x_dot = u(rng);
    s.theta = wrap_angle(std::numbers::pi + u(rng));
    s.theta_dot = u(rng);
    return s;
}

int DynamicsSchedule::total_episodes() const
{
    int per_cycle = 0;
    for (const ScheduleEntry& e : entries)
        per_cycle += e.episodes;
    return per_cycle * cycles;
}

int DynamicsSchedule::label_of_episode(int episode) const
{
    int per_cycle = 0;
    for (const ScheduleEntry& e : entries)
        per_cycle += e.episodes;
    require(episode >= 0 && episode < per_cycle * cycles, "episode index out of range");
    int k = episode % per_cycle;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (k < entries[i].episodes)
            return static_cast<int>(i);
        k -= entries[i].episodes;
    }
    return static_cast<int>(entries.size()) - 1;
}

const CartpoleParams& DynamicsSchedule::params_of_episode(int episode) const
{
    return entries[static_cast<std::size_t>(label_of_episode(episode))].params;
}

void DynamicsSchedule::validate() const
{
    require(!entries.empty(), "schedule needs at least one dynamics entry");
    require(cycles >= 1, "schedule needs at least one cycle");
    require(episode_length >= 1, "episode length must be >= 1");
    for (const ScheduleEntry& e : entries) {
        require(e.episodes >= 1, "episodes per dynamics must be >= 1");
        e.params.validate();
    }
}

DynamicsSchedule default_cartpole_schedule(int episodes_per_dynamics, int cycles)
{
    DynamicsSchedule s;
    const std::pair<double, double> combos[] = {{0.4, 0.5}, {0.4, 0.7}, {0.8, 0.5}, {0.8, 0.7}};
    for (const auto& [mass, length] : combos) {
        ScheduleEntry e;
        e.params.pole_mass = mass;
        e.params.pole_length = length;
        e.episodes = episodes_per_dynamics;
        s.entries.push_back(e);
    }
    s.cycles = cycles;
    return s;
}

void run_schedule(const DynamicsSchedule& schedule, Agent& agent, std::uint64_t seed,
                  ScheduleLog& log)
{
    schedule.validate();
    int per_cycle = 0;
    for (const ScheduleEntry& e : schedule.entries)
        per_cycle += e.episodes;
    long t = 0;
    for (int ep = 0; ep < schedule.total_episodes(); ++ep) {
        const int label = schedule.label_of_episode(ep);
        const CartpoleParams& params = schedule.params_of_episode(ep);
        Rng rng(derive_seed(seed, seed_stream::env, static_cast<std::uint64_t>(ep)));
        CartpoleState state = cartpole_initial_state(rng);

        EpisodeRecord rec;
        rec.episode = ep;
        rec.truth_label = label;
        rec.cycle = ep / per_cycle;
        agent.begin_episode(ep);
        for (int k = 0; k < schedule.episode_length; ++k) {
            const StepContext ctx{t, ep, k};
            const Vector obs = observe(state);
            Vector action = agent.act(obs, ctx);
            require(action.size() == kCartpoleActionDim, "agent returned an action of wrong size");
            action(0) = std::clamp(action(0), -params.force_limit, params.force_limit);
            state = cartpole_step(params, state, action(0));
            const Vector next = observe(state);
            const double r = cartpole_reward(obs, action);
            const AgentFeedback fb = agent.observe(Transition{obs, action, next}, ctx);

            StepRecord row;
            row.t = t;
            row.episode = ep;
            row.step = k;
            row.obs = obs;
            row.action = action;
            row.reward = r;
            row.truth_label = label;
            row.predicted = fb.assignment;
            row.live_experts = fb.live_experts;
            log.steps.push_back(std::move(row));
            rec.total_reward += r;
            ++rec.length;
            ++t;
            if (std::abs(state.x) > params.track_limit)
                break;
        }
        log.episodes.push_back(rec);
    }
}

void SyntheticStreamConfig::validate(std::optional<int> n_merge) const
{
    require(!maps.empty(), "synthetic stream needs at least one map");
    for (const Matrix& a : maps)
        require(a.rows() == maps.front().rows() && a.cols() == maps.front().cols() && a.size() > 0,
                "synthetic maps must share one nonempty shape");
    require(!segments.empty(), "synthetic stream needs at least one segment");
    for (const Segment& s : segments) {
        require(s.regime >= 0 && s.regime < static_cast<int>(maps.size()), "segment regime out of range");
        require(s.length >= 1, "segment length must be >= 1");
        if (n_merge)
            require(s.length >= *n_merge, "segment shorter than the mixture's n_merge");
    }
    require(noise_std >= 0.0, "noise_std must be >= 0");
    require(input_low < input_high, "input range is empty");
}

std::vector<LabeledPoint> synthetic_stream(const SyntheticStreamConfig& cfg)
{
    cfg.validate();
    Rng rng(derive_seed(cfg.seed, seed_stream::stream));
    std::uniform_real_distribution<double> ux(cfg.input_low, cfg.input_high);
    std::normal_distribution<double> noise(0.0, 1.0);
    const auto in = cfg.maps.front().cols();
    const auto out = cfg.maps.front().rows();
    std::vector<LabeledPoint> stream;
    for (const Segment& seg : cfg.segments) {
        const Matrix& a = cfg.maps[static_cast<std::size_t>(seg.regime)];
        for (int k = 0; k < seg.length; ++k) {
            LabeledPoint lp;
            lp.point.input = Vector(in);
            for (Eigen::Index j = 0; j < in; ++j)
                lp.point.input(j) = ux(rng);
            lp.point.target = a * lp.point.input;
            for (Eigen::Index j = 0; j < out; ++j)
                lp.point.target(j) += cfg.noise_std * noise(rng);
            lp.label = seg.regime;
            stream.push_back(std::move(lp));
        }
    }
    return stream;
}

SyntheticStreamConfig two_regime_stream(std::uint64_t seed, int length, double noise_std)
{
    SyntheticStreamConfig cfg;
    cfg.maps = {Matrix::Constant(1, 1, 2.0), Matrix::Constant(1, 1, -2.0)};
    cfg.segments = {{0, length}, {1, length}, {0, length}};
    cfg.noise_std = noise_std;
    cfg.seed = seed;
    return cfg;
}

} // namespace gpmm
