#include "gpmm/runner.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gpmm/checkpoint.hpp"
#include "gpmm/errors.hpp"

namespace gpmm {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start)
{
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

const EventKind kAllEvents[] = {
    EventKind::spawn,           EventKind::merge,          EventKind::burn_in_end,
    EventKind::prune,
    EventKind::distill,         EventKind::cap_reached,    EventKind::likelihood_degenerate,
    EventKind::hyper_rejected,  EventKind::hyper_non_finite, EventKind::global_refresh,
    EventKind::global_refresh_failed, EventKind::planner_all_failed,
};

} // namespace

GpmmAgent::GpmmAgent(const MixtureConfig& mixture, const PlannerConfig& planner, std::uint64_t seed,
                     int warmup_episodes, int obs_dim, RewardFn reward)
    : mixture_(mixture, obs_dim + planner.action_dim(), obs_dim),
      planner_(planner),
      seed_(seed),
      warmup_episodes_(warmup_episodes),
      reward_(std::move(reward)),
      streamed_(obs_dim + planner.action_dim(), obs_dim)
{
}

void GpmmAgent::begin_episode(int episode)
{
    episode_ = episode;
    planner_.reset();
}

Vector GpmmAgent::act(const Vector& obs, const StepContext& ctx)
{
    const PlannerConfig& cfg = planner_.config();
    if (episode_ < warmup_episodes_ || !last_assigned_ || !mixture_.find(*last_assigned_)) {
        Rng rng(derive_seed(seed_, seed_stream::warmup, static_cast<std::uint64_t>(ctx.t)));
        Vector u(cfg.action_dim());
        for (int i = 0; i < u.size(); ++i)
            u(i) = std::uniform_real_distribution<double>(cfg.action_low(i), cfg.action_high(i))(rng);
        return u;
    }
    const auto start = Clock::now();
    const PlanResult r = planner_.plan(mixture_.expert(*last_assigned_).model, obs, reward_,
                                       derive_seed(seed_, seed_stream::cem, static_cast<std::uint64_t>(ctx.t)));
    plan_seconds_ += seconds_since(start);
    if (r.all_failed)
        mixture_.events().emit({EventKind::planner_all_failed, mixture_.steps_observed(),
                                *last_assigned_, -1, "every rollout diverged"});
    return r.action;
}

AgentFeedback GpmmAgent::observe(const Transition& tr, const StepContext& ctx)
{
    (void)ctx;
    ExperienceTuple point;
    point.input = Vector(tr.obs.size() + tr.action.size());
    point.input << tr.obs, tr.action;
    point.target = tr.next_obs - tr.obs;
    const auto start = Clock::now();
    const ObserveResult r = mixture_.observe(point);
    observe_seconds_ += seconds_since(start);
    last_assigned_ = r.assignment;
    streamed_.append(point);
    assignments_.push_back(r.assignment);
    if (hook_)
        hook_(mixture_, mixture_.steps_observed());
    return {r.assignment, mixture_.live_count()};
}

void write_transitions_csv(const Dataset& streamed, const std::vector<int>& assignments,
                           const std::string& path)
{
    std::ofstream out(path);
    if (!out)
        throw FormatError("cannot write '" + path + "'");
    out << "t";
    for (int i = 0; i < streamed.input_dim(); ++i)
        out << ",in" << i;
    for (int i = 0; i < streamed.output_dim(); ++i)
        out << ",out" << i;
    out << ",assignment\n";
    for (int r = 0; r < streamed.rows(); ++r) {
        out << r;
        const Vector x = streamed.input(r), y = streamed.target(r);
        for (int i = 0; i < x.size(); ++i)
            out << ',' << fmt(x(i));
        for (int i = 0; i < y.size(); ++i)
            out << ',' << fmt(y(i));
        out << ',' << (static_cast<std::size_t>(r) < assignments.size() ? assignments[static_cast<std::size_t>(r)] : -1)
            << '\n';
    }
}

void read_transitions_csv(const std::string& path, std::vector<long>& steps, Dataset& data,
                          std::vector<int>& recorded)
{
    std::ifstream in(path);
    if (!in)
        throw FormatError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line))
        throw FormatError("'" + path + "' is empty");
    int n_in = 0, n_out = 0;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            if (cell.rfind("in", 0) == 0)
                ++n_in;
            else if (cell.rfind("out", 0) == 0)
                ++n_out;
        }
    }
    if (n_in == 0 || n_out == 0)
        throw FormatError("'" + path + "' has no in/out columns");
    data = Dataset(n_in, n_out);
    steps.clear();
    recorded.clear();
    long lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        std::vector<double> cells;
        std::stringstream ss(line);
        std::string cell;
        try {
            while (std::getline(ss, cell, ','))
                cells.push_back(std::stod(cell));
        } catch (const std::logic_error&) {
            throw FormatError(path + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
        }
        if (cells.size() != static_cast<std::size_t>(2 + n_in + n_out))
            throw FormatError(path + ":" + std::to_string(lineno) + ": wrong field count");
        steps.push_back(static_cast<long>(cells[0]));
        data.append(Eigen::Map<const Vector>(cells.data() + 1, n_in),
                    Eigen::Map<const Vector>(cells.data() + 1 + n_in, n_out));
        recorded.push_back(static_cast<int>(cells.back()));
    }
}

ReplayResult replay(MixtureState state, const Dataset& stream, const std::vector<long>& steps,
                    const std::vector<int>& recorded, long max_steps)
{
    require(steps.size() == static_cast<std::size_t>(stream.rows()), "one step index per row required");
    ReplayResult r;
    r.first_step = state.steps_observed();
    for (int row = 0; row < stream.rows(); ++row) {
        if (steps[static_cast<std::size_t>(row)] < r.first_step)
            continue;
        if (max_steps >= 0 && static_cast<long>(r.assignments.size()) >= max_steps)
            break;
        const ObserveResult o = state.observe({stream.input(row), stream.target(row)});
        r.assignments.push_back(o.assignment);
        if (static_cast<std::size_t>(row) < recorded.size())
            r.recorded.push_back(recorded[static_cast<std::size_t>(row)]);
    }
    return r;
}

ReplayResult replay_files(const std::string& checkpoint_path, const std::string& transitions_path,
                          long max_steps)
{
    MixtureState state = checkpoint_load(checkpoint_path);
    std::vector<long> steps;
    Dataset data;
    std::vector<int> recorded;
    read_transitions_csv(transitions_path, steps, data, recorded);
    return replay(std::move(state), data, steps, recorded, max_steps);
}

namespace {

void write_outputs(const RunConfig& config, const RunResult& r)
{
    namespace fs = std::filesystem;
    const fs::path dir(config.output_dir);
    fs::create_directories(dir);
    write_steps_csv(r.log, (dir / "steps.csv").string());
    write_episodes_csv(r.log, (dir / "episodes.csv").string());
    write_transitions_csv(r.streamed, r.assignments, (dir / "transitions.csv").string());
    save_run_config(config, (dir / "config.json").string());
    if (r.final_state)
        checkpoint_save(*r.final_state, (dir / "checkpoint.json").string());

    nlohmann::ordered_json report;
    report["status"] = r.failed ? "failed" : "ok";
    if (r.failed)
        report["error"] = r.error;
    report["seed"] = config.seed;
    report["environment"] = to_string(config.environment);
    report["prior_mode"] = to_string(config.mixture.prior_mode);
    report["merge_prune"] = config.mixture.merge_prune;
    report["seconds"] = r.seconds;
    report["metrics"] = to_json(r.report);
    nlohmann::ordered_json events = nlohmann::ordered_json::object();
    for (const auto& [k, v] : r.event_counts)
        events[k] = v;
    report["events"] = events;
    std::ofstream out(dir / "report.json");
    out << report.dump(2) << '\n';
}

} // namespace

RunResult run(const RunConfig& config_in, bool write)
{
    RunConfig config = config_in;
    config.mixture.seed = config.seed;
    config.stream.seed = config.seed;
    config.validate();

    RunResult result;
    const auto start = Clock::now();
    std::optional<MixtureState> state;

    auto capture = [&](const MixtureState& m) {
        for (const Event& e : m.events().events())
            result.events.push_back(e);
        for (EventKind k : kAllEvents)
            result.event_counts[to_string(k)] = m.events().count(k);
        state = m;
    };

    if (config.environment == EnvironmentKind::cartpole) {
        GpmmAgent agent(config.mixture, config.planner, config.seed, config.warmup_episodes,
                        kCartpoleObsDim, [limit = config.schedule.entries.front().params.track_limit](
                                             const Vector& obs, const Vector& action) {
                            return cartpole_planning_reward(obs, action, limit);
                        });
        if (write && config.checkpoint_every > 0) {
            std::filesystem::create_directories(config.output_dir);
            agent.set_step_hook([&](const MixtureState& m, long done) {
                if (done % config.checkpoint_every == 0)
                    checkpoint_save(m, (std::filesystem::path(config.output_dir) /
                                        ("checkpoint_" + std::to_string(done) + ".json"))
                                           .string());
            });
        }
        try {
            run_schedule(config.schedule, agent, config.seed, result.log);
        } catch (const std::exception& e) {
            result.failed = true;
            result.error = e.what();
        }
        capture(agent.mixture());
        result.streamed = agent.streamed();
        result.assignments = agent.assignments();
    } else {
        MixtureState mixture(config.mixture, static_cast<int>(config.stream.maps.front().cols()),
                             static_cast<int>(config.stream.maps.front().rows()));
        result.streamed = Dataset(mixture.input_dim(), mixture.output_dim());
        try {
            const std::vector<LabeledPoint> points = synthetic_stream(config.stream);
            std::size_t seg = 0;
            int left = config.stream.segments.front().length;
            EpisodeRecord ep;
            ep.truth_label = config.stream.segments.front().regime;
            for (std::size_t i = 0; i < points.size(); ++i) {
                const ObserveResult o = mixture.observe(points[i].point);
                StepRecord row;
                row.t = static_cast<long>(i);
                row.episode = static_cast<int>(seg);
                row.step = config.stream.segments[seg].length - left;
                row.obs = points[i].point.input;
                row.action = Vector(0);
                row.truth_label = points[i].label;
                row.predicted = o.assignment;
                row.live_experts = mixture.live_count();
                result.log.steps.push_back(std::move(row));
                result.streamed.append(points[i].point);
                result.assignments.push_back(o.assignment);
                ++ep.length;
                if (--left == 0) {
                    result.log.episodes.push_back(ep);
                    if (++seg < config.stream.segments.size()) {
                        left = config.stream.segments[seg].length;
                        ep = EpisodeRecord{};
                        ep.episode = static_cast<int>(seg);
                        ep.truth_label = config.stream.segments[seg].regime;
                    }
                }
                if (write && config.checkpoint_every > 0 &&
                    mixture.steps_observed() % config.checkpoint_every == 0) {
                    std::filesystem::create_directories(config.output_dir);
                    checkpoint_save(mixture, (std::filesystem::path(config.output_dir) /
                                              ("checkpoint_" + std::to_string(mixture.steps_observed()) + ".json"))
                                                 .string());
                }
            }
        } catch (const std::exception& e) {
            result.failed = true;
            result.error = e.what();
        }
        capture(mixture);
    }
    result.final_state = std::move(state);
    result.seconds = seconds_since(start);
    result.report = evaluate(result.log, config.mixture.n_merge);
    if (write)
        write_outputs(config, result);
    return result;
}

} // namespace gpmm
