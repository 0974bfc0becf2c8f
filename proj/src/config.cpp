#include "gpmm/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "gpmm/errors.hpp"

namespace gpmm {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads optional keys out of one JSON object and rejects anything unread.
class Reader {
public:
    Reader(const json& j, std::string where) : j_(j), where_(std::move(where))
    {
        if (!j_.is_object())
            throw FormatError(where_ + ": expected an object");
    }

    template <class T>
    void get(const char* key, T& out)
    {
        seen_.insert(key);
        if (!j_.contains(key))
            return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw FormatError(where_ + "." + key + ": " + e.what());
        }
    }

    const json* child(const char* key)
    {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const
    {
        for (const auto& [key, value] : j_.items())
            if (!seen_.count(key))
                throw FormatError(where_ + ": unknown key '" + key + "'");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector to_vector(const std::vector<double>& v)
{
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

ordered_json cartpole_json(const CartpoleParams& p)
{
    return ordered_json{{"pole_mass", p.pole_mass},   {"pole_length", p.pole_length},
                        {"cart_mass", p.cart_mass},   {"gravity", p.gravity},
                        {"force_limit", p.force_limit}, {"track_limit", p.track_limit},
                        {"dt", p.dt}};
}

CartpoleParams cartpole_from(const json& j, const std::string& where)
{
    CartpoleParams p;
    Reader r(j, where);
    r.get("pole_mass", p.pole_mass);
    r.get("pole_length", p.pole_length);
    r.get("cart_mass", p.cart_mass);
    r.get("gravity", p.gravity);
    r.get("force_limit", p.force_limit);
    r.get("track_limit", p.track_limit);
    r.get("dt", p.dt);
    r.finish();
    return p;
}

ordered_json matrix_json(const Matrix& a)
{
    ordered_json rows = ordered_json::array();
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        rows.push_back(to_std(a.row(i).transpose()));
    return rows;
}

Matrix matrix_from(const json& j, const std::string& where)
{
    if (!j.is_array() || j.empty())
        throw FormatError(where + ": expected a nonempty array of rows");
    std::vector<std::vector<double>> rows;
    try {
        rows = j.get<std::vector<std::vector<double>>>();
    } catch (const json::exception& e) {
        throw FormatError(where + ": " + e.what());
    }
    Matrix a(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows[0].size())
            throw FormatError(where + ": ragged matrix");
        for (std::size_t k = 0; k < rows[i].size(); ++k)
            a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = rows[i][k];
    }
    return a;
}

} // namespace

std::string to_string(EnvironmentKind kind)
{
    return kind == EnvironmentKind::cartpole ? "cartpole" : "synthetic";
}

EnvironmentKind environment_from_string(const std::string& s)
{
    if (s == "cartpole")
        return EnvironmentKind::cartpole;
    if (s == "synthetic")
        return EnvironmentKind::synthetic;
    throw FormatError("unknown environment '" + s + "'");
}

void RunConfig::validate() const
{
    mixture.validate();
    require(warmup_episodes >= 0, "warmup_episodes must be >= 0");
    require(checkpoint_every >= 0, "checkpoint_every must be >= 0");
    if (environment == EnvironmentKind::cartpole) {
        planner.validate();
        schedule.validate();
        require(planner.action_dim() == kCartpoleActionDim, "cart-pole takes a 1-D action");
    } else {
        stream.validate(mixture.n_merge);
    }
}

RunConfig default_cartpole_config()
{
    RunConfig c;
    c.environment = EnvironmentKind::cartpole;
    c.schedule = default_cartpole_schedule(3, 1);
    c.planner.action_low = Vector::Constant(1, -10.0);
    c.planner.action_high = Vector::Constant(1, 10.0);
    c.planner.init_std = Vector::Constant(1, 5.0);
    return c;
}

RunConfig desk_scale_cartpole_config()
{
    RunConfig c = default_cartpole_config();
    c.mixture.n_distill = 400;
    c.mixture.m = 300;
    c.mixture.hyper_batch = 128;
    c.planner.popsize = 100;
    c.schedule = default_cartpole_schedule(2, 2);
    return c;
}

RunConfig default_synthetic_config()
{
    RunConfig c;
    c.environment = EnvironmentKind::synthetic;
    c.stream = two_regime_stream(0);
    c.stream.input_low = -0.5;
    c.stream.input_high = 0.5;
    c.mixture.theta_init = {2.0, 1.0, 0.01};
    c.planner.action_low = Vector::Constant(1, -1.0);
    c.planner.action_high = Vector::Constant(1, 1.0);
    c.planner.init_std = Vector::Constant(1, 0.5);
    return c;
}

ordered_json to_json(const RunConfig& c)
{
    const MixtureConfig& m = c.mixture;
    ordered_json mixture{
        {"alpha", m.alpha},
        {"beta", m.beta},
        {"epsilon", m.epsilon},
        {"n_merge", m.n_merge},
        {"n_distill", m.n_distill},
        {"m", m.m},
        {"theta_init",
         {{"output_scale", m.theta_init.output_scale},
          {"inv_lengthscale", m.theta_init.inv_lengthscale},
          {"noise_std", m.theta_init.noise_std}}},
        {"lr", m.lr},
        {"steps_per_tick", m.steps_per_tick},
        {"K_max", m.K_max},
        {"hyper_batch", m.hyper_batch},
        {"global_refresh_every", m.global_refresh_every},
        {"global_reservoir", m.global_reservoir},
        {"global_steps", m.global_steps},
        {"global_batch", m.global_batch},
        {"distill_trials", m.distill_trials},
        {"distill_max_swap_evaluations", m.distill_max_swap_evaluations},
        {"min_noise_std", m.min_noise_std},
    };
    const PlannerConfig& p = c.planner;
    ordered_json planner{
        {"horizon", p.horizon},
        {"popsize", p.popsize},
        {"n_elites", p.n_elites},
        {"iterations", p.iterations},
        {"discount", p.discount},
        {"action_low", to_std(p.action_low)},
        {"action_high", to_std(p.action_high)},
        {"init_std", to_std(p.init_std)},
    };
    ordered_json entries = ordered_json::array();
    for (const ScheduleEntry& e : c.schedule.entries) {
        ordered_json item = cartpole_json(e.params);
        item["episodes"] = e.episodes;
        entries.push_back(item);
    }
    ordered_json schedule{{"episode_length", c.schedule.episode_length},
                          {"cycles", c.schedule.cycles},
                          {"dynamics", entries}};
    ordered_json maps = ordered_json::array();
    for (const Matrix& a : c.stream.maps)
        maps.push_back(matrix_json(a));
    ordered_json segments = ordered_json::array();
    for (const Segment& s : c.stream.segments)
        segments.push_back({{"regime", s.regime}, {"length", s.length}});
    ordered_json stream{{"maps", maps},
                        {"segments", segments},
                        {"noise_std", c.stream.noise_std},
                        {"input_low", c.stream.input_low},
                        {"input_high", c.stream.input_high}};

    return ordered_json{
        {"environment", to_string(c.environment)},
        {"seed", c.seed},
        {"output_dir", c.output_dir},
        {"warmup_episodes", c.warmup_episodes},
        {"checkpoint_every", c.checkpoint_every},
        {"ablation", {{"prior_mode", to_string(m.prior_mode)}, {"merge_prune", m.merge_prune}}},
        {"mixture", mixture},
        {"planner", planner},
        {"schedule", schedule},
        {"stream", stream},
    };
}

RunConfig run_config_from_json(const json& j)
{
    RunConfig c = default_cartpole_config();
    Reader top(j, "config");
    std::string env = to_string(c.environment);
    top.get("environment", env);
    c.environment = environment_from_string(env);
    if (c.environment == EnvironmentKind::synthetic)
        c = default_synthetic_config();
    top.get("seed", c.seed);
    top.get("output_dir", c.output_dir);
    top.get("warmup_episodes", c.warmup_episodes);
    top.get("checkpoint_every", c.checkpoint_every);

    if (const json* a = top.child("ablation")) {
        Reader r(*a, "ablation");
        std::string mode = to_string(c.mixture.prior_mode);
        r.get("prior_mode", mode);
        try {
            c.mixture.prior_mode = prior_mode_from_string(mode);
        } catch (const ContractViolation& e) {
            throw FormatError(e.what());
        }
        r.get("merge_prune", c.mixture.merge_prune);
        r.finish();
    }
    if (const json* mj = top.child("mixture")) {
        MixtureConfig& m = c.mixture;
        Reader r(*mj, "mixture");
        r.get("alpha", m.alpha);
        r.get("beta", m.beta);
        r.get("epsilon", m.epsilon);
        r.get("n_merge", m.n_merge);
        r.get("n_distill", m.n_distill);
        r.get("m", m.m);
        if (const json* t = r.child("theta_init")) {
            Reader rt(*t, "mixture.theta_init");
            rt.get("output_scale", m.theta_init.output_scale);
            rt.get("inv_lengthscale", m.theta_init.inv_lengthscale);
            rt.get("noise_std", m.theta_init.noise_std);
            rt.finish();
        }
        r.get("lr", m.lr);
        r.get("steps_per_tick", m.steps_per_tick);
        r.get("K_max", m.K_max);
        r.get("hyper_batch", m.hyper_batch);
        r.get("global_refresh_every", m.global_refresh_every);
        r.get("global_reservoir", m.global_reservoir);
        r.get("global_steps", m.global_steps);
        r.get("global_batch", m.global_batch);
        r.get("distill_trials", m.distill_trials);
        r.get("distill_max_swap_evaluations", m.distill_max_swap_evaluations);
        r.get("min_noise_std", m.min_noise_std);
        r.finish();
    }
    if (const json* pj = top.child("planner")) {
        PlannerConfig& p = c.planner;
        Reader r(*pj, "planner");
        r.get("horizon", p.horizon);
        r.get("popsize", p.popsize);
        r.get("n_elites", p.n_elites);
        r.get("iterations", p.iterations);
        r.get("discount", p.discount);
        std::vector<double> low = to_std(p.action_low), high = to_std(p.action_high),
                            sd = to_std(p.init_std);
        r.get("action_low", low);
        r.get("action_high", high);
        r.get("init_std", sd);
        p.action_low = to_vector(low);
        p.action_high = to_vector(high);
        p.init_std = to_vector(sd);
        r.finish();
    }
    if (const json* sj = top.child("schedule")) {
        Reader r(*sj, "schedule");
        r.get("episode_length", c.schedule.episode_length);
        r.get("cycles", c.schedule.cycles);
        if (const json* d = r.child("dynamics")) {
            if (!d->is_array())
                throw FormatError("schedule.dynamics: expected an array");
            c.schedule.entries.clear();
            for (std::size_t i = 0; i < d->size(); ++i) {
                const std::string where = "schedule.dynamics[" + std::to_string(i) + "]";
                json item = (*d)[i];
                ScheduleEntry e;
                if (item.is_object() && item.contains("episodes")) {
                    try {
                        e.episodes = item.at("episodes").get<int>();
                    } catch (const json::exception& ex) {
                        throw FormatError(where + ".episodes: " + ex.what());
                    }
                    item.erase("episodes");
                }
                e.params = cartpole_from(item, where);
                c.schedule.entries.push_back(e);
            }
        }
        r.finish();
    }
    if (const json* st = top.child("stream")) {
        Reader r(*st, "stream");
        if (const json* maps = r.child("maps")) {
            if (!maps->is_array())
                throw FormatError("stream.maps: expected an array");
            c.stream.maps.clear();
            for (std::size_t i = 0; i < maps->size(); ++i)
                c.stream.maps.push_back(matrix_from((*maps)[i], "stream.maps[" + std::to_string(i) + "]"));
        }
        if (const json* segs = r.child("segments")) {
            if (!segs->is_array())
                throw FormatError("stream.segments: expected an array");
            c.stream.segments.clear();
            for (std::size_t i = 0; i < segs->size(); ++i) {
                Segment s;
                Reader rs((*segs)[i], "stream.segments[" + std::to_string(i) + "]");
                rs.get("regime", s.regime);
                rs.get("length", s.length);
                rs.finish();
                c.stream.segments.push_back(s);
            }
        }
        r.get("noise_std", c.stream.noise_std);
        r.get("input_low", c.stream.input_low);
        r.get("input_high", c.stream.input_high);
        r.finish();
    }
    top.finish();
    c.stream.seed = c.seed;
    c.mixture.seed = c.seed;
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw FormatError("cannot open config '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError("config '" + path + "': " + e.what());
    }
    return run_config_from_json(j);
}

void save_run_config(const RunConfig& config, const std::string& path)
{
    std::ofstream out(path);
    if (!out)
        throw FormatError("cannot write config '" + path + "'");
    out << to_json(config).dump(2) << '\n';
}

} // namespace gpmm
