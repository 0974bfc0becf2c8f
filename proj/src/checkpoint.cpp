#include "gpmm/checkpoint.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "gpmm/errors.hpp"

namespace gpmm {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr const char* kFormat = "gpmm-checkpoint";

std::string fnv1a(const std::string& s)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

ordered_json params_json(const KernelParams& p)
{
    ordered_json scale = ordered_json::array(), noise = ordered_json::array();
    ordered_json inv = ordered_json::array(), logs = ordered_json::array();
    for (int i = 0; i < p.output_dim(); ++i) {
        scale.push_back(p.output_scale(i));
        noise.push_back(p.noise_std(i));
        ordered_json row = ordered_json::array();
        for (int j = 0; j < p.input_dim(); ++j)
            row.push_back(p.inv_lengthscale(i, j));
        inv.push_back(row);
        ordered_json lrow = ordered_json::array();
        for (int k = 0; k < p.params_per_dim(); ++k)
            lrow.push_back(p.logs()(i, k));
        logs.push_back(lrow);
    }
    return ordered_json{{"output_scale", scale},
                        {"inv_lengthscale", inv},
                        {"noise_std", noise},
                        {"log", logs}};
}

bool close(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(std::abs(a), std::abs(b)); }

KernelParams params_from(const json& j, int in, int out)
{
    const auto logs = j.at("log").get<std::vector<std::vector<double>>>();
    if (static_cast<int>(logs.size()) != out)
        throw FormatError("kernel params: wrong output dimension");
    Matrix m(out, in + 2);
    for (int i = 0; i < out; ++i) {
        if (static_cast<int>(logs[static_cast<std::size_t>(i)].size()) != in + 2)
            throw FormatError("kernel params: wrong row length");
        for (int k = 0; k < in + 2; ++k)
            m(i, k) = logs[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
    }
    if (!m.allFinite())
        throw FormatError("kernel params: non-finite log");
    KernelParams p = KernelParams::from_logs(m);
    const auto scale = j.at("output_scale").get<std::vector<double>>();
    const auto noise = j.at("noise_std").get<std::vector<double>>();
    const auto inv = j.at("inv_lengthscale").get<std::vector<std::vector<double>>>();
    if (static_cast<int>(scale.size()) != out || static_cast<int>(noise.size()) != out ||
        static_cast<int>(inv.size()) != out)
        throw FormatError("kernel params: named values have the wrong shape");
    for (int i = 0; i < out; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        bool ok = close(scale[ui], p.output_scale(i)) && close(noise[ui], p.noise_std(i)) &&
                  static_cast<int>(inv[ui].size()) == in;
        for (int k = 0; ok && k < in; ++k)
            ok = close(inv[ui][static_cast<std::size_t>(k)], p.inv_lengthscale(i, k));
        if (!ok)
            throw FormatError("kernel params: named values disagree with stored logs");
    }
    return p;
}

ordered_json dataset_json(const Dataset& d)
{
    const auto x = d.inputs();
    const auto y = d.targets();
    return ordered_json{{"rows", d.rows()},
                        {"inputs", std::vector<double>(x.data(), x.data() + x.size())},
                        {"targets", std::vector<double>(y.data(), y.data() + y.size())}};
}

Dataset dataset_from(const json& j, int in, int out)
{
    const int rows = j.at("rows").get<int>();
    const auto x = j.at("inputs").get<std::vector<double>>();
    const auto y = j.at("targets").get<std::vector<double>>();
    if (rows < 0 || x.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(in) ||
        y.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(out))
        throw FormatError("dataset: size does not match rows x dims");
    Dataset d(in, out);
    for (int r = 0; r < rows; ++r) {
        const auto ur = static_cast<std::size_t>(r);
        d.append(Eigen::Map<const Vector>(x.data() + ur * static_cast<std::size_t>(in), in),
                 Eigen::Map<const Vector>(y.data() + ur * static_cast<std::size_t>(out), out));
    }
    return d;
}

} // namespace

ordered_json mixture_config_json(const MixtureConfig& m)
{
    return ordered_json{
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
        {"prior_mode", to_string(m.prior_mode)},
        {"merge_prune", m.merge_prune},
        {"hyper_batch", m.hyper_batch},
        {"global_refresh_every", m.global_refresh_every},
        {"global_reservoir", m.global_reservoir},
        {"global_steps", m.global_steps},
        {"global_batch", m.global_batch},
        {"distill_trials", m.distill_trials},
        {"distill_max_swap_evaluations", m.distill_max_swap_evaluations},
        {"min_noise_std", m.min_noise_std},
        {"seed", m.seed},
    };
}

MixtureConfig mixture_config_from_json(const json& j)
{
    MixtureConfig m;
    m.alpha = j.at("alpha").get<double>();
    m.beta = j.at("beta").get<double>();
    m.epsilon = j.at("epsilon").get<double>();
    m.n_merge = j.at("n_merge").get<int>();
    m.n_distill = j.at("n_distill").get<int>();
    m.m = j.at("m").get<int>();
    const json& t = j.at("theta_init");
    m.theta_init.output_scale = t.at("output_scale").get<double>();
    m.theta_init.inv_lengthscale = t.at("inv_lengthscale").get<double>();
    m.theta_init.noise_std = t.at("noise_std").get<double>();
    m.lr = j.at("lr").get<double>();
    m.steps_per_tick = j.at("steps_per_tick").get<int>();
    m.K_max = j.at("K_max").get<int>();
    m.prior_mode = prior_mode_from_string(j.at("prior_mode").get<std::string>());
    m.merge_prune = j.at("merge_prune").get<bool>();
    m.hyper_batch = j.at("hyper_batch").get<int>();
    m.global_refresh_every = j.at("global_refresh_every").get<int>();
    m.global_reservoir = j.at("global_reservoir").get<int>();
    m.global_steps = j.at("global_steps").get<int>();
    m.global_batch = j.at("global_batch").get<int>();
    m.distill_trials = j.at("distill_trials").get<int>();
    m.distill_max_swap_evaluations = j.at("distill_max_swap_evaluations").get<int>();
    m.min_noise_std = j.at("min_noise_std").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    return m;
}

ordered_json checkpoint_json(const MixtureState& state)
{
    const MixtureSnapshot s = state.snapshot();
    ordered_json experts = ordered_json::array();
    for (const Expert& e : s.experts)
        experts.push_back({{"id", e.id},
                           {"assigned_total", e.assigned_total},
                           {"burn_in", e.burn_in},
                           {"params", params_json(e.model.params())},
                           {"data", dataset_json(e.model.data())}});
    ordered_json transitions = ordered_json::array();
    for (const auto& [key, count] : s.stats.counts())
        transitions.push_back({key.first, key.second, count});
    ordered_json body{
        {"config", mixture_config_json(s.config)},
        {"input_dim", s.input_dim},
        {"output_dim", s.output_dim},
        {"step", s.step},
        {"next_id", s.next_id},
        {"experts", experts},
        {"transitions", transitions},
        {"prev", s.stats.prev() ? ordered_json(*s.stats.prev()) : ordered_json(nullptr)},
        {"global",
         {{"params", params_json(s.global.params)},
          {"reservoir", dataset_json(s.global.reservoir)},
          {"seen", s.global.seen},
          {"since_refresh", s.global.since_refresh},
          {"refreshes", s.global.refreshes}}},
    };
    return ordered_json{{"format", kFormat},
                        {"version", kCheckpointVersion},
                        {"checksum", fnv1a(body.dump())},
                        {"body", body}};
}

MixtureState checkpoint_from_json(const json& j)
{
    try {
        if (!j.is_object() || j.value("format", "") != kFormat)
            throw FormatError("not a gpmm checkpoint");
        const int version = j.at("version").get<int>();
        if (version != kCheckpointVersion)
            throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
        const json& body = j.at("body");
        MixtureSnapshot s;
        s.config = mixture_config_from_json(body.at("config"));
        s.input_dim = body.at("input_dim").get<int>();
        s.output_dim = body.at("output_dim").get<int>();
        if (s.input_dim < 1 || s.output_dim < 1)
            throw FormatError("checkpoint dimensions must be positive");
        s.step = body.at("step").get<long>();
        s.next_id = body.at("next_id").get<int>();
        for (const json& e : body.at("experts")) {
            Expert x;
            x.id = e.at("id").get<int>();
            x.assigned_total = e.at("assigned_total").get<long>();
            x.burn_in = e.at("burn_in").get<bool>();
            x.model = GpModel(params_from(e.at("params"), s.input_dim, s.output_dim),
                              dataset_from(e.at("data"), s.input_dim, s.output_dim));
            s.experts.push_back(std::move(x));
        }
        for (const json& t : body.at("transitions")) {
            const auto v = t.get<std::vector<long>>();
            if (v.size() != 3 || v[2] < 0)
                throw FormatError("transition entries are [from, to, count]");
            s.stats.set_count(static_cast<int>(v[0]), static_cast<int>(v[1]), v[2]);
        }
        if (!body.at("prev").is_null())
            s.stats.set_prev(body.at("prev").get<int>());
        const json& g = body.at("global");
        s.global.params = params_from(g.at("params"), s.input_dim, s.output_dim);
        s.global.reservoir = dataset_from(g.at("reservoir"), s.input_dim, s.output_dim);
        s.global.seen = g.at("seen").get<long>();
        s.global.since_refresh = g.at("since_refresh").get<long>();
        s.global.refreshes = g.at("refreshes").get<int>();
        return MixtureState(std::move(s));
    } catch (const json::exception& e) {
        throw FormatError(std::string("corrupt checkpoint: ") + e.what());
    } catch (const ContractViolation& e) {
        throw FormatError(std::string("inconsistent checkpoint: ") + e.what());
    }
}

void checkpoint_save(const MixtureState& state, const std::string& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw FormatError("cannot write checkpoint '" + path + "'");
    out << checkpoint_json(state).dump() << '\n';
    if (!out)
        throw FormatError("failed writing checkpoint '" + path + "'");
}

MixtureState checkpoint_load(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("cannot open checkpoint '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    ordered_json j;
    try {
        j = ordered_json::parse(buf.str());
    } catch (const json::parse_error& e) {
        throw FormatError("checkpoint '" + path + "' is truncated or corrupt: " + e.what());
    }
    if (!j.is_object() || !j.contains("body") || !j.contains("checksum"))
        throw FormatError("checkpoint '" + path + "' lacks a body or checksum");
    if (j.at("checksum") != fnv1a(j.at("body").dump()))
        throw FormatError("checkpoint '" + path + "' failed its checksum");
    return checkpoint_from_json(json(j));
}

} // namespace gpmm
