#include "gpmm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "gpmm/errors.hpp"

namespace gpmm {

using nlohmann::ordered_json;

std::optional<double> best_permutation_accuracy(const std::vector<int>& truth,
                                                const std::vector<int>& predicted)
{
    require(truth.size() == predicted.size(), "truth and predicted differ in length");
    std::map<int, int> tl, pl;
    long n = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || predicted[i] < 0)
            continue;
        tl.emplace(truth[i], 0);
        pl.emplace(predicted[i], 0);
        ++n;
    }
    if (n == 0)
        return std::nullopt;
    int t_count = 0, p_count = 0;
    for (auto& [k, v] : tl)
        v = t_count++;
    for (auto& [k, v] : pl)
        v = p_count++;
    std::vector<std::vector<long>> conf(static_cast<std::size_t>(p_count),
                                        std::vector<long>(static_cast<std::size_t>(t_count), 0));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || predicted[i] < 0)
            continue;
        ++conf[static_cast<std::size_t>(pl[predicted[i]])][static_cast<std::size_t>(tl[truth[i]])];
    }
    // Bitmask DP over truth labels; each predicted id claims at most one label.
    require(t_count <= 20, "too many distinct truth labels for exact matching");
    const std::size_t masks = std::size_t{1} << t_count;
    std::vector<long> dp(masks, -1), next(masks);
    dp[0] = 0;
    for (int p = 0; p < p_count; ++p) {
        next = dp;
        for (std::size_t mask = 0; mask < masks; ++mask) {
            if (dp[mask] < 0)
                continue;
            for (int t = 0; t < t_count; ++t) {
                if (mask & (std::size_t{1} << t))
                    continue;
                const std::size_t to = mask | (std::size_t{1} << t);
                next[to] = std::max(next[to], dp[mask] + conf[static_cast<std::size_t>(p)][static_cast<std::size_t>(t)]);
            }
        }
        dp.swap(next);
    }
    return static_cast<double>(*std::max_element(dp.begin(), dp.end())) / static_cast<double>(n);
}

std::map<long, long> detection_delays(const std::vector<int>& truth,
                                      const std::vector<int>& predicted, int stable_len,
                                      int* truth_switches)
{
    require(truth.size() == predicted.size(), "truth and predicted differ in length");
    require(stable_len >= 1, "stable_len must be >= 1");
    const long n = static_cast<long>(truth.size());
    std::vector<long> switches;
    for (long i = 1; i < n; ++i)
        if (truth[static_cast<std::size_t>(i)] != truth[static_cast<std::size_t>(i - 1)])
            switches.push_back(i);
    if (truth_switches)
        *truth_switches = static_cast<int>(switches.size());

    auto pred = [&](long i) { return predicted[static_cast<std::size_t>(i)]; };
    std::map<long, long> delays;
    for (std::size_t k = 0; k < switches.size(); ++k) {
        const long s = switches[k];
        const long limit = k + 1 < switches.size() ? switches[k + 1] : n;
        for (long j = s; j < limit; ++j) {
            if (pred(j) == pred(j - 1))
                continue;
            const long end = std::min(n, j + stable_len);
            bool stable = true;
            for (long i = j + 1; i < end && stable; ++i)
                stable = pred(i) == pred(j);
            if (stable) {
                delays[s] = j - s;
                break;
            }
        }
    }
    return delays;
}

long count_switch_events(const std::vector<int>& predicted)
{
    long c = 0;
    for (std::size_t i = 1; i < predicted.size(); ++i)
        if (predicted[i] != predicted[i - 1])
            ++c;
    return c;
}

MetricsReport evaluate(const ScheduleLog& log, int stable_len)
{
    MetricsReport r;
    r.steps = static_cast<long>(log.steps.size());
    std::vector<int> truth, predicted;
    r.has_labels = !log.steps.empty();
    for (const StepRecord& s : log.steps) {
        truth.push_back(s.truth_label);
        predicted.push_back(s.predicted);
        r.expert_count_timeline.push_back(s.live_experts);
        if (s.truth_label < 0)
            r.has_labels = false;
    }
    r.predicted_switch_events = count_switch_events(predicted);
    if (r.has_labels) {
        r.accuracy = best_permutation_accuracy(truth, predicted);
        r.detection_delays = detection_delays(truth, predicted, stable_len, &r.truth_switches);
        r.missed_switches = r.truth_switches - static_cast<int>(r.detection_delays.size());
        if (!r.detection_delays.empty()) {
            double sum = 0.0;
            for (const auto& [s, d] : r.detection_delays)
                sum += static_cast<double>(d);
            r.mean_delay = sum / static_cast<double>(r.detection_delays.size());
        }
    }
    std::map<int, std::pair<double, int>> per_label;
    for (const EpisodeRecord& e : log.episodes) {
        r.episode_returns.push_back(e.total_reward);
        r.episode_labels.push_back(e.truth_label);
        if (e.truth_label >= 0) {
            auto& [sum, count] = per_label[e.truth_label];
            sum += e.total_reward;
            ++count;
        }
    }
    for (const auto& [label, acc] : per_label)
        r.label_mean_returns[label] = acc.first / acc.second;
    return r;
}

ordered_json to_json(const MetricsReport& r)
{
    ordered_json j;
    j["steps"] = r.steps;
    j["has_labels"] = r.has_labels;
    if (r.accuracy)
        j["accuracy"] = *r.accuracy;
    if (r.has_labels) {
        j["truth_switches"] = r.truth_switches;
        j["missed_switches"] = r.missed_switches;
        ordered_json d = ordered_json::array();
        for (const auto& [s, delay] : r.detection_delays)
            d.push_back({{"switch_step", s}, {"delay", delay}});
        j["detection_delays"] = d;
        if (r.mean_delay)
            j["mean_delay"] = *r.mean_delay;
    }
    j["predicted_switch_events"] = r.predicted_switch_events;
    j["final_live_experts"] = r.expert_count_timeline.empty() ? 0 : r.expert_count_timeline.back();
    j["max_live_experts"] = r.expert_count_timeline.empty()
                                ? 0
                                : *std::max_element(r.expert_count_timeline.begin(),
                                                    r.expert_count_timeline.end());
    j["episode_returns"] = r.episode_returns;
    j["episode_labels"] = r.episode_labels;
    ordered_json lm = ordered_json::object();
    for (const auto& [label, v] : r.label_mean_returns)
        lm[std::to_string(label)] = v;
    j["label_mean_returns"] = lm;
    return j;
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v)
{
    double m = 0.0;
    for (double x : v)
        m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v)
        s += (x - m) * (x - m);
    return {m, v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0};
}

} // namespace

AggregateReport aggregate(const std::vector<MetricsReport>& reports)
{
    AggregateReport a;
    a.seeds = static_cast<int>(reports.size());
    if (reports.empty())
        return a;
    std::size_t episodes = reports.front().episode_returns.size();
    for (const MetricsReport& r : reports)
        episodes = std::min(episodes, r.episode_returns.size());
    for (std::size_t e = 0; e < episodes; ++e) {
        std::vector<double> v;
        for (const MetricsReport& r : reports)
            v.push_back(r.episode_returns[e]);
        const auto [m, s] = mean_std(v);
        a.episode_return_mean.push_back(m);
        a.episode_return_std.push_back(s);
    }
    std::map<int, std::vector<double>> labels;
    for (const MetricsReport& r : reports)
        for (const auto& [label, v] : r.label_mean_returns)
            labels[label].push_back(v);
    for (const auto& [label, v] : labels) {
        const auto [m, s] = mean_std(v);
        a.label_return_mean[label] = m;
        a.label_return_std[label] = s;
    }
    std::vector<double> acc, delay;
    for (const MetricsReport& r : reports) {
        if (r.accuracy)
            acc.push_back(*r.accuracy);
        if (r.mean_delay)
            delay.push_back(*r.mean_delay);
    }
    if (!acc.empty())
        a.accuracy_mean = mean_std(acc).first;
    if (!delay.empty())
        a.delay_mean = mean_std(delay).first;
    return a;
}

ordered_json to_json(const AggregateReport& a)
{
    ordered_json j;
    j["seeds"] = a.seeds;
    j["episode_return_mean"] = a.episode_return_mean;
    j["episode_return_std"] = a.episode_return_std;
    ordered_json lm = ordered_json::object(), ls = ordered_json::object();
    for (const auto& [label, v] : a.label_return_mean)
        lm[std::to_string(label)] = v;
    for (const auto& [label, v] : a.label_return_std)
        ls[std::to_string(label)] = v;
    j["label_return_mean"] = lm;
    j["label_return_std"] = ls;
    if (a.accuracy_mean)
        j["accuracy_mean"] = *a.accuracy_mean;
    if (a.delay_mean)
        j["delay_mean"] = *a.delay_mean;
    return j;
}

namespace {

std::string fmt(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split(const std::string& line)
{
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ','))
        out.push_back(cell);
    if (!line.empty() && line.back() == ',')
        out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const std::string& where)
{
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size())
            throw FormatError(where + ": trailing characters in '" + s + "'");
        return v;
    } catch (const std::logic_error&) {
        throw FormatError(where + ": not a number '" + s + "'");
    }
}

long parse_long(const std::string& s, const std::string& where)
{
    const double v = parse_double(s, where);
    if (v != std::floor(v))
        throw FormatError(where + ": expected an integer, got '" + s + "'");
    return static_cast<long>(v);
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const
    {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name)
                return static_cast<int>(i);
        return -1;
    }
};

Table read_table(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw FormatError("cannot open '" + path + "'");
    Table t;
    std::string line;
    if (!std::getline(in, line))
        throw FormatError("'" + path + "' is empty");
    t.header = split(line);
    long lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        auto cells = split(line);
        if (cells.size() != t.header.size())
            throw FormatError(path + ":" + std::to_string(lineno) + ": expected " +
                              std::to_string(t.header.size()) + " fields");
        t.rows.push_back(std::move(cells));
    }
    return t;
}

const char* const kCartpoleObsNames[] = {"x", "x_dot", "cos_theta", "sin_theta", "theta_dot"};

} // namespace

void write_steps_csv(const ScheduleLog& log, const std::string& path)
{
    std::ofstream out(path);
    if (!out)
        throw FormatError("cannot write '" + path + "'");
    const long obs_dim = log.steps.empty() ? 0 : log.steps.front().obs.size();
    const long act_dim = log.steps.empty() ? 0 : log.steps.front().action.size();
    const bool cartpole = obs_dim == kCartpoleObsDim && act_dim == kCartpoleActionDim;
    out << "t,episode";
    for (long i = 0; i < obs_dim; ++i)
        out << ',' << (cartpole ? std::string(kCartpoleObsNames[i]) : "obs" + std::to_string(i));
    for (long i = 0; i < act_dim; ++i)
        out << ',' << (cartpole ? std::string("u") : "u" + std::to_string(i));
    out << ",reward,truth_label,predicted_assignment,K_live\n";
    for (const StepRecord& s : log.steps) {
        out << s.t << ',' << s.episode;
        for (long i = 0; i < s.obs.size(); ++i)
            out << ',' << fmt(s.obs(i));
        for (long i = 0; i < s.action.size(); ++i)
            out << ',' << fmt(s.action(i));
        out << ',' << fmt(s.reward) << ',' << s.truth_label << ',' << s.predicted << ','
            << s.live_experts << '\n';
    }
}

void write_episodes_csv(const ScheduleLog& log, const std::string& path)
{
    std::ofstream out(path);
    if (!out)
        throw FormatError("cannot write '" + path + "'");
    out << "episode,truth_label,cycle,total_reward,length\n";
    for (const EpisodeRecord& e : log.episodes)
        out << e.episode << ',' << e.truth_label << ',' << e.cycle << ',' << fmt(e.total_reward)
            << ',' << e.length << '\n';
}

ScheduleLog read_logs(const std::string& steps_path, const std::string& episodes_path)
{
    ScheduleLog log;
    const Table st = read_table(steps_path);
    const int c_t = st.column("t"), c_ep = st.column("episode"), c_r = st.column("reward");
    const int c_truth = st.column("truth_label"), c_pred = st.column("predicted_assignment");
    const int c_k = st.column("K_live");
    if (c_t < 0 || c_ep < 0 || c_r < 0 || c_pred < 0 || c_k < 0)
        throw FormatError(steps_path + ": missing required columns");
    std::vector<int> obs_cols, act_cols;
    for (int i = c_ep + 1; i < c_r; ++i) {
        const std::string& h = st.header[static_cast<std::size_t>(i)];
        (h[0] == 'u' ? act_cols : obs_cols).push_back(i);
    }
    for (std::size_t r = 0; r < st.rows.size(); ++r) {
        const auto& row = st.rows[r];
        const std::string where = steps_path + " row " + std::to_string(r + 1);
        StepRecord s;
        s.t = parse_long(row[static_cast<std::size_t>(c_t)], where);
        s.episode = static_cast<int>(parse_long(row[static_cast<std::size_t>(c_ep)], where));
        s.obs = Vector(static_cast<Eigen::Index>(obs_cols.size()));
        for (std::size_t i = 0; i < obs_cols.size(); ++i)
            s.obs(static_cast<Eigen::Index>(i)) = parse_double(row[static_cast<std::size_t>(obs_cols[i])], where);
        s.action = Vector(static_cast<Eigen::Index>(act_cols.size()));
        for (std::size_t i = 0; i < act_cols.size(); ++i)
            s.action(static_cast<Eigen::Index>(i)) = parse_double(row[static_cast<std::size_t>(act_cols[i])], where);
        s.reward = parse_double(row[static_cast<std::size_t>(c_r)], where);
        s.truth_label = c_truth < 0 || row[static_cast<std::size_t>(c_truth)].empty()
                            ? -1
                            : static_cast<int>(parse_long(row[static_cast<std::size_t>(c_truth)], where));
        s.predicted = static_cast<int>(parse_long(row[static_cast<std::size_t>(c_pred)], where));
        s.live_experts = static_cast<int>(parse_long(row[static_cast<std::size_t>(c_k)], where));
        log.steps.push_back(std::move(s));
    }
    const Table et = read_table(episodes_path);
    const int e_ep = et.column("episode"), e_truth = et.column("truth_label");
    const int e_cycle = et.column("cycle"), e_ret = et.column("total_reward"), e_len = et.column("length");
    if (e_ep < 0 || e_ret < 0 || e_len < 0)
        throw FormatError(episodes_path + ": missing required columns");
    for (std::size_t r = 0; r < et.rows.size(); ++r) {
        const auto& row = et.rows[r];
        const std::string where = episodes_path + " row " + std::to_string(r + 1);
        EpisodeRecord e;
        e.episode = static_cast<int>(parse_long(row[static_cast<std::size_t>(e_ep)], where));
        e.truth_label = e_truth < 0 || row[static_cast<std::size_t>(e_truth)].empty()
                            ? -1
                            : static_cast<int>(parse_long(row[static_cast<std::size_t>(e_truth)], where));
        e.cycle = e_cycle < 0 ? 0 : static_cast<int>(parse_long(row[static_cast<std::size_t>(e_cycle)], where));
        e.total_reward = parse_double(row[static_cast<std::size_t>(e_ret)], where);
        e.length = static_cast<int>(parse_long(row[static_cast<std::size_t>(e_len)], where));
        log.episodes.push_back(e);
    }
    return log;
}

} // namespace gpmm
