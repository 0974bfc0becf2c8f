#pragma once

// Evaluation metrics computed purely from run logs.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gpmm/envs.hpp"

namespace gpmm {

struct MetricsReport {
    long steps = 0;
    bool has_labels = false;
    /// Fraction of steps matched under the best one-to-one relabeling of
    /// predicted expert ids onto truth labels.
    std::optional<double> accuracy;
    /// Truth switch step -> delay in steps; switches never detected are absent.
    std::map<long, long> detection_delays;
    int truth_switches = 0;
    int missed_switches = 0;
    std::optional<double> mean_delay;
    /// Steps where the predicted assignment differs from the previous step.
    long predicted_switch_events = 0;
    std::vector<int> expert_count_timeline;
    std::vector<double> episode_returns;
    std::vector<int> episode_labels;
    /// Mean episode return per truth label.
    std::map<int, double> label_mean_returns;
};

/// Accuracy under the best relabeling; rows with a negative truth label or
/// predicted id are skipped. Returns nullopt when no row has both.
std::optional<double> best_permutation_accuracy(const std::vector<int>& truth,
                                                const std::vector<int>& predicted);

/// Delay from each truth switch to the first later predicted switch whose new
/// value then holds for at least `stable_len` steps (or until the end of the
/// log). A switch is missed when no such predicted switch occurs before the
/// next truth switch.
std::map<long, long> detection_delays(const std::vector<int>& truth,
                                      const std::vector<int>& predicted, int stable_len,
                                      int* truth_switches = nullptr);

long count_switch_events(const std::vector<int>& predicted);

MetricsReport evaluate(const ScheduleLog& log, int stable_len);

nlohmann::ordered_json to_json(const MetricsReport& report);

/// Mean and standard deviation over seeds of the per-episode and per-label
/// returns, plus the mean accuracy and delay.
struct AggregateReport {
    int seeds = 0;
    std::vector<double> episode_return_mean;
    std::vector<double> episode_return_std;
    std::map<int, double> label_return_mean;
    std::map<int, double> label_return_std;
    std::optional<double> accuracy_mean;
    std::optional<double> delay_mean;
};

AggregateReport aggregate(const std::vector<MetricsReport>& reports);
nlohmann::ordered_json to_json(const AggregateReport& report);

/// steps.csv / episodes.csv. Cart-pole logs use the observation column names
/// x, x_dot, cos_theta, sin_theta, theta_dot and action u; other logs use
/// obs0.. and u0...
void write_steps_csv(const ScheduleLog& log, const std::string& path);
void write_episodes_csv(const ScheduleLog& log, const std::string& path);
ScheduleLog read_logs(const std::string& steps_path, const std::string& episodes_path);

} // namespace gpmm
