#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "gpmm/checkpoint.hpp"
#include "gpmm/config.hpp"
#include "gpmm/errors.hpp"
#include "gpmm/metrics.hpp"
#include "gpmm/runner.hpp"

namespace fs = std::filesystem;
using namespace gpmm;

namespace {

RunConfig preset(const std::string& name)
{
    if (name == "cartpole")
        return default_cartpole_config();
    if (name == "desk")
        return desk_scale_cartpole_config();
    if (name == "synthetic")
        return default_synthetic_config();
    throw FormatError("unknown preset '" + name + "'");
}

int stable_len_for(const fs::path& dir, int fallback)
{
    const fs::path cfg = dir / "config.json";
    if (!fs::exists(cfg))
        return fallback;
    return load_run_config(cfg.string()).mixture.n_merge;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Online mixture of GP dynamics experts with MPC"};
    app.require_subcommand(1);

    std::string config_path, preset_name = "cartpole", out_dir, ablate;
    std::uint64_t seed = 0;
    bool no_merge_prune = false;
    auto* run_cmd = app.add_subcommand("run", "run the online loop and write logs, report and checkpoint");
    run_cmd->add_option("--config", config_path, "JSON run configuration");
    run_cmd->add_option("--preset", preset_name, "built-in config when --config is absent")
        ->check(CLI::IsMember({"cartpole", "desk", "synthetic"}));
    auto* seed_opt = run_cmd->add_option("--seed", seed, "master seed");
    auto* out_opt = run_cmd->add_option("--out", out_dir, "output directory");
    run_cmd->add_option("--ablate-prior", ablate, "assignment prior")->check(CLI::IsMember({"dp", "transition"}));
    run_cmd->add_flag("--no-merge-prune", no_merge_prune, "disable burn-in merge and pruning");

    std::vector<std::string> eval_dirs;
    int eval_stable = 15;
    auto* eval_cmd = app.add_subcommand("evaluate", "metrics from one or more run directories");
    eval_cmd->add_option("dirs", eval_dirs, "run output directories")->required();
    eval_cmd->add_option("--stable", eval_stable, "predicted-switch stability length when config.json is absent");

    std::string ckpt, stream;
    long replay_steps = -1;
    auto* replay_cmd = app.add_subcommand("replay", "resume a checkpoint on a recorded transition stream");
    replay_cmd->add_option("--checkpoint", ckpt, "checkpoint archive")->required();
    replay_cmd->add_option("--stream", stream, "transitions.csv of the run")->required();
    replay_cmd->add_option("--steps", replay_steps, "observations to replay, negative for all");

    std::string dump_preset = "cartpole";
    auto* config_cmd = app.add_subcommand("config", "print a built-in configuration");
    config_cmd->add_option("--preset", dump_preset)->check(CLI::IsMember({"cartpole", "desk", "synthetic"}));

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run_cmd) {
            RunConfig cfg = config_path.empty() ? preset(preset_name) : load_run_config(config_path);
            if (*seed_opt)
                cfg.seed = seed;
            if (*out_opt)
                cfg.output_dir = out_dir;
            if (!ablate.empty())
                cfg.mixture.prior_mode = prior_mode_from_string(ablate);
            if (no_merge_prune)
                cfg.mixture.merge_prune = false;
            const RunResult r = run(cfg);
            std::cout << to_json(r.report).dump(2) << '\n';
            if (r.failed) {
                std::cerr << "run failed: " << r.error << '\n';
                return 2;
            }
            return 0;
        }
        if (*eval_cmd) {
            std::vector<MetricsReport> reports;
            for (const std::string& d : eval_dirs) {
                const fs::path dir(d);
                const ScheduleLog log = read_logs((dir / "steps.csv").string(), (dir / "episodes.csv").string());
                reports.push_back(evaluate(log, stable_len_for(dir, eval_stable)));
            }
            if (reports.size() == 1)
                std::cout << to_json(reports.front()).dump(2) << '\n';
            else
                std::cout << to_json(aggregate(reports)).dump(2) << '\n';
            return 0;
        }
        if (*replay_cmd) {
            const ReplayResult r = replay_files(ckpt, stream, replay_steps);
            long mismatches = 0;
            for (std::size_t i = 0; i < r.assignments.size(); ++i) {
                const int rec = i < r.recorded.size() ? r.recorded[i] : -1;
                std::cout << r.first_step + static_cast<long>(i) << ',' << r.assignments[i] << ',' << rec << '\n';
                if (rec != r.assignments[i])
                    ++mismatches;
            }
            std::cerr << r.assignments.size() << " steps replayed from step " << r.first_step << ", "
                      << mismatches << " differ from the recording\n";
            return mismatches == 0 ? 0 : 3;
        }
        if (*config_cmd) {
            std::cout << to_json(preset(dump_preset)).dump(2) << '\n';
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
