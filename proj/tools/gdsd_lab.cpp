// Experiment runner: training runs on the toy tasks, the oracle verification
// suite, and the training-inference mismatch analysis. See README.md for usage.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gdsd/config.hpp"
#include "gdsd/verify.hpp"

namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open output file '" + path.string() + "'");
    }
    return out;
}

std::string params_json(const gdsd::ParamVector& params) {
    std::string s = "[";
    for (size_t i = 0; i < params.size(); ++i) {
        if (i > 0) {
            s += ",";
        }
        s += gdsd::format_double(params[i]);
    }
    s += "]";
    return s;
}

int run_train(const gdsd::RunConfig& cfg) {
    const gdsd::Task task = gdsd::task_from_options(cfg.task);
    const fs::path out_dir(cfg.out_dir);

    std::ofstream metrics = open_out(out_dir / "metrics.jsonl");
    std::ofstream timing = open_out(out_dir / "timing.log");
    std::ofstream reward_csv;
    std::ofstream loss_csv;
    if (cfg.emit_plot_data) {
        reward_csv = open_out(out_dir / "reward.csv");
        loss_csv = open_out(out_dir / "loss.csv");
        reward_csv << "step,reward\n";
        loss_csv << "step,loss\n";
    }
    std::ofstream checkpoints;
    if (cfg.trainer.checkpoint_every > 0) {
        checkpoints = open_out(out_dir / "checkpoints.jsonl");
    }

    const auto t0 = std::chrono::steady_clock::now();
    gdsd::StepMetrics last;
    const auto on_step = [&](const gdsd::StepMetrics& m, const gdsd::TrainState& state) {
        metrics << gdsd::metrics_json_line(m) << "\n";
        const double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        timing << m.step << " " << elapsed << "\n";
        if (cfg.emit_plot_data) {
            reward_csv << m.step << "," << gdsd::format_double(m.reward_mean) << "\n";
            loss_csv << m.step << "," << gdsd::format_double(m.loss_total) << "\n";
        }
        if (cfg.trainer.checkpoint_every > 0 && m.step % cfg.trainer.checkpoint_every == 0) {
            checkpoints << "{\"step\":" << m.step
                        << ",\"params\":" << params_json(state.policies.theta.params) << "}\n";
        }
        last = m;
        if (m.step % 50 == 0 || m.step == 1) {
            std::printf("step %5lld  reward %.4f  loss %.5f  |g| %.4f\n",
                        static_cast<long long>(m.step), m.reward_mean, m.loss_total, m.grad_norm);
        }
    };

    std::vector<gdsd::StepMetrics> log;
    try {
        log = gdsd::run_training(task, cfg.trainer, on_step);
    } catch (const std::exception& e) {
        metrics.flush();
        timing.flush();
        std::fprintf(stderr, "training aborted: %s\n", e.what());
        return 1;
    }

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ofstream summary = open_out(out_dir / "summary.json");
    summary << "{\"command\":\"train\",\"task\":\"" << gdsd::to_string(task.id)
            << "\",\"steps\":" << log.size()
            << ",\"final_reward_mean\":" << gdsd::format_double(last.reward_mean)
            << ",\"final_loss_total\":" << gdsd::format_double(last.loss_total)
            << ",\"wall_seconds\":" << gdsd::format_double(wall) << "}\n";
    std::printf("done: %zu steps, final reward %.4f (%.1fs)\n", log.size(), last.reward_mean,
                wall);
    return 0;
}

int run_verify(const gdsd::RunConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<gdsd::CheckResult> results =
        gdsd::verify::run_oracle_suite(gdsd::verify::kTimFixtureBias);
    bool all_pass = true;
    std::ofstream report = open_out(fs::path(cfg.out_dir) / "verify_report.txt");
    for (const gdsd::CheckResult& r : results) {
        const char* mark = r.pass ? "PASS" : "FAIL";
        std::printf("[%s] %s: %s\n", mark, r.name.c_str(), r.detail.c_str());
        report << "[" << mark << "] " << r.name << ": " << r.detail << "\n";
        all_pass = all_pass && r.pass;
    }
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s (%.1fs)\n", all_pass ? "all checks passed" : "CHECKS FAILED", wall);
    return all_pass ? 0 : 1;
}

int run_tim(const gdsd::RunConfig& cfg) {
    const gdsd::EnumerableInstance inst = gdsd::verify::make_tim_fixture(cfg.tim.noise);
    const gdsd::DecodeSchedule sched = gdsd::finest_schedule(inst.completion_len);
    gdsd::RngStream rng(cfg.seed);
    const gdsd::TimReport report =
        gdsd::tim_report(inst, sched, cfg.tim.k, cfg.tim.samples, rng);

    std::ofstream out = open_out(fs::path(cfg.out_dir) / "tim_report.jsonl");
    for (const gdsd::TimRow& row : report.rows) {
        out << "{\"completion\":" << row.completion_index
            << ",\"log_rm\":" << gdsd::format_double(row.log_rm)
            << ",\"exact_ll\":" << gdsd::format_double(row.exact_ll)
            << ",\"elbo_mean\":" << gdsd::format_double(row.elbo_mean)
            << ",\"elbo_std\":" << gdsd::format_double(row.elbo_std)
            << ",\"ratio_bias\":" << gdsd::format_double(row.ratio_bias) << "}\n";
    }
    out << "{\"mean_abs_ratio_bias\":" << gdsd::format_double(report.mean_abs_ratio_bias)
        << ",\"mc_samples\":" << report.mc_samples << ",\"mc_k\":" << report.mc_k << "}\n";
    std::printf("tim: mean abs importance-log-ratio bias %.12f over %zu completions\n",
                report.mean_abs_ratio_bias, report.rows.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale lab for RL on masked diffusion language models"};

    std::string config_path;
    std::vector<std::string> set_overrides;
    std::string out_dir;
    long long seed = -1;
    bool emit_plot_data = false;
    std::string command;

    app.add_option("command", command, "train | verify | tim (overrides the config file)");
    app.add_option("--config", config_path, "path to a key = value config file");
    app.add_option("--set", set_overrides, "override a config key, e.g. --set trainer.psi=5")
        ->take_all();
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed, "run seed");
    app.add_flag("--emit-plot-data", emit_plot_data, "write (step, reward) and (step, loss) CSVs");

    CLI11_PARSE(app, argc, argv);

    try {
        std::vector<gdsd::ConfigEntry> file_entries;
        if (!config_path.empty()) {
            file_entries = gdsd::parse_config_file(config_path);
        }
        std::vector<gdsd::ConfigEntry> overrides;
        if (!command.empty()) {
            overrides.push_back(gdsd::ConfigEntry{"command", command, 0});
        }
        for (const std::string& kv : set_overrides) {
            const size_t eq = kv.find('=');
            if (eq == std::string::npos) {
                throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
            }
            overrides.push_back(gdsd::ConfigEntry{gdsd::trim(kv.substr(0, eq)),
                                                  gdsd::trim(kv.substr(eq + 1)), 0});
        }
        if (!out_dir.empty()) {
            overrides.push_back(gdsd::ConfigEntry{"out", out_dir, 0});
        }
        if (seed >= 0) {
            overrides.push_back(gdsd::ConfigEntry{"seed", std::to_string(seed), 0});
        }
        if (emit_plot_data) {
            overrides.push_back(gdsd::ConfigEntry{"emit_plot_data", "true", 0});
        }

        gdsd::RunConfig cfg = gdsd::resolve_config(file_entries, overrides);
        fs::create_directories(cfg.out_dir);
        {
            std::ofstream resolved = open_out(fs::path(cfg.out_dir) / "config.resolved.txt");
            resolved << gdsd::render_resolved_config(cfg);
        }
        switch (cfg.command) {
            case gdsd::Command::train: return run_train(cfg);
            case gdsd::Command::verify: return run_verify(cfg);
            case gdsd::Command::tim: return run_tim(cfg);
        }
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
