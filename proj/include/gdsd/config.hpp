#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gdsd/decode.hpp"
#include "gdsd/tasks.hpp"
#include "gdsd/trainer.hpp"

namespace gdsd {

// ---------------------------------------------------------------------------
// flat `key = value` configuration
// ---------------------------------------------------------------------------

struct ConfigEntry {
    std::string key;
    std::string value;
    int line = 0;  // 0 for command-line overrides
};

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) {
        return "";
    }
    return s.substr(a, b - a + 1);
}

inline std::vector<ConfigEntry> parse_config_text(const std::string& text) {
    std::vector<ConfigEntry> entries;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected 'key = value', got '" + line + "'");
        }
        ConfigEntry e;
        e.key = trim(line.substr(0, eq));
        e.value = trim(line.substr(eq + 1));
        e.line = lineno;
        if (e.key.empty()) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

inline std::vector<ConfigEntry> parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read config file '" + path + "'");
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

enum class Command { train, verify, tim };

struct TaskOptions {
    TaskId id = TaskId::copy_reverse;
    int vocab = 8;
    int length = 8;  // prompt length for copy_reverse
    int sudoku_empty_cells = 6;
};

struct TimOptions {
    int samples = 2000;
    int k = 2;
    double noise = 0.1;  // logit perturbation applied to theta
};

// Fully resolved run description: every field has a value once resolve() returns,
// and unknown keys have been rejected.
struct RunConfig {
    Command command = Command::train;
    uint64_t seed = 1;
    std::string out_dir = "runs/out";
    bool emit_plot_data = false;
    TaskOptions task;
    TrainConfig trainer;
    TimOptions tim;
};

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") {
        return true;
    }
    if (v == "false" || v == "0" || v == "no") {
        return false;
    }
    throw std::invalid_argument("config key '" + key + "': expected a boolean, got '" + v + "'");
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument("");
        }
        return x;
    } catch (...) {
        throw std::invalid_argument("config key '" + key + "': expected a number, got '" + v + "'");
    }
}

inline long long parse_int(const std::string& v, const std::string& key) {
    try {
        size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size()) {
            throw std::invalid_argument("");
        }
        return x;
    } catch (...) {
        throw std::invalid_argument("config key '" + key + "': expected an integer, got '" + v +
                                    "'");
    }
}

}  // namespace detail

inline void apply_entry(RunConfig& cfg, const ConfigEntry& e) {
    const std::string& k = e.key;
    const std::string& v = e.value;
    const auto where = [&]() {
        return e.line > 0 ? " (line " + std::to_string(e.line) + ")" : " (override)";
    };
    if (k == "command") {
        if (v == "train") {
            cfg.command = Command::train;
        } else if (v == "verify") {
            cfg.command = Command::verify;
        } else if (v == "tim") {
            cfg.command = Command::tim;
        } else {
            throw std::invalid_argument("config key 'command'" + where() +
                                        ": expected train|verify|tim");
        }
    } else if (k == "seed") {
        cfg.seed = static_cast<uint64_t>(detail::parse_int(v, k));
        cfg.trainer.seed = cfg.seed;
    } else if (k == "out") {
        cfg.out_dir = v;
    } else if (k == "emit_plot_data") {
        cfg.emit_plot_data = detail::parse_bool(v, k);
    } else if (k == "task.id") {
        cfg.task.id = task_id_from_string(v);
    } else if (k == "task.vocab") {
        cfg.task.vocab = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "task.length") {
        cfg.task.length = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "task.sudoku_empty_cells") {
        cfg.task.sudoku_empty_cells = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "trainer.objective") {
        cfg.trainer.objective = objective_from_string(v);
    } else if (k == "trainer.psi") {
        cfg.trainer.psi = detail::parse_double(v, k);
    } else if (k == "trainer.beta") {
        cfg.trainer.beta = detail::parse_double(v, k);
    } else if (k == "trainer.epsilon") {
        cfg.trainer.epsilon = detail::parse_double(v, k);
    } else if (k == "trainer.k") {
        cfg.trainer.mc_samples = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "trainer.mu") {
        cfg.trainer.refresh_every = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "trainer.group_size") {
        cfg.trainer.group_size = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "trainer.prompts_per_step") {
        cfg.trainer.prompts_per_step = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "trainer.learning_rate") {
        cfg.trainer.learning_rate = detail::parse_double(v, k);
    } else if (k == "trainer.momentum") {
        cfg.trainer.momentum = detail::parse_double(v, k);
    } else if (k == "trainer.max_grad_norm") {
        cfg.trainer.max_grad_norm = detail::parse_double(v, k);
    } else if (k == "trainer.steps") {
        cfg.trainer.total_steps = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "trainer.weight_schedule") {
        if (v == "inv_t") {
            cfg.trainer.weight_schedule = WeightSchedule::inv_t;
        } else if (v == "constant") {
            cfg.trainer.weight_schedule = WeightSchedule::constant;
        } else {
            throw std::invalid_argument("config key 'trainer.weight_schedule'" + where() +
                                        ": expected inv_t|constant");
        }
    } else if (k == "trainer.coupled_masks") {
        cfg.trainer.coupled_masks = detail::parse_bool(v, k);
    } else if (k == "trainer.masking") {
        if (v == "exact_count") {
            cfg.trainer.masking = MaskMode::exact_count;
        } else if (v == "bernoulli") {
            cfg.trainer.masking = MaskMode::bernoulli;
        } else {
            throw std::invalid_argument("config key 'trainer.masking'" + where() +
                                        ": expected exact_count|bernoulli");
        }
    } else if (k == "trainer.hidden") {
        cfg.trainer.hidden = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "trainer.init_scale") {
        cfg.trainer.init_scale = detail::parse_double(v, k);
    } else if (k == "trainer.checkpoint_every") {
        cfg.trainer.checkpoint_every = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "decode.steps") {
        cfg.trainer.decode_steps = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "decode.block_size") {
        cfg.trainer.block_size = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "decode.temperature") {
        cfg.trainer.temperature = detail::parse_double(v, k);
    } else if (k == "decode.selection") {
        if (v == "low_confidence") {
            cfg.trainer.selection = Selection::low_confidence;
        } else if (v == "random") {
            cfg.trainer.selection = Selection::random_subset;
        } else {
            throw std::invalid_argument("config key 'decode.selection'" + where() +
                                        ": expected low_confidence|random");
        }
    } else if (k == "tim.samples") {
        cfg.tim.samples = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "tim.k") {
        cfg.tim.k = static_cast<int>(detail::parse_int(v, k));
    } else if (k == "tim.noise") {
        cfg.tim.noise = detail::parse_double(v, k);
    } else {
        throw std::invalid_argument("unknown config key '" + k + "'" + where());
    }
}

inline RunConfig resolve_config(const std::vector<ConfigEntry>& file_entries,
                                const std::vector<ConfigEntry>& overrides) {
    RunConfig cfg;
    for (const ConfigEntry& e : file_entries) {
        apply_entry(cfg, e);
    }
    for (const ConfigEntry& e : overrides) {
        apply_entry(cfg, e);
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// deterministic number / record formatting
// ---------------------------------------------------------------------------

inline std::string format_double(double x) {
    char buf[64];
    const std::to_chars_result res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

// One flat JSON object per step, fixed key order; byte-identical for identical
// (config, seed).
inline std::string metrics_json_line(const StepMetrics& m) {
    std::string s = "{\"step\":" + std::to_string(m.step);
    s += ",\"reward_mean\":" + format_double(m.reward_mean);
    s += ",\"loss_total\":" + format_double(m.loss_total);
    s += ",\"loss_match\":" + format_double(m.loss_match);
    s += ",\"loss_reg\":" + format_double(m.loss_reg);
    s += ",\"grad_norm\":" + format_double(m.grad_norm);
    s += std::string(",\"old_refresh\":") + (m.old_refresh ? "true" : "false");
    s += "}";
    return s;
}

// All keys materialized, fixed order; written next to every run's outputs.
inline std::string render_resolved_config(const RunConfig& cfg) {
    std::string s;
    const auto add = [&](const std::string& k, const std::string& v) {
        s += k + " = " + v + "\n";
    };
    add("command", cfg.command == Command::train    ? "train"
                   : cfg.command == Command::verify ? "verify"
                                                    : "tim");
    add("seed", std::to_string(cfg.seed));
    add("out", cfg.out_dir);
    add("emit_plot_data", cfg.emit_plot_data ? "true" : "false");
    add("task.id", to_string(cfg.task.id));
    add("task.vocab", std::to_string(cfg.task.vocab));
    add("task.length", std::to_string(cfg.task.length));
    add("task.sudoku_empty_cells", std::to_string(cfg.task.sudoku_empty_cells));
    add("trainer.objective", to_string(cfg.trainer.objective));
    add("trainer.psi", format_double(cfg.trainer.psi));
    add("trainer.beta", format_double(cfg.trainer.beta));
    add("trainer.epsilon", format_double(cfg.trainer.epsilon));
    add("trainer.k", std::to_string(cfg.trainer.mc_samples));
    add("trainer.mu", std::to_string(cfg.trainer.refresh_every));
    add("trainer.group_size", std::to_string(cfg.trainer.group_size));
    add("trainer.prompts_per_step", std::to_string(cfg.trainer.prompts_per_step));
    add("trainer.learning_rate", format_double(cfg.trainer.learning_rate));
    add("trainer.momentum", format_double(cfg.trainer.momentum));
    add("trainer.max_grad_norm", format_double(cfg.trainer.max_grad_norm));
    add("trainer.steps", std::to_string(cfg.trainer.total_steps));
    add("trainer.weight_schedule",
        cfg.trainer.weight_schedule == WeightSchedule::inv_t ? "inv_t" : "constant");
    add("trainer.coupled_masks", cfg.trainer.coupled_masks ? "true" : "false");
    add("trainer.masking",
        cfg.trainer.masking == MaskMode::exact_count ? "exact_count" : "bernoulli");
    add("trainer.hidden", std::to_string(cfg.trainer.hidden));
    add("trainer.init_scale", format_double(cfg.trainer.init_scale));
    add("trainer.checkpoint_every", std::to_string(cfg.trainer.checkpoint_every));
    add("decode.steps", std::to_string(cfg.trainer.decode_steps));
    add("decode.block_size", std::to_string(cfg.trainer.block_size));
    add("decode.temperature", format_double(cfg.trainer.temperature));
    add("decode.selection", to_string(cfg.trainer.selection));
    add("tim.samples", std::to_string(cfg.tim.samples));
    add("tim.k", std::to_string(cfg.tim.k));
    add("tim.noise", format_double(cfg.tim.noise));
    return s;
}

inline Task task_from_options(const TaskOptions& opt) {
    return make_task(opt.id, opt.vocab, opt.length, opt.sudoku_empty_cells);
}

}  // namespace gdsd
