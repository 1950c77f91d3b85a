#pragma once

#include <cmath>
#include <cstdlib>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "gdsd/decode.hpp"
#include "gdsd/mdm.hpp"
#include "gdsd/objectives.hpp"
#include "gdsd/tasks.hpp"

namespace gdsd {

enum class Objective { gdsd_direct, gdsd_tlc, awelbo, pg_elbo, ppo_elbo };

inline const char* to_string(Objective o) {
    switch (o) {
        case Objective::gdsd_direct: return "gdsd_direct";
        case Objective::gdsd_tlc: return "gdsd_tlc";
        case Objective::awelbo: return "awelbo";
        case Objective::pg_elbo: return "pg_elbo";
        case Objective::ppo_elbo: return "ppo_elbo";
    }
    return "?";
}

inline Objective objective_from_string(const std::string& s) {
    if (s == "gdsd_direct") return Objective::gdsd_direct;
    if (s == "gdsd_tlc") return Objective::gdsd_tlc;
    if (s == "awelbo") return Objective::awelbo;
    if (s == "pg_elbo") return Objective::pg_elbo;
    if (s == "ppo_elbo") return Objective::ppo_elbo;
    throw std::invalid_argument("unknown objective '" + s + "'");
}

struct TrainConfig {
    Objective objective = Objective::gdsd_tlc;
    double psi = 10.0;
    double beta = 1e-3;
    double epsilon = 0.2;        // ppo clip
    int mc_samples = 2;          // K time draws per completion
    int refresh_every = 8;       // mu
    int group_size = 6;          // G completions per prompt
    int prompts_per_step = 10;   // rollout groups folded into one update
    double learning_rate = 0.4;
    double momentum = 0.92;
    double max_grad_norm = 0.2;
    int total_steps = 500;
    uint64_t seed = 1;
    WeightSchedule weight_schedule = WeightSchedule::inv_t;
    bool coupled_masks = true;
    MaskMode masking = MaskMode::exact_count;
    int decode_steps = 0;        // 0: completion_len / 2
    int block_size = -1;         // -1: completion_len / 4, 0: none
    double temperature = 0.9;
    Selection selection = Selection::low_confidence;
    int hidden = 96;
    double init_scale = 0.5;
    int checkpoint_every = 0;    // 0: off

    void validate() const {
        if (refresh_every < 1) {
            throw std::invalid_argument("TrainConfig: mu must be >= 1");
        }
        if (group_size < 2) {
            throw std::invalid_argument("TrainConfig: group size must be >= 2");
        }
        if (prompts_per_step < 1) {
            throw std::invalid_argument("TrainConfig: prompts_per_step must be >= 1");
        }
        if (!(learning_rate >= 0.0)) {
            throw std::invalid_argument("TrainConfig: learning rate must be >= 0");
        }
        if (mc_samples < 1 || total_steps < 1) {
            throw std::invalid_argument("TrainConfig: K and total steps must be >= 1");
        }
        if (!(beta >= 0.0 && beta < 1.0)) {
            throw std::invalid_argument("TrainConfig: beta must lie in [0, 1)");
        }
    }
};

// One prompt with G sampled completions, their rewards, and mean-centered
// advantages.
struct RolloutGroup {
    TokenSequence prompt;
    std::vector<TokenSequence> completions;  // full sequences, prompt included
    std::vector<AdvantageRecord> records;
};

struct StepMetrics {
    int64_t step = 0;
    double reward_mean = 0.0;
    double loss_total = 0.0;
    double loss_match = 0.0;
    double loss_reg = 0.0;
    double grad_norm = 0.0;  // post-clip
    bool old_refresh = false;
};

struct TrainState {
    int64_t step = 0;
    Task task;
    PolicySet policies;
    std::vector<double> momentum_buf;
    uint64_t seed = 0;
};

// Worker cap from GDSD_LAB_THREADS (default 1). Work items write disjoint slots,
// so the thread count never changes results.
inline int worker_count() {
    const char* env = std::getenv("GDSD_LAB_THREADS");
    if (env == nullptr) {
        return 1;
    }
    const int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

template <class Fn>
void parallel_for(int n, Fn&& fn) {
    const int workers = std::min(worker_count(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            try {
                for (int i = w; i < n; i += workers) {
                    fn(i);
                }
            } catch (...) {
                errors[static_cast<size_t>(w)] = std::current_exception();
            }
        });
    }
    for (std::thread& t : pool) {
        t.join();
    }
    for (const std::exception_ptr& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

inline DecodeSchedule schedule_from_config(const TrainConfig& cfg, int completion_len) {
    int steps = cfg.decode_steps > 0 ? cfg.decode_steps : std::max(1, completion_len / 2);
    int block = cfg.block_size;
    if (block < 0) {
        block = (completion_len % 4 == 0 && completion_len >= 8) ? completion_len / 4 : 0;
    }
    if (block > 0 && steps % (completion_len / block) != 0) {
        block = 0;  // fall back to unblocked when the split does not work out
    }
    return make_schedule(steps, completion_len, cfg.selection, block, cfg.temperature);
}

inline TrainState init_train_state(const Task& task, const TrainConfig& cfg) {
    cfg.validate();
    TrainState state;
    state.task = task;
    state.seed = cfg.seed;
    PolicyShape shape;
    shape.family = PolicyFamily::mlp;
    shape.vocab = task.vocab.size;
    shape.seq_len = task.prompt_len + task.completion_len;
    shape.prompt_len = task.prompt_len;
    shape.hidden = cfg.hidden;
    shape.validate();
    RngStream init_rng = RngStream(cfg.seed).substream(0xA11C);
    state.policies = make_policy_set(shape, init_params(shape, cfg.init_scale, init_rng));
    state.momentum_buf.assign(state.policies.theta.params.size(), 0.0);
    return state;
}

// G independent decodes under the old policy, scored by the task, with
// mean-centered advantages.
inline RolloutGroup rollout_group(const TrainState& state, const TokenSequence& prompt, int g,
                                  const DecodeSchedule& sched, RngStream& rng) {
    if (g < 2) {
        throw std::invalid_argument("rollout_group: G must be >= 2");
    }
    RolloutGroup group;
    group.prompt = prompt;
    group.completions.resize(static_cast<size_t>(g));
    std::vector<RngStream> streams;
    streams.reserve(static_cast<size_t>(g));
    for (int i = 0; i < g; ++i) {
        streams.push_back(rng.substream(static_cast<uint64_t>(i)));
    }
    parallel_for(g, [&](int i) {
        RngStream local = streams[static_cast<size_t>(i)];
        group.completions[static_cast<size_t>(i)] =
            decode(state.policies.old_policy, prompt, sched, local).completion;
    });
    std::vector<double> rewards;
    rewards.reserve(static_cast<size_t>(g));
    for (const TokenSequence& completion : group.completions) {
        rewards.push_back(reward(state.task, completion));
    }
    group.records = compute_advantages(rewards);
    return group;
}

namespace detail {

struct CoupledSample {
    MaskedSequence primary;
    std::optional<MaskedSequence> complement;
    double weight = 1.0;
};

template <class Scalar>
Scalar basis_logprob_sum(const DenoiserOutputT<Scalar>& out, const TokenSequence& x0,
                         TeacherMode mode) {
    Tape* tape = nullptr;
    if constexpr (std::is_same_v<Scalar, Var>) {
        tape = out.logits.empty() ? nullptr : out.logits[0].tape();
    }
    Scalar total = make_scalar<Scalar>(0.0, tape);
    for (int n : out.masked_positions) {
        const std::vector<Scalar> basis = teacher_basis_row(out.row(n), mode);
        total += basis[static_cast<size_t>(x0.tokens[static_cast<size_t>(n)])];
    }
    return total;
}

struct LossStats {
    double total = 0.0;
    double match = 0.0;
    double reg = 0.0;
};

// Loss of one completion given its pre-drawn (t, mask) samples. The same masked
// inputs feed theta, old, and ref; for the squared objectives the coupled
// complement's log-prob sum is averaged with the primary's before the ratios.
template <class Scalar>
Scalar completion_loss(const TrainConfig& cfg, const PolicyShape& shape,
                       std::span<const Scalar> theta_params, const PolicySnapshot& old_policy,
                       const PolicySnapshot& ref, const TokenSequence& x0, double advantage,
                       std::span<const CoupledSample> samples, LossStats* stats) {
    const std::span<const double> old_params(old_policy.params);
    const std::span<const double> ref_params(ref.params);

    if (cfg.objective == Objective::gdsd_direct || cfg.objective == Objective::gdsd_tlc) {
        const TeacherMode mode =
            cfg.objective == Objective::gdsd_tlc ? TeacherMode::tlc : TeacherMode::direct;
        Scalar loss{};
        double weight_sum = 0.0;
        bool first = true;
        for (const CoupledSample& s : samples) {
            // one evaluation per policy per masked input
            std::vector<const MaskedSequence*> parts{&s.primary};
            if (s.complement.has_value() && s.complement->masked_count() > 0) {
                parts.push_back(&*s.complement);
            }
            Scalar s_theta{};
            double s_old = 0.0;
            double s_ref = 0.0;
            bool first_part = true;
            for (const MaskedSequence* xt : parts) {
                const Scalar st = basis_logprob_sum(
                    denoiser_logits(shape, theta_params, *xt, PolicyTag::theta), x0, mode);
                const double so = basis_logprob_sum<double>(
                    denoiser_logits<double>(shape, old_params, *xt, PolicyTag::old_policy), x0,
                    mode);
                const double sr = basis_logprob_sum<double>(
                    denoiser_logits<double>(shape, ref_params, *xt, PolicyTag::ref), x0, mode);
                if (first_part) {
                    s_theta = st;
                    s_old = so;
                    s_ref = sr;
                    first_part = false;
                } else {
                    s_theta = (s_theta + st) * 0.5;
                    s_old = (s_old + so) * 0.5;
                    s_ref = (s_ref + sr) * 0.5;
                }
            }
            const Scalar match_root = s_theta - s_old - cfg.psi * advantage;
            const Scalar reg_root = s_theta - s_ref;
            const Scalar match = match_root * match_root;
            const Scalar reg = reg_root * reg_root;
            const Scalar total = match + (cfg.beta / (1.0 - cfg.beta)) * reg;
            if (stats != nullptr) {
                stats->match += s.weight * value_of(match);
                stats->reg += s.weight * value_of(reg);
            }
            if (first) {
                loss = total * s.weight;
                first = false;
            } else {
                loss += total * s.weight;
            }
            weight_sum += s.weight;
        }
        loss = loss * (1.0 / weight_sum);
        if (stats != nullptr) {
            stats->match /= weight_sum;
            stats->reg /= weight_sum;
            stats->total = value_of(loss);
        }
        return loss;
    }

    // ELBO-based objectives consume the flat sample list; coupled complements act
    // as extra weighted samples.
    std::vector<TimeSample> flat;
    for (const CoupledSample& s : samples) {
        flat.push_back(TimeSample{s.primary, s.weight});
        if (s.complement.has_value() && s.complement->masked_count() > 0) {
            flat.push_back(TimeSample{
                *s.complement, time_weight(cfg.weight_schedule, x0.completion_len(),
                                           s.complement->masked_count())});
        }
    }
    Scalar loss{};
    if (cfg.objective == Objective::awelbo) {
        loss = awelbo_loss(shape, theta_params, x0, advantage, cfg.psi,
                           std::span<const TimeSample>(flat));
    } else {
        const RatioVariant variant =
            cfg.objective == Objective::pg_elbo ? RatioVariant::pg : RatioVariant::ppo;
        loss = pg_ppo_elbo_loss(shape, theta_params, old_policy, x0, advantage, cfg.epsilon,
                                variant, std::span<const TimeSample>(flat));
    }
    if (stats != nullptr) {
        stats->total = value_of(loss);
        stats->match = value_of(loss);
        stats->reg = 0.0;
    }
    return loss;
}

}  // namespace detail

inline std::vector<detail::CoupledSample> draw_time_masks(const TrainConfig& cfg,
                                                          const TokenSequence& x0,
                                                          int mask_id, RngStream& rng) {
    std::vector<detail::CoupledSample> samples;
    samples.reserve(static_cast<size_t>(cfg.mc_samples));
    for (int k = 0; k < cfg.mc_samples; ++k) {
        detail::CoupledSample s;
        const TimeSample drawn =
            sample_time_mask(x0, mask_id, cfg.masking, cfg.weight_schedule, rng);
        s.primary = drawn.xt;
        s.weight = drawn.weight;
        if (cfg.coupled_masks) {
            MaskedSequence comp;
            comp.tokens = x0.tokens;
            comp.prompt_len = x0.prompt_len;
            comp.t = 1.0 - s.primary.t;
            for (int n = x0.prompt_len; n < x0.length(); ++n) {
                if (!s.primary.is_masked(n)) {
                    comp.tokens[static_cast<size_t>(n)] = mask_id;
                    comp.masked_positions.push_back(n);
                }
            }
            s.complement = std::move(comp);
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

// One optimizer step over a batch of completed rollout groups: shared (t, mask)
// draws per completion, the configured loss with its time weights, gradient
// averaging across completions, norm clipping, and a plain SGD(+momentum) update.
// A non-finite loss or gradient aborts the step with the state unchanged.
inline StepMetrics train_step(TrainState& state, std::span<const RolloutGroup> groups,
                              const TrainConfig& cfg, RngStream& rng) {
    cfg.validate();
    const PolicyShape& shape = state.policies.theta.shape;
    const size_t dim = state.policies.theta.params.size();

    struct WorkItem {
        const TokenSequence* x0 = nullptr;
        double advantage = 0.0;
        std::vector<detail::CoupledSample> samples;
    };
    std::vector<WorkItem> work;
    double reward_sum = 0.0;
    int completion_count = 0;
    for (const RolloutGroup& group : groups) {
        for (size_t i = 0; i < group.completions.size(); ++i) {
            WorkItem item;
            item.x0 = &group.completions[i];
            item.advantage = group.records[i].advantage;
            RngStream mask_rng =
                rng.substream(static_cast<uint64_t>(work.size()));
            item.samples = draw_time_masks(cfg, *item.x0, shape.mask_id(), mask_rng);
            work.push_back(std::move(item));
            reward_sum += group.records[i].reward;
            ++completion_count;
        }
    }

    std::vector<GradVector> grads(work.size());
    std::vector<detail::LossStats> stats(work.size());
    std::vector<std::string> failures(work.size());
    parallel_for(static_cast<int>(work.size()), [&](int i) {
        const WorkItem& item = work[static_cast<size_t>(i)];
        try {
            grads[static_cast<size_t>(i)] = grad(
                [&](std::span<const Var> theta) {
                    return detail::completion_loss<Var>(
                        cfg, shape, theta, state.policies.old_policy, state.policies.ref,
                        *item.x0, item.advantage, item.samples, &stats[static_cast<size_t>(i)]);
                },
                std::span<const double>(state.policies.theta.params));
        } catch (const std::exception& e) {
            failures[static_cast<size_t>(i)] = e.what();
        }
    });
    for (const std::string& f : failures) {
        if (!f.empty()) {
            throw std::runtime_error("train_step aborted, state unchanged: " + f);
        }
    }

    GradVector g(dim, 0.0);
    detail::LossStats mean_stats;
    for (size_t i = 0; i < work.size(); ++i) {
        for (size_t d = 0; d < dim; ++d) {
            g[d] += grads[i][d];
        }
        mean_stats.total += stats[i].total;
        mean_stats.match += stats[i].match;
        mean_stats.reg += stats[i].reg;
    }
    const double inv = 1.0 / static_cast<double>(work.size());
    for (double& x : g) {
        x *= inv;
    }
    mean_stats.total *= inv;
    mean_stats.match *= inv;
    mean_stats.reg *= inv;

    double gnorm = norm2(g);
    if (!std::isfinite(gnorm)) {
        throw std::runtime_error("train_step aborted, state unchanged: non-finite gradient norm");
    }
    if (gnorm > cfg.max_grad_norm && gnorm > 0.0) {
        const double scale = cfg.max_grad_norm / gnorm;
        for (double& x : g) {
            x *= scale;
        }
        gnorm = cfg.max_grad_norm;
    }

    ParamVector next = state.policies.theta.params;
    for (size_t d = 0; d < dim; ++d) {
        state.momentum_buf[d] = cfg.momentum * state.momentum_buf[d] + g[d];
        next[d] -= cfg.learning_rate * state.momentum_buf[d];
    }
    check_params_finite(next, "train_step");
    state.policies.theta.params = std::move(next);
    state.step += 1;

    StepMetrics metrics;
    metrics.step = state.step;
    metrics.reward_mean = completion_count > 0 ? reward_sum / completion_count : 0.0;
    metrics.loss_total = mean_stats.total;
    metrics.loss_match = mean_stats.match;
    metrics.loss_reg = mean_stats.reg;
    metrics.grad_norm = gnorm;
    return metrics;
}

// pi_old <- pi_theta; only legal on steps divisible by mu.
inline void refresh_old(TrainState& state, const TrainConfig& cfg) {
    if (state.step % cfg.refresh_every != 0) {
        throw std::logic_error("refresh_old called off-schedule at step " +
                               std::to_string(state.step));
    }
    state.policies.old_policy.params = state.policies.theta.params;
}

using StepCallback = std::function<void(const StepMetrics&, const TrainState&)>;

inline std::vector<StepMetrics> run_training(const Task& task, const TrainConfig& cfg,
                                             const StepCallback& on_step = nullptr) {
    TrainState state = init_train_state(task, cfg);
    const DecodeSchedule sched = schedule_from_config(cfg, task.completion_len);
    RngStream master(cfg.seed);
    std::vector<StepMetrics> log;
    log.reserve(static_cast<size_t>(cfg.total_steps));
    for (int s = 1; s <= cfg.total_steps; ++s) {
        RngStream step_rng = master.substream(static_cast<uint64_t>(s));
        RngStream mask_rng = step_rng.substream(3);
        std::vector<RolloutGroup> batch;
        batch.reserve(static_cast<size_t>(cfg.prompts_per_step));
        for (int b = 0; b < cfg.prompts_per_step; ++b) {
            RngStream prompt_rng = step_rng.substream(10 + 3 * static_cast<uint64_t>(b));
            RngStream rollout_rng = step_rng.substream(11 + 3 * static_cast<uint64_t>(b));
            const TokenSequence prompt = sample_prompt(task, prompt_rng);
            batch.push_back(rollout_group(state, prompt, cfg.group_size, sched, rollout_rng));
        }
        StepMetrics metrics = train_step(state, batch, cfg, mask_rng);
        if (state.step % cfg.refresh_every == 0) {
            refresh_old(state, cfg);
            metrics.old_refresh = true;
        }
        if (on_step) {
            on_step(metrics, state);
        }
        log.push_back(metrics);
    }
    return log;
}

}  // namespace gdsd
