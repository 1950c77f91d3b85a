#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "gdsd/oracles.hpp"
#include "gdsd/trainer.hpp"

namespace gdsd {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

namespace verify {

inline std::vector<double> softmax_of(std::span<const double> logits) {
    const double norm = detail::log_sum_exp(logits);
    std::vector<double> p(logits.size());
    for (size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - norm);
    }
    return p;
}

inline std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3g", x);
    return buf;
}

// Teacher targets (both modes), sequence-summed and softmaxed over the completion
// space, must reproduce the brute-force guided teacher.
inline CheckResult check_teacher_correctness(int instances = 50, double tol = 1e-10) {
    const double psis[] = {0.0, 1.0, 10.0};
    const double betas[] = {0.0, 0.1, 1.0};
    double worst = 0.0;
    RngStream rng(0xBEEF0001);
    for (int trial = 0; trial < instances; ++trial) {
        RngStream sub = rng.substream(static_cast<uint64_t>(trial));
        const EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.0, 1.0, sub);
        const double psi = psis[trial % 3];
        const double beta = betas[(trial / 3) % 3];
        const MaskedSequence xt = inst.fully_masked();
        const BruteForceTeacher oracle = brute_force_teacher(inst, xt, psi, beta);
        const DenoiserOutput oo = denoiser_logits(inst.policies.old_policy, xt);
        const DenoiserOutput ro = denoiser_logits(inst.policies.ref, xt);
        for (TeacherMode mode : {TeacherMode::direct, TeacherMode::tlc}) {
            std::vector<double> seq_targets;
            for (int idx = 0; idx < inst.completion_count(); ++idx) {
                const TokenSequence x0 = inst.completion_from_index(idx);
                const TeacherTarget target = teacher_logits(
                    oo, ro, inst.advantage[static_cast<size_t>(idx)], psi, beta, mode);
                double sum = 0.0;
                for (size_t j = 0; j < target.positions.size(); ++j) {
                    const int n = target.positions[j];
                    sum += target.target_logits[j]
                                               [static_cast<size_t>(x0.tokens[static_cast<size_t>(n)])];
                }
                seq_targets.push_back(sum);
            }
            const std::vector<double> probs = softmax_of(seq_targets);
            for (size_t i = 0; i < probs.size(); ++i) {
                worst = std::fmax(worst, std::fabs(probs[i] - oracle.probs[i]));
            }
        }
    }
    return CheckResult{"teacher correctness (direct and tlc vs brute force)", worst < tol,
                       "max abs probability error " + fmt(worst)};
}

// Token-level centralization of the sequence sum vs sequence-level centralization
// computed over the whole completion space.
inline CheckResult check_tlc_equivalence(int instances = 50, double tol = 1e-10) {
    double worst = 0.0;
    RngStream rng(0xBEEF0002);
    for (int trial = 0; trial < instances; ++trial) {
        RngStream sub = rng.substream(static_cast<uint64_t>(trial));
        const EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.0, 1.0, sub);
        const MaskedSequence xt = inst.fully_masked();
        const DenoiserOutput out = denoiser_logits(inst.policies.old_policy, xt);

        double mean_seq = 0.0;
        std::vector<double> raw_sums;
        for (int idx = 0; idx < inst.completion_count(); ++idx) {
            const TokenSequence x0 = inst.completion_from_index(idx);
            double s = 0.0;
            for (int n : out.masked_positions) {
                s += out.row(n)[static_cast<size_t>(x0.tokens[static_cast<size_t>(n)])];
            }
            raw_sums.push_back(s);
            mean_seq += s;
        }
        mean_seq /= static_cast<double>(raw_sums.size());

        for (int idx = 0; idx < inst.completion_count(); ++idx) {
            const TokenSequence x0 = inst.completion_from_index(idx);
            double token_level = 0.0;
            for (int n : out.masked_positions) {
                const std::vector<double> c = tlc_row(out.row(n));
                token_level += c[static_cast<size_t>(x0.tokens[static_cast<size_t>(n)])];
            }
            const double seq_level = raw_sums[static_cast<size_t>(idx)] - mean_seq;
            worst = std::fmax(worst, std::fabs(token_level - seq_level));
        }
    }
    return CheckResult{"token-level centralization equals sequence-level", worst < tol,
                       "max abs difference " + fmt(worst)};
}

// Forward-KL distillation gradient vs advantage-weighted exact-ELBO gradient.
inline CheckResult check_forward_kl_aw_elbo(int instances = 20, double min_cos = 0.999) {
    double worst = 1.0;
    RngStream rng(0xBEEF0003);
    const double psis[] = {1.0, 5.0, 10.0};
    const double betas[] = {0.0, 0.1};
    for (int trial = 0; trial < instances; ++trial) {
        RngStream sub = rng.substream(static_cast<uint64_t>(trial));
        const EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.0, 0.5, sub);
        const GradientPair pair = prop_forward_kl_aw_elbo_gradients(
            inst, psis[trial % 3], betas[trial % 2]);
        worst = std::fmin(worst, pair.cosine);
    }
    return CheckResult{"forward-KL distillation matches advantage-weighted ELBO gradient",
                       worst > min_cos, "min gradient cosine " + fmt(worst)};
}

// Direct reverse KL vs its reward + baseline + regularization decomposition.
inline CheckResult check_reverse_kl_decomposition(int instances = 20, double tol = 1e-10) {
    double worst = 0.0;
    RngStream rng(0xBEEF0004);
    const double psis[] = {0.0, 1.0, 10.0};
    const double betas[] = {0.0, 0.1, 0.5};
    for (int trial = 0; trial < instances; ++trial) {
        RngStream sub = rng.substream(static_cast<uint64_t>(trial));
        const EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.0, 1.0, sub);
        const AdvantageFn adv = inst.advantage_fn();
        std::vector<MaskedSequence> states{inst.fully_masked()};
        {
            // one partially masked state as well
            const TokenSequence x0 = inst.completion_from_index(
                static_cast<int>(sub.next_int(static_cast<int>(inst.completion_count()))));
            RngStream mask_rng = sub.substream(99);
            states.push_back(forward_mask(x0, inst.vocab.mask_id(), 0.5, mask_rng));
        }
        for (const MaskedSequence& xt : states) {
            if (xt.masked_count() == 0) {
                continue;
            }
            const ReverseKlDecomposition d = reverse_kl_decomposition(
                inst.policies.theta, inst.policies.old_policy, inst.policies.ref, adv,
                psis[trial % 3], betas[trial % 3], xt);
            worst = std::fmax(worst, std::fabs(d.direct_kl - d.decomposition_sum()));
        }
    }
    return CheckResult{"reverse-KL equals its three-term decomposition", worst < tol,
                       "max abs identity gap " + fmt(worst)};
}

struct GradCheckOutcome {
    double max_rel = 0.0;
    double min_cos = 1.0;
    int points = 0;
};

// Reverse-mode vs central finite differences for one loss builder. The builder
// receives the parameter span (templated scalar) and must be deterministic.
template <class LossBuilder>
void grad_check_loss(const ParamVector& at, LossBuilder&& builder, GradCheckOutcome& outcome,
                     double fd_step = 1e-5) {
    const GradVector exact = grad(
        [&](std::span<const Var> p) { return builder(p); }, std::span<const double>(at));
    const GradVector approx = fd_grad(
        [&](std::span<const double> p) { return builder(p); }, std::span<const double>(at),
        fd_step);
    outcome.max_rel = std::fmax(outcome.max_rel, max_relative_error(exact, approx));
    outcome.min_cos = std::fmin(outcome.min_cos, cosine_similarity(exact, approx));
    outcome.points += 1;
}

// Every objective's gradient against the finite-difference oracle.
inline CheckResult check_gradient_integrity(int points_per_loss = 20, double tol = 1e-4,
                                            double min_cos = 0.9999) {
    GradCheckOutcome outcome;
    RngStream rng(0xBEEF0005);

    const Objective objectives[] = {Objective::gdsd_direct, Objective::gdsd_tlc,
                                    Objective::awelbo, Objective::pg_elbo, Objective::ppo_elbo};
    for (Objective objective : objectives) {
        for (int point = 0; point < points_per_loss; ++point) {
            RngStream sub = rng.substream(static_cast<uint64_t>(point) * 16 +
                                          static_cast<uint64_t>(objective));
            for (int attempt = 0;; ++attempt) {
                RngStream inst_rng = sub.substream(static_cast<uint64_t>(attempt));
                const EnumerableInstance inst =
                    EnumerableInstance::random(3, 2, 1.0, 0.5, inst_rng);
                const int idx = inst_rng.next_int(static_cast<int>(inst.completion_count()));
                const TokenSequence x0 = inst.completion_from_index(idx);
                const double advantage = inst.advantage[static_cast<size_t>(idx)];

                TrainConfig cfg;
                cfg.objective = objective;
                cfg.psi = 3.0;
                cfg.beta = 0.1;
                cfg.epsilon = 0.2;
                cfg.mc_samples = 2;
                cfg.coupled_masks = point % 2 == 0;
                cfg.weight_schedule = WeightSchedule::inv_t;
                cfg.masking = MaskMode::exact_count;

                RngStream mask_rng = inst_rng.substream(7);
                const std::vector<detail::CoupledSample> samples =
                    draw_time_masks(cfg, x0, inst.vocab.mask_id(), mask_rng);

                if (objective == Objective::ppo_elbo) {
                    // the clip kink is not differentiable; skip draws that sit on it
                    bool near_kink = false;
                    const PolicySnapshot& old_policy = inst.policies.old_policy;
                    for (const detail::CoupledSample& s : samples) {
                        for (const MaskedSequence* xt :
                             {&s.primary, s.complement.has_value() ? &*s.complement : nullptr}) {
                            if (xt == nullptr || xt->masked_count() == 0) {
                                continue;
                            }
                            const DenoiserOutput to = denoiser_logits(inst.policies.theta, *xt);
                            const DenoiserOutput oo = denoiser_logits(old_policy, *xt);
                            for (int n : xt->masked_positions) {
                                const int tok = x0.tokens[static_cast<size_t>(n)];
                                const double lt = log_softmax(to.row(n))[static_cast<size_t>(tok)];
                                const double lo = log_softmax(oo.row(n))[static_cast<size_t>(tok)];
                                const double ratio = std::exp(lt - lo);
                                if (std::fabs(ratio - (1.0 - cfg.epsilon)) < 1e-3 ||
                                    std::fabs(ratio - (1.0 + cfg.epsilon)) < 1e-3) {
                                    near_kink = true;
                                }
                            }
                        }
                    }
                    if (near_kink) {
                        continue;
                    }
                }

                grad_check_loss(inst.policies.theta.params, [&]<class S>(std::span<const S> p) {
                    return detail::completion_loss<S>(cfg, inst.policies.theta.shape, p,
                                                      inst.policies.old_policy,
                                                      inst.policies.ref, x0, advantage,
                                                      samples, nullptr);
                }, outcome);
                break;
            }
        }
    }

    // the mlp family (the one that trains) under the gdsd losses
    for (int point = 0; point < points_per_loss; ++point) {
        RngStream sub = rng.substream(0x900D + static_cast<uint64_t>(point));
        PolicyShape shape;
        shape.family = PolicyFamily::mlp;
        shape.vocab = 4;
        shape.seq_len = 6;
        shape.prompt_len = 2;
        shape.hidden = 8;
        RngStream init_rng = sub.substream(0);
        PolicySet policies = make_policy_set(shape, init_params(shape, 0.5, init_rng));
        RngStream perturb = sub.substream(1);
        for (double& v : policies.theta.params) {
            v += 0.05 * perturb.next_gaussian();
        }
        TokenSequence x0;
        RngStream tok_rng = sub.substream(2);
        for (int n = 0; n < shape.seq_len; ++n) {
            x0.tokens.push_back(tok_rng.next_int(shape.vocab));
        }
        x0.prompt_len = shape.prompt_len;

        TrainConfig cfg;
        cfg.objective = point % 2 == 0 ? Objective::gdsd_tlc : Objective::gdsd_direct;
        cfg.psi = 3.0;
        cfg.beta = 0.05;
        cfg.mc_samples = 2;
        cfg.coupled_masks = true;
        RngStream mask_rng = sub.substream(3);
        const std::vector<detail::CoupledSample> samples =
            draw_time_masks(cfg, x0, shape.mask_id(), mask_rng);
        grad_check_loss(policies.theta.params, [&]<class S>(std::span<const S> p) {
            return detail::completion_loss<S>(cfg, shape, p, policies.old_policy, policies.ref,
                                              x0, 0.7, samples, nullptr);
        }, outcome);
    }

    const bool pass = outcome.max_rel < tol && outcome.min_cos > min_cos;
    return CheckResult{"gradient integrity (all objectives vs finite differences)", pass,
                       "max relative error " + fmt(outcome.max_rel) + ", min cosine " +
                           fmt(outcome.min_cos) + " over " + std::to_string(outcome.points) +
                           " points"};
}

// Mean Monte-Carlo ELBO must stay below the exact sampler log-likelihood (up to
// Monte-Carlo error). Bernoulli masking with realized-fraction weights makes the
// estimator mean the order-averaged log-likelihood, which Jensen bounds by the
// one-per-step random sampler's marginal.
inline CheckResult check_elbo_lower_bound(int policies = 10, int draws = 10000) {
    RngStream rng(0xBEEF0006);
    double worst_margin = 1e300;
    for (int trial = 0; trial < policies; ++trial) {
        RngStream sub = rng.substream(static_cast<uint64_t>(trial));
        const int vocab = trial % 2 == 0 ? 2 : 3;
        const EnumerableInstance inst = EnumerableInstance::random(vocab, 2, 0.5, 0.0, sub);
        const DecodeSchedule sched = finest_schedule(inst.completion_len);
        for (int idx = 0; idx < inst.completion_count(); ++idx) {
            const TokenSequence x0 = inst.completion_from_index(idx);
            const double exact = rm_exact_log_prob(inst.policies.old_policy, x0, sched);
            RngStream mc = sub.substream(1000 + static_cast<uint64_t>(idx));
            double sum = 0.0;
            double sumsq = 0.0;
            for (int s = 0; s < draws; ++s) {
                const double e = elbo_estimate(inst.policies.old_policy, x0, 1,
                                               WeightSchedule::inv_t, MaskMode::bernoulli, mc);
                sum += e;
                sumsq += e * e;
            }
            const double mean = sum / draws;
            const double var = std::fmax(0.0, sumsq / draws - mean * mean);
            const double stderr_ = std::sqrt(var / draws);
            worst_margin = std::fmin(worst_margin, (exact - mean) + 3.0 * stderr_);
        }
    }
    return CheckResult{"ELBO estimates lower-bound the exact sampler log-likelihood",
                       worst_margin >= 0.0, "worst (exact - mean + 3 se) " + fmt(worst_margin)};
}

// Empirical decode distribution vs the enumerated sampler distribution.
inline CheckResult check_sampler_exactness(int rollouts = 100000, double tol = 0.01) {
    RngStream rng(0xBEEF0007);
    RngStream inst_rng = rng.substream(0);
    const EnumerableInstance inst = EnumerableInstance::random(2, 2, 1.0, 0.0, inst_rng);
    const DecodeSchedule sched = make_schedule(2, 2, Selection::random_subset, 0, 1.0);
    std::vector<double> exact(static_cast<size_t>(inst.completion_count()));
    double norm = 0.0;
    for (int idx = 0; idx < inst.completion_count(); ++idx) {
        exact[static_cast<size_t>(idx)] = std::exp(
            rm_exact_log_prob(inst.policies.old_policy, inst.completion_from_index(idx), sched));
        norm += exact[static_cast<size_t>(idx)];
    }
    std::vector<double> counts(exact.size(), 0.0);
    RngStream decode_rng = rng.substream(1);
    for (int r = 0; r < rollouts; ++r) {
        RngStream one = decode_rng.substream(static_cast<uint64_t>(r));
        const Rollout rollout = decode(inst.policies.old_policy, inst.prompt, sched, one);
        counts[static_cast<size_t>(inst.completion_index(rollout.completion.tokens))] += 1.0;
    }
    double tv = 0.0;
    for (size_t i = 0; i < exact.size(); ++i) {
        tv += std::fabs(counts[i] / rollouts - exact[i]);
    }
    tv *= 0.5;
    const bool normalized = std::fabs(norm - 1.0) < 1e-10;
    return CheckResult{"decode matches the enumerated sampler distribution",
                       tv < tol && normalized,
                       "total variation " + fmt(tv) + ", enumeration mass " + fmt(norm)};
}

// Deterministic perturbed-theta fixture for the importance-ratio bias.
inline EnumerableInstance make_tim_fixture(double noise = 0.1) {
    RngStream rng(0x71313370);
    EnumerableInstance inst = EnumerableInstance::random(2, 2, 1.0, 0.0, rng);
    inst.policies.ref.params = inst.policies.old_policy.params;
    inst.policies.theta.params = inst.policies.old_policy.params;
    RngStream perturb = rng.substream(0xF1);
    for (double& v : inst.policies.theta.params) {
        v += noise * perturb.next_gaussian();
    }
    return inst;
}

// Frozen mean absolute importance-log-ratio bias of the fixture; regenerate with
// tools/gdsd_lab tim on the default fixture if the fixture construction changes.
constexpr double kTimFixtureBias = 0.0;  // placeholder until frozen

inline CheckResult check_tim_bias(double frozen_value, double tol = 1e-9) {
    const EnumerableInstance inst = make_tim_fixture();
    const DecodeSchedule sched = finest_schedule(inst.completion_len);
    RngStream rng(0xBEEF0008);
    const TimReport report = tim_report(inst, sched, 2, 2000, rng);
    bool rows_ok = true;
    for (const TimRow& row : report.rows) {
        if (row.elbo_mean > row.exact_ll + 3.0 * row.elbo_stderr) {
            rows_ok = false;
        }
    }
    const bool pass = report.mean_abs_ratio_bias > 0.0 &&
                      std::fabs(report.mean_abs_ratio_bias - frozen_value) < tol && rows_ok;
    return CheckResult{"importance-ratio bias exists and matches the frozen fixture", pass,
                       "mean abs bias " + fmt(report.mean_abs_ratio_bias) + " vs frozen " +
                           fmt(frozen_value)};
}

// Guided-teacher mass on the best-advantage completion grows with psi.
inline CheckResult check_psi_monotonicity(int instances = 20) {
    RngStream rng(0xBEEF0009);
    bool pass = true;
    double worst_gap = 1e300;
    for (int trial = 0; trial < instances; ++trial) {
        RngStream sub = rng.substream(static_cast<uint64_t>(trial));
        const EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.0, 1.0, sub);
        int best = 0;
        for (int idx = 1; idx < inst.completion_count(); ++idx) {
            if (inst.advantage[static_cast<size_t>(idx)] >
                inst.advantage[static_cast<size_t>(best)]) {
                best = idx;
            }
        }
        const MaskedSequence xt = inst.fully_masked();
        double prev = -1.0;
        for (double psi : {0.0, 1.0, 5.0, 10.0}) {
            const BruteForceTeacher teacher = brute_force_teacher(inst, xt, psi, 0.1);
            const double mass = teacher.probs[static_cast<size_t>(best)];
            if (!(mass > prev)) {
                pass = false;
            }
            worst_gap = std::fmin(worst_gap, mass - prev);
            prev = mass;
        }
    }
    return CheckResult{"teacher mass on the argmax-advantage completion increases with psi", pass,
                       "min successive gain " + fmt(worst_gap)};
}

inline std::vector<CheckResult> run_oracle_suite(double tim_frozen_value) {
    std::vector<CheckResult> results;
    results.push_back(check_teacher_correctness());
    results.push_back(check_tlc_equivalence());
    results.push_back(check_forward_kl_aw_elbo());
    results.push_back(check_reverse_kl_decomposition());
    results.push_back(check_gradient_integrity());
    results.push_back(check_elbo_lower_bound());
    results.push_back(check_sampler_exactness());
    results.push_back(check_tim_bias(tim_frozen_value));
    results.push_back(check_psi_monotonicity());
    return results;
}

}  // namespace verify
}  // namespace gdsd
