#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gdsd/decode.hpp"
#include "gdsd/mdm.hpp"
#include "gdsd/objectives.hpp"

namespace gdsd {

// ---------------------------------------------------------------------------
// enumerable instances
// ---------------------------------------------------------------------------

// Tiny world on which everything can be enumerated: tabular policies, V <= 4,
// completion length <= 4, full completion space of size V^completion_len.
struct EnumerableInstance {
    Vocabulary vocab;
    TokenSequence prompt;  // may be empty
    int completion_len = 2;
    PolicySet policies;
    std::vector<double> advantage;  // indexed by completion_index

    int seq_len() const { return prompt.length() + completion_len; }

    long long completion_count() const {
        long long c = 1;
        for (int i = 0; i < completion_len; ++i) {
            c *= vocab.size;
        }
        return c;
    }

    void validate() const {
        if (vocab.size > 4 || completion_len > 4 || completion_count() > 256) {
            throw std::invalid_argument("EnumerableInstance: too large to enumerate");
        }
        if (policies.theta.shape.family != PolicyFamily::tabular) {
            throw std::invalid_argument("EnumerableInstance: policies must be tabular");
        }
        if (static_cast<long long>(advantage.size()) != completion_count()) {
            throw std::invalid_argument("EnumerableInstance: advantage table size mismatch");
        }
    }

    // Index of a full token sequence by its completion region, base-V little endian.
    int completion_index(std::span<const int> tokens) const {
        long long idx = 0;
        long long stride = 1;
        for (int j = 0; j < completion_len; ++j) {
            idx += stride * tokens[static_cast<size_t>(prompt.length() + j)];
            stride *= vocab.size;
        }
        return static_cast<int>(idx);
    }

    TokenSequence completion_from_index(int idx) const {
        TokenSequence x0;
        x0.tokens = prompt.tokens;
        x0.prompt_len = prompt.length();
        for (int j = 0; j < completion_len; ++j) {
            x0.tokens.push_back(idx % vocab.size);
            idx /= vocab.size;
        }
        return x0;
    }

    AdvantageFn advantage_fn() const {
        return [this](std::span<const int> tokens) {
            return advantage[static_cast<size_t>(completion_index(tokens))];
        };
    }

    MaskedSequence fully_masked() const {
        MaskedSequence xt;
        xt.tokens = prompt.tokens;
        xt.tokens.resize(static_cast<size_t>(seq_len()), vocab.mask_id());
        xt.prompt_len = prompt.length();
        xt.t = 1.0;
        for (int j = 0; j < completion_len; ++j) {
            xt.masked_positions.push_back(prompt.length() + j);
        }
        return xt;
    }

    static EnumerableInstance random(int vocab_size, int completion_len, double logit_scale,
                                     double advantage_scale, RngStream& rng) {
        EnumerableInstance inst;
        inst.vocab = Vocabulary{vocab_size};
        inst.completion_len = completion_len;
        PolicyShape shape;
        shape.family = PolicyFamily::tabular;
        shape.vocab = vocab_size;
        shape.seq_len = completion_len;
        shape.prompt_len = 0;
        shape.validate();
        RngStream r_theta = rng.substream(1);
        RngStream r_old = rng.substream(2);
        RngStream r_ref = rng.substream(3);
        inst.policies.theta =
            PolicySnapshot{shape, init_params(shape, logit_scale, r_theta), false, PolicyTag::theta};
        inst.policies.old_policy = PolicySnapshot{shape, init_params(shape, logit_scale, r_old),
                                                  true, PolicyTag::old_policy};
        inst.policies.ref =
            PolicySnapshot{shape, init_params(shape, logit_scale, r_ref), true, PolicyTag::ref};
        RngStream r_adv = rng.substream(4);
        inst.advantage.resize(static_cast<size_t>(inst.completion_count()));
        for (double& a : inst.advantage) {
            a = advantage_scale * r_adv.next_gaussian();
        }
        inst.validate();
        return inst;
    }
};

// ---------------------------------------------------------------------------
// partition function and guided teacher
// ---------------------------------------------------------------------------

// Z_t(x_t) = sum over completions consistent with x_t of
//   p_old(x0|x_t)^(1-beta) * p_ref(x0|x_t)^beta * exp(psi * A(x0)).
inline double brute_force_partition(const EnumerableInstance& inst, const MaskedSequence& xt,
                                    double psi, double beta,
                                    const AdvantageFn* advantage_override = nullptr) {
    inst.validate();
    const DenoiserOutput oo = denoiser_logits(inst.policies.old_policy, xt);
    const DenoiserOutput ro = denoiser_logits(inst.policies.ref, xt);
    std::vector<double> terms;
    detail::for_each_consistent(xt, inst.vocab.size, [&](std::span<const int> tokens) {
        TokenSequence x0;
        x0.tokens.assign(tokens.begin(), tokens.end());
        x0.prompt_len = xt.prompt_len;
        const double lo = seq_log_prob(oo, x0);
        const double lr = seq_log_prob(ro, x0);
        const double a = advantage_override != nullptr
                             ? (*advantage_override)(tokens)
                             : inst.advantage[static_cast<size_t>(inst.completion_index(tokens))];
        terms.push_back((1.0 - beta) * lo + beta * lr + psi * a);
    });
    return std::exp(detail::log_sum_exp(terms));
}

// Normalised guided teacher on the completions consistent with x_t:
//   p*(x0|x_t) = p_old_ref(x0|x_t) * exp(psi A(x0) - A_t(x_t)),
// with p_old_ref the normalised geometric mixture and
//   A_t(x_t) = log E_{x0 ~ p_old_ref}[exp(psi A(x0))].
struct BruteForceTeacher {
    std::vector<int> completion_indices;  // into the instance's completion space
    std::vector<double> probs;
    double a_t = 0.0;
    double z_t = 0.0;

    double prob_of(int completion_index) const {
        for (size_t i = 0; i < completion_indices.size(); ++i) {
            if (completion_indices[i] == completion_index) {
                return probs[i];
            }
        }
        return 0.0;
    }
};

inline BruteForceTeacher brute_force_teacher(const EnumerableInstance& inst,
                                             const MaskedSequence& xt, double psi, double beta,
                                             const AdvantageFn* advantage_override = nullptr) {
    inst.validate();
    const DenoiserOutput oo = denoiser_logits(inst.policies.old_policy, xt);
    const DenoiserOutput ro = denoiser_logits(inst.policies.ref, xt);
    BruteForceTeacher teacher;
    std::vector<double> log_mix;
    std::vector<double> adv;
    detail::for_each_consistent(xt, inst.vocab.size, [&](std::span<const int> tokens) {
        TokenSequence x0;
        x0.tokens.assign(tokens.begin(), tokens.end());
        x0.prompt_len = xt.prompt_len;
        log_mix.push_back((1.0 - beta) * seq_log_prob(oo, x0) + beta * seq_log_prob(ro, x0));
        adv.push_back(advantage_override != nullptr
                          ? (*advantage_override)(tokens)
                          : inst.advantage[static_cast<size_t>(inst.completion_index(tokens))]);
        teacher.completion_indices.push_back(inst.completion_index(tokens));
    });
    const double mix_norm = detail::log_sum_exp(log_mix);
    std::vector<double> tilted(log_mix.size());
    for (size_t i = 0; i < tilted.size(); ++i) {
        tilted[i] = log_mix[i] - mix_norm + psi * adv[i];
    }
    teacher.a_t = detail::log_sum_exp(tilted);
    teacher.z_t = std::exp(teacher.a_t + mix_norm);
    teacher.probs.resize(tilted.size());
    for (size_t i = 0; i < tilted.size(); ++i) {
        teacher.probs[i] = std::exp(tilted[i] - teacher.a_t);
    }
    return teacher;
}

// ---------------------------------------------------------------------------
// exact likelihood and exact ELBO expectation
// ---------------------------------------------------------------------------

// Finest re-masking schedule: one position per step, random selection. Under it
// the sampler marginal is the mixture over unmasking orders.
inline DecodeSchedule finest_schedule(int completion_len, double temperature = 1.0) {
    return make_schedule(completion_len, completion_len, Selection::random_subset, 0, temperature);
}

// Exact log-probability of x0 under the schedule's re-masking sampler. The true
// sequence likelihood is intractable in general; on enumerable instances the
// sampler marginal is computable and serves as the reference value.
inline double exact_log_likelihood(const PolicySnapshot& policy, const TokenSequence& x0,
                                   const std::optional<DecodeSchedule>& sched = std::nullopt) {
    const DecodeSchedule s = sched.has_value() ? *sched : finest_schedule(x0.completion_len());
    return rm_exact_log_prob(policy, x0, s);
}

// Closed-form expectation of the Monte-Carlo ELBO estimator (rejection of empty
// masks included). Enumerates every mask subset with its exact draw weight.
template <class Scalar>
Scalar exact_elbo_expectation(const PolicyShape& shape, std::span<const Scalar> params,
                              const TokenSequence& x0, MaskMode mode,
                              WeightSchedule w = WeightSchedule::inv_t) {
    const int nc = x0.completion_len();
    if (nc > 8) {
        throw std::invalid_argument("exact_elbo_expectation: completion too long to enumerate");
    }
    Tape* tape = detail::tape_of(params);
    Scalar total = detail::make_scalar<Scalar>(0.0, tape);

    // log factorials up to nc
    std::vector<double> lfact(static_cast<size_t>(nc) + 1, 0.0);
    for (int i = 2; i <= nc; ++i) {
        lfact[static_cast<size_t>(i)] = lfact[static_cast<size_t>(i) - 1] + std::log(i);
    }

    for (unsigned mask_bits = 1; mask_bits < (1u << nc); ++mask_bits) {
        const int m = __builtin_popcount(mask_bits);
        double set_prob;  // probability of drawing exactly this masked set, post-rejection
        if (mode == MaskMode::exact_count) {
            // t ~ U(0,1), masked count round(t * nc), uniform set given the count
            const double p_m = m < nc ? (1.0 / nc) : (0.5 / nc);
            const double p_accept = 1.0 - 0.5 / nc;
            const double log_choose =
                lfact[static_cast<size_t>(nc)] - lfact[static_cast<size_t>(m)] -
                lfact[static_cast<size_t>(nc - m)];
            set_prob = p_m / p_accept * std::exp(-log_choose);
        } else {
            // Bernoulli(t) per position, t ~ U(0,1): P(set) = B(m+1, nc-m+1)
            const double log_beta = lfact[static_cast<size_t>(m)] +
                                    lfact[static_cast<size_t>(nc - m)] -
                                    lfact[static_cast<size_t>(nc)] - std::log(nc + 1.0);
            const double p_accept = static_cast<double>(nc) / (nc + 1.0);
            set_prob = std::exp(log_beta) / p_accept;
        }
        MaskedSequence xt;
        xt.tokens = x0.tokens;
        xt.prompt_len = x0.prompt_len;
        for (int j = 0; j < nc; ++j) {
            if (mask_bits & (1u << j)) {
                const int n = x0.prompt_len + j;
                xt.tokens[static_cast<size_t>(n)] = shape.mask_id();
                xt.masked_positions.push_back(n);
            }
        }
        xt.t = static_cast<double>(m) / nc;
        const DenoiserOutputT<Scalar> out = denoiser_logits(shape, params, xt, PolicyTag::theta);
        const double coeff = set_prob * time_weight(w, nc, m);
        total += seq_log_prob(out, x0) * coeff;
    }
    return total;
}

inline double exact_elbo_expectation(const PolicySnapshot& policy, const TokenSequence& x0,
                                     MaskMode mode, WeightSchedule w = WeightSchedule::inv_t) {
    return exact_elbo_expectation<double>(policy.shape, std::span<const double>(policy.params),
                                          x0, mode, w);
}

// ---------------------------------------------------------------------------
// training-inference mismatch report
// ---------------------------------------------------------------------------

struct TimRow {
    int completion_index = 0;
    double log_rm = 0.0;       // exact log pi^rm under the old policy
    double exact_ll = 0.0;     // same quantity, reported as the likelihood reference
    double elbo_mean = 0.0;    // Monte-Carlo ELBO estimates under the old policy
    double elbo_std = 0.0;
    double elbo_stderr = 0.0;
    double ratio_bias = 0.0;   // (ELBO_theta - ELBO_old) - (log rm_theta - log rm_old), exact
};

struct TimReport {
    std::vector<TimRow> rows;
    double mean_abs_ratio_bias = 0.0;
    int mc_samples = 0;
    int mc_k = 0;
};

// Per-completion comparison of the re-masking sampler log-probability, the ELBO
// estimates that stand in for it during training, and the resulting bias of the
// importance log-ratio between a perturbed theta and the old policy. ELBO draws
// use Bernoulli masking, under which the estimator mean provably lower-bounds the
// sampler log-probability for one-per-step random-selection schedules.
inline TimReport tim_report(const EnumerableInstance& inst, const DecodeSchedule& sched, int k,
                            int samples, RngStream& rng) {
    inst.validate();
    TimReport report;
    report.mc_samples = samples;
    report.mc_k = k;
    double abs_bias = 0.0;
    for (int idx = 0; idx < inst.completion_count(); ++idx) {
        const TokenSequence x0 = inst.completion_from_index(idx);
        TimRow row;
        row.completion_index = idx;
        row.log_rm = rm_exact_log_prob(inst.policies.old_policy, x0, sched);
        row.exact_ll = row.log_rm;

        RngStream mc = rng.substream(static_cast<uint64_t>(idx));
        double sum = 0.0;
        double sumsq = 0.0;
        for (int s = 0; s < samples; ++s) {
            const double e = elbo_estimate(inst.policies.old_policy, x0, k, WeightSchedule::inv_t,
                                           MaskMode::bernoulli, mc);
            sum += e;
            sumsq += e * e;
        }
        row.elbo_mean = sum / samples;
        const double var = std::fmax(0.0, sumsq / samples - row.elbo_mean * row.elbo_mean);
        row.elbo_std = std::sqrt(var);
        row.elbo_stderr = row.elbo_std / std::sqrt(static_cast<double>(samples));

        const double elbo_theta =
            exact_elbo_expectation(inst.policies.theta, x0, MaskMode::bernoulli);
        const double elbo_old =
            exact_elbo_expectation(inst.policies.old_policy, x0, MaskMode::bernoulli);
        const double rm_theta = rm_exact_log_prob(inst.policies.theta, x0, sched);
        row.ratio_bias = (elbo_theta - elbo_old) - (rm_theta - row.log_rm);
        abs_bias += std::fabs(row.ratio_bias);
        report.rows.push_back(row);
    }
    report.mean_abs_ratio_bias = abs_bias / static_cast<double>(report.rows.size());
    return report;
}

// ---------------------------------------------------------------------------
// forward-KL distillation vs advantage-weighted ELBO (gradient proportionality)
// ---------------------------------------------------------------------------

struct GradientPair {
    GradVector forward_kl;
    GradVector aw_elbo;
    double cosine = 0.0;
};

// Both sides with exact expectations on an enumerable instance. The teacher
// distribution over completions is the brute-force guided teacher at the fully
// masked context; masked states are reached by forward-masking its samples, and
// the distillation target at each state is the teacher's posterior there. The
// advantage-weighted side reweights the exact ELBO expectation of each completion
// by exp(psi * A) under the old/ref geometric mixture. Their theta-gradients are
// proportional, so the cosine similarity is the acceptance quantity.
inline GradientPair prop_forward_kl_aw_elbo_gradients(const EnumerableInstance& inst, double psi,
                                                      double beta) {
    inst.validate();
    const MaskedSequence x_full = inst.fully_masked();
    const BruteForceTeacher teacher = brute_force_teacher(inst, x_full, psi, beta);
    const int nc = inst.completion_len;
    const long long n_comp = inst.completion_count();

    // base mixture weights at the fully masked context (normalised)
    const DenoiserOutput oo = denoiser_logits(inst.policies.old_policy, x_full);
    const DenoiserOutput ro = denoiser_logits(inst.policies.ref, x_full);
    std::vector<double> log_mix(static_cast<size_t>(n_comp));
    for (int idx = 0; idx < n_comp; ++idx) {
        const TokenSequence x0 = inst.completion_from_index(idx);
        log_mix[static_cast<size_t>(idx)] =
            (1.0 - beta) * seq_log_prob(oo, x0) + beta * seq_log_prob(ro, x0);
    }
    const double mix_norm = detail::log_sum_exp(log_mix);

    std::vector<double> lfact(static_cast<size_t>(nc) + 1, 0.0);
    for (int i = 2; i <= nc; ++i) {
        lfact[static_cast<size_t>(i)] = lfact[static_cast<size_t>(i) - 1] + std::log(i);
    }
    // shared per-mask-set weight: the Bernoulli-masking draw probability
    const auto set_weight = [&](int m) {
        const double log_beta = lfact[static_cast<size_t>(m)] + lfact[static_cast<size_t>(nc - m)] -
                                lfact[static_cast<size_t>(nc)] - std::log(nc + 1.0);
        const double p_accept = static_cast<double>(nc) / (nc + 1.0);
        return std::exp(log_beta) / p_accept * time_weight(WeightSchedule::inv_t, nc, m);
    };

    const PolicyShape& shape = inst.policies.theta.shape;

    const auto forward_kl_loss = [&](std::span<const Var> params) -> Var {
        Tape* tape = params[0].tape();
        Var total(tape, tape->add_leaf(0.0, "zero"));
        for (unsigned bits = 1; bits < (1u << nc); ++bits) {
            const int m = __builtin_popcount(bits);
            const double w = set_weight(m);
            // group completions by the masked state they induce under this mask set,
            // so each state's denoiser call is made once
            std::vector<long long> state_key(static_cast<size_t>(n_comp), 0);
            for (int idx = 0; idx < n_comp; ++idx) {
                long long key = 0;
                long long stride = 1;
                const TokenSequence x0 = inst.completion_from_index(idx);
                for (int j = 0; j < nc; ++j) {
                    const int tok = (bits & (1u << j))
                                        ? inst.vocab.mask_id()
                                        : x0.tokens[static_cast<size_t>(inst.prompt.length() + j)];
                    key += stride * tok;
                    stride *= inst.vocab.size + 1;
                }
                state_key[static_cast<size_t>(idx)] = key;
            }
            std::vector<int> order(static_cast<size_t>(n_comp));
            for (int i = 0; i < n_comp; ++i) {
                order[static_cast<size_t>(i)] = i;
            }
            std::sort(order.begin(), order.end(), [&](int a, int b) {
                return state_key[static_cast<size_t>(a)] < state_key[static_cast<size_t>(b)];
            });
            size_t i = 0;
            while (i < order.size()) {
                size_t j = i;
                while (j < order.size() && state_key[static_cast<size_t>(order[j])] ==
                                               state_key[static_cast<size_t>(order[i])]) {
                    ++j;
                }
                // weight of completion x0 inside its state is P(x_t) * posterior(x0 | x_t),
                // which telescopes back to the teacher probability of x0 itself
                double p_state = 0.0;
                for (size_t q = i; q < j; ++q) {
                    p_state += teacher.probs[static_cast<size_t>(order[q])];
                }
                if (p_state > 0.0) {
                    const TokenSequence rep = inst.completion_from_index(order[i]);
                    MaskedSequence xt;
                    xt.tokens = rep.tokens;
                    xt.prompt_len = rep.prompt_len;
                    for (int jj = 0; jj < nc; ++jj) {
                        if (bits & (1u << jj)) {
                            const int n = rep.prompt_len + jj;
                            xt.tokens[static_cast<size_t>(n)] = inst.vocab.mask_id();
                            xt.masked_positions.push_back(n);
                        }
                    }
                    xt.t = static_cast<double>(m) / nc;
                    const DenoiserOutputT<Var> out =
                        denoiser_logits<Var>(shape, params, xt, PolicyTag::theta);
                    for (size_t q = i; q < j; ++q) {
                        const double post = teacher.probs[static_cast<size_t>(order[q])];
                        if (post == 0.0) {
                            continue;
                        }
                        const TokenSequence x0 = inst.completion_from_index(order[q]);
                        total += seq_log_prob(out, x0) * (-w * post);
                    }
                }
                i = j;
            }
        }
        return total;
    };

    const auto aw_elbo_loss = [&](std::span<const Var> params) -> Var {
        Tape* tape = params[0].tape();
        Var total(tape, tape->add_leaf(0.0, "zero"));
        for (int idx = 0; idx < n_comp; ++idx) {
            const TokenSequence x0 = inst.completion_from_index(idx);
            const double base = std::exp(log_mix[static_cast<size_t>(idx)] - mix_norm);
            const double weight =
                base * std::exp(psi * inst.advantage[static_cast<size_t>(idx)]);
            const Var elbo = exact_elbo_expectation<Var>(shape, params, x0, MaskMode::bernoulli);
            total += elbo * (-weight);
        }
        return total;
    };

    GradientPair pair;
    pair.forward_kl = grad(forward_kl_loss, std::span<const double>(inst.policies.theta.params));
    pair.aw_elbo = grad(aw_elbo_loss, std::span<const double>(inst.policies.theta.params));
    pair.cosine = cosine_similarity(pair.forward_kl, pair.aw_elbo);
    return pair;
}

// ---------------------------------------------------------------------------
// closed-form optimality spot check
// ---------------------------------------------------------------------------

struct OptimalityCheck {
    double objective_at_teacher = 0.0;
    double objective_at_optimum = 0.0;  // numeric ascent over the simplex
    double gap() const { return objective_at_optimum - objective_at_teacher; }
};

// The guided teacher maximises
//   J(p) = E_p[psi A] - (1-beta) KL(p || p_old(.|x_t)) - beta KL(p || p_ref(.|x_t))
// over distributions on the completions consistent with x_t. Verified against
// exponentiated-gradient ascent on the simplex.
inline OptimalityCheck lemma_optimality_check(const EnumerableInstance& inst,
                                              const MaskedSequence& xt, double psi, double beta,
                                              int iterations = 4000, double step = 0.5) {
    inst.validate();
    const DenoiserOutput oo = denoiser_logits(inst.policies.old_policy, xt);
    const DenoiserOutput ro = denoiser_logits(inst.policies.ref, xt);
    std::vector<double> log_old;
    std::vector<double> log_ref;
    std::vector<double> adv;
    detail::for_each_consistent(xt, inst.vocab.size, [&](std::span<const int> tokens) {
        TokenSequence x0;
        x0.tokens.assign(tokens.begin(), tokens.end());
        x0.prompt_len = xt.prompt_len;
        log_old.push_back(seq_log_prob(oo, x0));
        log_ref.push_back(seq_log_prob(ro, x0));
        adv.push_back(inst.advantage[static_cast<size_t>(inst.completion_index(tokens))]);
    });
    const size_t n = adv.size();
    const auto objective = [&](const std::vector<double>& p) {
        double j = 0.0;
        for (size_t i = 0; i < n; ++i) {
            if (p[i] <= 0.0) {
                continue;
            }
            j += p[i] * (psi * adv[i] - (1.0 - beta) * (std::log(p[i]) - log_old[i]) -
                         beta * (std::log(p[i]) - log_ref[i]));
        }
        return j;
    };

    const BruteForceTeacher teacher = brute_force_teacher(inst, xt, psi, beta);
    OptimalityCheck check;
    check.objective_at_teacher = objective(teacher.probs);

    std::vector<double> p(n, 1.0 / static_cast<double>(n));
    for (int it = 0; it < iterations; ++it) {
        std::vector<double> g(n);
        for (size_t i = 0; i < n; ++i) {
            g[i] = psi * adv[i] - (1.0 - beta) * (std::log(p[i]) - log_old[i]) -
                   beta * (std::log(p[i]) - log_ref[i]) - 1.0;
        }
        double hi = -1e300;
        for (size_t i = 0; i < n; ++i) {
            g[i] = std::log(p[i]) + step * g[i];
            hi = std::fmax(hi, g[i]);
        }
        double tot = 0.0;
        for (size_t i = 0; i < n; ++i) {
            p[i] = std::exp(g[i] - hi);
            tot += p[i];
        }
        for (double& x : p) {
            x /= tot;
        }
    }
    check.objective_at_optimum = objective(p);
    return check;
}

}  // namespace gdsd
