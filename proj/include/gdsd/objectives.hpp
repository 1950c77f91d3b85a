#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gdsd/mdm.hpp"

namespace gdsd {

// ---------------------------------------------------------------------------
// group advantages
// ---------------------------------------------------------------------------

struct AdvantageRecord {
    double reward = 0.0;
    double advantage = 0.0;
    int group_id = 0;
};

// A_i = r_i - mean(r); no standard-deviation scaling.
inline std::vector<AdvantageRecord> compute_advantages(std::span<const double> rewards,
                                                       int group_id = 0) {
    if (rewards.size() < 2) {
        throw std::invalid_argument("compute_advantages: group size must be >= 2");
    }
    double mean = 0.0;
    for (double r : rewards) {
        mean += r;
    }
    mean /= static_cast<double>(rewards.size());
    std::vector<AdvantageRecord> out;
    out.reserve(rewards.size());
    for (double r : rewards) {
        out.push_back(AdvantageRecord{r, r - mean, group_id});
    }
    return out;
}

// ---------------------------------------------------------------------------
// token-level logit centralization
// ---------------------------------------------------------------------------

// Subtract each row's mean over the vocabulary. Idempotent, and shift-invariant:
// tlc(row + c) == tlc(row).
template <class Scalar>
std::vector<Scalar> tlc_row(std::span<const Scalar> row) {
    Scalar mean = row[0];
    for (size_t v = 1; v < row.size(); ++v) {
        mean += row[v];
    }
    mean = mean * (1.0 / static_cast<double>(row.size()));
    std::vector<Scalar> out;
    out.reserve(row.size());
    for (const Scalar& x : row) {
        out.push_back(x - mean);
    }
    return out;
}

template <class Scalar>
DenoiserOutputT<Scalar> tlc(const DenoiserOutputT<Scalar>& out) {
    DenoiserOutputT<Scalar> res = out;
    for (int n = 0; n < out.seq_len; ++n) {
        const std::vector<Scalar> c = tlc_row(out.row(n));
        for (int v = 0; v < out.vocab; ++v) {
            res.row(n)[static_cast<size_t>(v)] = c[static_cast<size_t>(v)];
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// guided teacher targets
// ---------------------------------------------------------------------------

enum class TeacherMode { direct, tlc };

inline const char* to_string(TeacherMode m) {
    return m == TeacherMode::direct ? "direct" : "tlc";
}

// Unnormalised per-position teacher logits over the vocabulary, for the masked
// positions of the producing sequence (in the order of masked_positions).
struct TeacherTarget {
    std::vector<std::vector<double>> target_logits;
    std::vector<int> positions;
    TeacherMode mode = TeacherMode::direct;
    double psi = 0.0;
    double beta = 0.0;
};

namespace detail {

inline void require_same_masks(const std::vector<int>& a, const std::vector<int>& b,
                               const char* who) {
    if (a != b) {
        throw std::invalid_argument(std::string(who) +
                                    ": outputs were produced on different masked sequences");
    }
}

// Per-position log-softmax rows, centralized when mode is tlc. Centralizing the
// log-softmax equals centralizing the raw logits, so either input convention works.
template <class Scalar>
std::vector<Scalar> teacher_basis_row(std::span<const Scalar> raw, TeacherMode mode) {
    std::vector<Scalar> ls = log_softmax(raw);
    if (mode == TeacherMode::tlc) {
        return tlc_row(std::span<const Scalar>(ls));
    }
    return ls;
}

}  // namespace detail

// Guided teacher: per masked position n and token v,
//   target[n][v] = (1-beta) l_old[n][v] + beta l_ref[n][v] + psi * A / M,
// with l the (optionally centralized) log-softmax rows and M the number of masked
// positions, so the sequence-summed target shifts by exactly psi * A.
inline TeacherTarget teacher_logits(const DenoiserOutput& old_out, const DenoiserOutput& ref_out,
                                    double advantage, double psi, double beta, TeacherMode mode) {
    if (!(beta >= 0.0 && beta <= 1.0)) {
        throw std::invalid_argument("teacher_logits: beta must lie in [0, 1]");
    }
    if (psi < 0.0) {
        throw std::invalid_argument("teacher_logits: psi must be >= 0");
    }
    detail::require_same_masks(old_out.masked_positions, ref_out.masked_positions,
                               "teacher_logits");
    TeacherTarget target;
    target.positions = old_out.masked_positions;
    target.mode = mode;
    target.psi = psi;
    target.beta = beta;
    const double m = static_cast<double>(target.positions.size());
    for (int n : target.positions) {
        const std::vector<double> lo = detail::teacher_basis_row(old_out.row(n), mode);
        const std::vector<double> lr = detail::teacher_basis_row(ref_out.row(n), mode);
        std::vector<double> row(lo.size());
        for (size_t v = 0; v < row.size(); ++v) {
            row[v] = (1.0 - beta) * lo[v] + beta * lr[v] + psi * advantage / m;
        }
        target.target_logits.push_back(std::move(row));
    }
    return target;
}

// ---------------------------------------------------------------------------
// GDSD loss
// ---------------------------------------------------------------------------

struct LossBreakdown {
    double total = 0.0;
    double match_term = 0.0;
    double reg_term = 0.0;
    std::vector<double> timestep_weights;
};

template <class Scalar>
struct GdsdTerms {
    Scalar total;
    Scalar match_term;
    Scalar reg_term;
};

// Squared logit-matching loss against the guided teacher,
//   match = (sum_masked [l_theta - l_old](x0) - psi A)^2,
//   reg   = (sum_masked [l_theta - l_ref](x0))^2,
//   total = match + beta / (1 - beta) * reg,
// with l raw log-softmax rows in direct mode and centralized rows in tlc mode.
// The old and reference contributions are plain numbers, so they are constants
// under differentiation of theta.
template <class Scalar>
GdsdTerms<Scalar> gdsd_loss(const DenoiserOutputT<Scalar>& theta_out,
                            const DenoiserOutput& old_out, const DenoiserOutput& ref_out,
                            double advantage, double psi, double beta, TeacherMode mode,
                            const TokenSequence& x0) {
    if (!(beta >= 0.0 && beta < 1.0)) {
        throw std::invalid_argument("gdsd_loss: beta must lie in [0, 1)");
    }
    detail::require_same_masks(theta_out.masked_positions, old_out.masked_positions, "gdsd_loss");
    detail::require_same_masks(theta_out.masked_positions, ref_out.masked_positions, "gdsd_loss");

    Tape* tape = nullptr;
    if constexpr (std::is_same_v<Scalar, Var>) {
        tape = theta_out.logits.empty() ? nullptr : theta_out.logits[0].tape();
    }
    Scalar s_theta = detail::make_scalar<Scalar>(0.0, tape);
    double s_old = 0.0;
    double s_ref = 0.0;
    for (int n : theta_out.masked_positions) {
        const int tok = x0.tokens[static_cast<size_t>(n)];
        const std::vector<Scalar> lt = detail::teacher_basis_row(theta_out.row(n), mode);
        const std::vector<double> lo = detail::teacher_basis_row(old_out.row(n), mode);
        const std::vector<double> lr = detail::teacher_basis_row(ref_out.row(n), mode);
        s_theta += lt[static_cast<size_t>(tok)];
        s_old += lo[static_cast<size_t>(tok)];
        s_ref += lr[static_cast<size_t>(tok)];
    }
    const Scalar match_root = s_theta - s_old - psi * advantage;
    const Scalar reg_root = s_theta - s_ref;
    GdsdTerms<Scalar> terms;
    terms.match_term = match_root * match_root;
    terms.reg_term = reg_root * reg_root;
    terms.total = terms.match_term + (beta / (1.0 - beta)) * terms.reg_term;
    return terms;
}

inline LossBreakdown gdsd_loss_breakdown(const DenoiserOutput& theta_out,
                                         const DenoiserOutput& old_out,
                                         const DenoiserOutput& ref_out, double advantage,
                                         double psi, double beta, TeacherMode mode,
                                         const TokenSequence& x0) {
    const GdsdTerms<double> t =
        gdsd_loss<double>(theta_out, old_out, ref_out, advantage, psi, beta, mode, x0);
    LossBreakdown b;
    b.total = t.total;
    b.match_term = t.match_term;
    b.reg_term = t.reg_term;
    return b;
}

// ---------------------------------------------------------------------------
// advantage-weighted ELBO
// ---------------------------------------------------------------------------

// exp(psi * A) * (negative ELBO estimate); the weight is a constant under
// differentiation. This family alone exponentiates advantages, hence the guard.
template <class Scalar>
Scalar awelbo_loss(const PolicyShape& shape, std::span<const Scalar> theta_params,
                   const TokenSequence& x0, double advantage, double psi,
                   std::span<const TimeSample> samples) {
    if (psi * advantage > 50.0) {
        throw std::runtime_error("awelbo_loss: exp(psi * A) would overflow; use a smaller psi");
    }
    const double weight = std::exp(psi * advantage);
    const Scalar elbo = elbo_from_samples(shape, theta_params, x0, samples);
    return (-weight) * elbo;
}

inline double awelbo_loss(const PolicySnapshot& theta, const TokenSequence& x0, double advantage,
                          double psi, int k, RngStream& rng) {
    std::vector<TimeSample> samples;
    for (int i = 0; i < k; ++i) {
        samples.push_back(sample_time_mask(x0, theta.shape.mask_id(), MaskMode::exact_count,
                                           WeightSchedule::inv_t, rng));
    }
    return awelbo_loss<double>(theta.shape, std::span<const double>(theta.params), x0, advantage,
                               psi, samples);
}

// ---------------------------------------------------------------------------
// policy-gradient / PPO with ELBO surrogates
// ---------------------------------------------------------------------------

enum class RatioVariant { pg, ppo };

// pg:  -exp(ELBO_theta - ELBO_old) * A with the ELBOs estimated on the shared
//      (t, mask) samples.
// ppo: token-level clipped form; per supervised token the ratio is the exp of the
//      per-token log-prob difference, aggregated with the same time weights as the
//      ELBO estimator.
template <class Scalar>
Scalar pg_ppo_elbo_loss(const PolicyShape& shape, std::span<const Scalar> theta_params,
                        const PolicySnapshot& old_policy, const TokenSequence& x0,
                        double advantage, double epsilon, RatioVariant variant,
                        std::span<const TimeSample> samples) {
    Tape* tape = detail::tape_of(theta_params);
    if (variant == RatioVariant::pg) {
        const Scalar elbo_theta = elbo_from_samples(shape, theta_params, x0, samples);
        const double elbo_old =
            elbo_from_samples<double>(shape, std::span<const double>(old_policy.params), x0,
                                      samples, PolicyTag::old_policy);
        using std::exp;
        return -(exp(elbo_theta - elbo_old) * advantage);
    }
    Scalar acc = detail::make_scalar<Scalar>(0.0, tape);
    for (const TimeSample& s : samples) {
        const DenoiserOutputT<Scalar> to = denoiser_logits(shape, theta_params, s.xt,
                                                           PolicyTag::theta);
        const DenoiserOutput oo = denoiser_logits<double>(
            shape, std::span<const double>(old_policy.params), s.xt, PolicyTag::old_policy);
        for (int n : s.xt.masked_positions) {
            const int tok = x0.tokens[static_cast<size_t>(n)];
            const std::vector<Scalar> lt = log_softmax(to.row(n));
            const std::vector<double> lo = log_softmax(oo.row(n));
            using std::exp;
            const Scalar ratio = exp(lt[static_cast<size_t>(tok)] - lo[static_cast<size_t>(tok)]);
            Scalar clipped = ratio;
            if (value_of(ratio) < 1.0 - epsilon) {
                clipped = detail::make_scalar<Scalar>(1.0 - epsilon, tape);
            } else if (value_of(ratio) > 1.0 + epsilon) {
                clipped = detail::make_scalar<Scalar>(1.0 + epsilon, tape);
            }
            using gdsd::min;
            acc += min(ratio * advantage, clipped * advantage) * s.weight;
        }
    }
    return -(acc * (1.0 / static_cast<double>(samples.size())));
}

inline double pg_ppo_elbo_loss(const PolicySnapshot& theta, const PolicySnapshot& old_policy,
                               const TokenSequence& x0, double advantage, int k, double epsilon,
                               RatioVariant variant, RngStream& rng) {
    std::vector<TimeSample> samples;
    for (int i = 0; i < k; ++i) {
        samples.push_back(sample_time_mask(x0, theta.shape.mask_id(), MaskMode::exact_count,
                                           WeightSchedule::inv_t, rng));
    }
    return pg_ppo_elbo_loss<double>(theta.shape, std::span<const double>(theta.params),
                                    old_policy, x0, advantage, epsilon, variant, samples);
}

// ---------------------------------------------------------------------------
// exact reverse-KL against the guided teacher (enumeration scale)
// ---------------------------------------------------------------------------

using AdvantageFn = std::function<double(std::span<const int>)>;

struct ReverseKlDecomposition {
    double direct_kl = 0.0;   // D_KL(p_theta(.|x_t) || p*(.|x_t)) by enumeration
    double reward_term = 0.0;  // E_{p_theta}[-psi A]
    double baseline_term = 0.0;  // A_t(x_t) = log E_{p_old_ref}[exp(psi A)]
    double reg_term = 0.0;     // E_{p_theta}[log p_theta - log p_old_ref]
    double decomposition_sum() const { return reward_term + baseline_term + reg_term; }
};

namespace detail {

// Enumerate completions consistent with x_t's unmasked tokens; calls fn with the
// full token vector (masked positions filled with every vocabulary combination).
// The earliest masked position varies fastest, so the visit order is ascending in
// the little-endian completion index.
template <class Fn>
void for_each_consistent(const MaskedSequence& xt, int vocab, Fn&& fn) {
    std::vector<int> tokens = xt.tokens;
    const std::vector<int>& pos = xt.masked_positions;
    long long combos = 1;
    for (size_t i = 0; i < pos.size(); ++i) {
        combos *= vocab;
    }
    for (long long counter = 0; counter < combos; ++counter) {
        long long rest = counter;
        for (size_t j = 0; j < pos.size(); ++j) {
            tokens[static_cast<size_t>(pos[j])] = static_cast<int>(rest % vocab);
            rest /= vocab;
        }
        fn(std::span<const int>(tokens));
    }
}

inline double log_sum_exp(std::span<const double> xs) {
    double hi = xs[0];
    for (double x : xs) {
        hi = std::fmax(hi, x);
    }
    double tot = 0.0;
    for (double x : xs) {
        tot += std::exp(x - hi);
    }
    return hi + std::log(tot);
}

inline void require_enumerable_slice(const PolicyShape& shape, const MaskedSequence& xt,
                                     const char* who) {
    if (shape.vocab > 4 || xt.masked_count() > 4) {
        throw std::invalid_argument(std::string(who) +
                                    ": instance too large for enumeration (needs V <= 4 and at "
                                    "most 4 masked positions)");
    }
}

}  // namespace detail

inline ReverseKlDecomposition reverse_kl_decomposition(
    const PolicySnapshot& theta, const PolicySnapshot& old_policy, const PolicySnapshot& ref,
    const AdvantageFn& advantage_fn, double psi, double beta, const MaskedSequence& xt) {
    detail::require_enumerable_slice(theta.shape, xt, "reverse_kl_loss_exact");

    const DenoiserOutput to = denoiser_logits(theta, xt);
    const DenoiserOutput oo = denoiser_logits(old_policy, xt);
    const DenoiserOutput ro = denoiser_logits(ref, xt);

    std::vector<double> log_p_theta;
    std::vector<double> log_mix_raw;  // (1-beta) log p_old + beta log p_ref, unnormalised mixture
    std::vector<double> adv;
    detail::for_each_consistent(xt, theta.shape.vocab, [&](std::span<const int> tokens) {
        TokenSequence x0;
        x0.tokens.assign(tokens.begin(), tokens.end());
        x0.prompt_len = xt.prompt_len;
        const double lt = seq_log_prob(to, x0);
        const double lo = seq_log_prob(oo, x0);
        const double lr = seq_log_prob(ro, x0);
        log_p_theta.push_back(lt);
        log_mix_raw.push_back((1.0 - beta) * lo + beta * lr);
        adv.push_back(advantage_fn(tokens));
    });

    const double mix_norm = detail::log_sum_exp(log_mix_raw);  // log sum p_old^(1-b) p_ref^b
    std::vector<double> tilted(log_mix_raw.size());
    for (size_t i = 0; i < tilted.size(); ++i) {
        tilted[i] = log_mix_raw[i] - mix_norm + psi * adv[i];
    }
    const double a_t = detail::log_sum_exp(tilted);  // log E_{p_old_ref}[exp(psi A)]

    ReverseKlDecomposition d;
    d.baseline_term = a_t;
    for (size_t i = 0; i < log_p_theta.size(); ++i) {
        const double pt = std::exp(log_p_theta[i]);
        const double log_p_star = log_mix_raw[i] - mix_norm + psi * adv[i] - a_t;
        d.direct_kl += pt * (log_p_theta[i] - log_p_star);
        d.reward_term += pt * (-psi * adv[i]);
        d.reg_term += pt * (log_p_theta[i] - (log_mix_raw[i] - mix_norm));
    }
    return d;
}

// Exact D_KL(p_theta(.|x_t) || p*(.|x_t)) by enumerating the completion slice.
inline double reverse_kl_loss_exact(const PolicySnapshot& theta, const PolicySnapshot& old_policy,
                                    const PolicySnapshot& ref, const AdvantageFn& advantage_fn,
                                    double psi, double beta, const MaskedSequence& xt) {
    return reverse_kl_decomposition(theta, old_policy, ref, advantage_fn, psi, beta, xt)
        .direct_kl;
}

}  // namespace gdsd
