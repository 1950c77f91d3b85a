#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "gdsd/oracles.hpp"
#include "gdsd/verify.hpp"

using namespace gdsd;

namespace {

EnumerableInstance uniform_instance(int vocab, int completion_len) {
    RngStream rng(0x0111);
    EnumerableInstance inst = EnumerableInstance::random(vocab, completion_len, 0.0, 0.0, rng);
    return inst;
}

}  // namespace

TEST_CASE("partition function of normalized mixtures with zero advantage is one") {
    const EnumerableInstance inst = uniform_instance(3, 2);
    const MaskedSequence xt = inst.fully_masked();
    for (double beta : {0.0, 0.3, 1.0}) {
        REQUIRE(brute_force_partition(inst, xt, 5.0, beta) == Catch::Approx(1.0).margin(1e-12));
    }
    RngStream rng(0x0112);
    const EnumerableInstance random_inst = EnumerableInstance::random(3, 2, 1.0, 0.0, rng);
    REQUIRE(brute_force_partition(random_inst, random_inst.fully_masked(), 1.0, 0.0) ==
            Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("partition sum is independent of enumeration order") {
    RngStream rng(0x0113);
    const EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.5, 1.0, rng);
    const MaskedSequence xt = inst.fully_masked();
    const double psi = 7.0;
    const double beta = 0.2;
    const double z = brute_force_partition(inst, xt, psi, beta);

    // independent re-summation in reversed order, accumulated directly
    const DenoiserOutput oo = denoiser_logits(inst.policies.old_policy, xt);
    const DenoiserOutput ro = denoiser_logits(inst.policies.ref, xt);
    std::vector<double> terms;
    detail::for_each_consistent(xt, inst.vocab.size, [&](std::span<const int> tokens) {
        TokenSequence x0;
        x0.tokens.assign(tokens.begin(), tokens.end());
        x0.prompt_len = 0;
        terms.push_back((1.0 - beta) * seq_log_prob(oo, x0) + beta * seq_log_prob(ro, x0) +
                        psi * inst.advantage[static_cast<size_t>(inst.completion_index(tokens))]);
    });
    std::reverse(terms.begin(), terms.end());
    double direct = 0.0;
    for (double t : terms) {
        direct += std::exp(t);
    }
    REQUIRE(z == Catch::Approx(direct).epsilon(1e-12));
}

TEST_CASE("teacher with guidance off is the geometric mixture with zero log-normalizer") {
    RngStream rng(0x0114);
    const EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.0, 1.0, rng);
    const MaskedSequence xt = inst.fully_masked();
    const BruteForceTeacher teacher = brute_force_teacher(inst, xt, 0.0, 0.4);
    REQUIRE(teacher.a_t == Catch::Approx(0.0).margin(1e-12));

    // constant advantage shifts cancel through the log-normalizer
    EnumerableInstance shifted = inst;
    for (double& a : shifted.advantage) {
        a = 0.8;
    }
    const double psi = 3.0;
    const BruteForceTeacher base = brute_force_teacher(inst, xt, 0.0, 0.4);
    const BruteForceTeacher tilted = brute_force_teacher(shifted, xt, psi, 0.4);
    REQUIRE(tilted.a_t == Catch::Approx(psi * 0.8).margin(1e-12));
    for (size_t i = 0; i < base.probs.size(); ++i) {
        REQUIRE(tilted.probs[i] == Catch::Approx(base.probs[i]).margin(1e-12));
    }
}

TEST_CASE("teacher normalizes and matches the log-normalizer identity") {
    RngStream rng(0x0115);
    for (int trial = 0; trial < 10; ++trial) {
        RngStream sub = rng.substream(static_cast<uint64_t>(trial));
        const EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.0, 1.0, sub);
        const MaskedSequence xt = inst.fully_masked();
        const double psi = 2.0 + trial;
        const double beta = 0.1 * (trial % 4);
        const BruteForceTeacher teacher = brute_force_teacher(inst, xt, psi, beta);
        double mass = 0.0;
        for (double p : teacher.probs) {
            mass += p;
        }
        REQUIRE(std::fabs(mass - 1.0) < 1e-12);

        // A_t = log(Z_t / sum of unnormalised mixture weights), from both routes
        const DenoiserOutput oo = denoiser_logits(inst.policies.old_policy, xt);
        const DenoiserOutput ro = denoiser_logits(inst.policies.ref, xt);
        std::vector<double> mix;
        detail::for_each_consistent(xt, inst.vocab.size, [&](std::span<const int> tokens) {
            TokenSequence x0;
            x0.tokens.assign(tokens.begin(), tokens.end());
            x0.prompt_len = 0;
            mix.push_back((1.0 - beta) * seq_log_prob(oo, x0) + beta * seq_log_prob(ro, x0));
        });
        const double z = brute_force_partition(inst, xt, psi, beta);
        const double a_t_from_z = std::log(z) - detail::log_sum_exp(mix);
        REQUIRE(teacher.a_t == Catch::Approx(a_t_from_z).margin(1e-10));
    }
}

TEST_CASE("exact likelihood of the uniform policy is Nc log(1/V)") {
    const EnumerableInstance inst = uniform_instance(3, 2);
    for (int idx = 0; idx < inst.completion_count(); ++idx) {
        REQUIRE(exact_log_likelihood(inst.policies.old_policy, inst.completion_from_index(idx)) ==
                Catch::Approx(2.0 * std::log(1.0 / 3.0)).epsilon(1e-12));
    }
}

TEST_CASE("tim report with theta equal to old has zero ratio bias") {
    RngStream rng(0x0117);
    EnumerableInstance inst = EnumerableInstance::random(2, 2, 1.0, 0.0, rng);
    inst.policies.theta.params = inst.policies.old_policy.params;
    RngStream mc(1);
    const TimReport report = tim_report(inst, finest_schedule(2), 2, 200, mc);
    REQUIRE(report.mean_abs_ratio_bias == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("tim report on uniform policies collapses to Nc log(1/V) everywhere") {
    EnumerableInstance inst = uniform_instance(2, 2);
    RngStream mc(2);
    const TimReport report = tim_report(inst, finest_schedule(2), 2, 500, mc);
    const double expected = 2.0 * std::log(0.5);
    for (const TimRow& row : report.rows) {
        REQUIRE(row.log_rm == Catch::Approx(expected).margin(1e-12));
        REQUIRE(row.exact_ll == Catch::Approx(expected).margin(1e-12));
        REQUIRE(row.elbo_mean == Catch::Approx(expected).margin(1e-9));
        REQUIRE(row.elbo_std == Catch::Approx(0.0).margin(1e-9));
    }
    REQUIRE(report.mean_abs_ratio_bias == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("perturbed theta produces strictly positive ratio bias") {
    const EnumerableInstance inst = verify::make_tim_fixture();
    RngStream mc(3);
    const TimReport report = tim_report(inst, finest_schedule(2), 2, 200, mc);
    REQUIRE(report.mean_abs_ratio_bias > 0.0);
    for (const TimRow& row : report.rows) {
        REQUIRE(row.elbo_mean <= row.exact_ll + 3.0 * row.elbo_stderr);
    }
}

TEST_CASE("the guided teacher maximizes the regularized objective over the simplex") {
    RngStream rng(0x0118);
    for (int trial = 0; trial < 5; ++trial) {
        RngStream sub = rng.substream(static_cast<uint64_t>(trial));
        const EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.0, 0.7, sub);
        const MaskedSequence xt = inst.fully_masked();
        const OptimalityCheck check =
            lemma_optimality_check(inst, xt, 1.0 + trial, 0.1 * (trial % 3));
        REQUIRE(std::fabs(check.gap()) < 1e-6);
        REQUIRE(check.objective_at_teacher >= check.objective_at_optimum - 1e-9);
    }
}

TEST_CASE("forward-KL and advantage-weighted elbo gradients are proportional") {
    RngStream rng(0x0119);
    const EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.0, 0.5, rng);
    const GradientPair pair = prop_forward_kl_aw_elbo_gradients(inst, 5.0, 0.1);
    REQUIRE(pair.cosine > 0.999);
    // proportional, not equal: the ratio of norms carries the partition constant
    REQUIRE(norm2(pair.forward_kl) > 0.0);
    REQUIRE(norm2(pair.aw_elbo) > 0.0);
}

TEST_CASE("enumerable instances reject oversized worlds") {
    RngStream rng(0x011A);
    REQUIRE_THROWS_AS(EnumerableInstance::random(5, 2, 1.0, 1.0, rng), std::invalid_argument);
    REQUIRE_THROWS_AS(EnumerableInstance::random(4, 5, 1.0, 1.0, rng), std::invalid_argument);
}
