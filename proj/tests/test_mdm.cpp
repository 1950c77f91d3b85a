#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "gdsd/mdm.hpp"
#include "gdsd/oracles.hpp"

using namespace gdsd;

namespace {

TokenSequence make_seq(std::vector<int> tokens, int prompt_len = 0) {
    TokenSequence s;
    s.tokens = std::move(tokens);
    s.prompt_len = prompt_len;
    return s;
}

PolicySnapshot uniform_tabular(int vocab, int seq_len, int prompt_len = 0) {
    PolicyShape shape;
    shape.family = PolicyFamily::tabular;
    shape.vocab = vocab;
    shape.seq_len = seq_len;
    shape.prompt_len = prompt_len;
    return PolicySnapshot{shape, ParamVector(static_cast<size_t>(shape.param_count()), 0.0),
                          false, PolicyTag::theta};
}

}  // namespace

TEST_CASE("forward_mask masks the exact rounded count") {
    RngStream rng(1);
    const TokenSequence x0 = make_seq({0, 1, 2, 3, 0, 1, 2, 3});

    SECTION("t = 0 masks nothing") {
        const MaskedSequence m = forward_mask(x0, 4, 0.0, rng);
        REQUIRE(m.masked_count() == 0);
        REQUIRE(m.tokens == x0.tokens);
    }
    SECTION("t = 1 masks every completion position") {
        const MaskedSequence m = forward_mask(x0, 4, 1.0, rng);
        REQUIRE(m.masked_count() == 8);
        for (int tok : m.tokens) {
            REQUIRE(tok == 4);
        }
    }
    SECTION("t = 0.5 masks exactly half") {
        for (int trial = 0; trial < 50; ++trial) {
            const MaskedSequence m = forward_mask(x0, 4, 0.5, rng);
            REQUIRE(m.masked_count() == 4);
        }
    }
    SECTION("out-of-range t is rejected, not clamped") {
        REQUIRE_THROWS_AS(forward_mask(x0, 4, -0.01, rng), std::invalid_argument);
        REQUIRE_THROWS_AS(forward_mask(x0, 4, 1.01, rng), std::invalid_argument);
    }
}

TEST_CASE("forward_mask picks positions uniformly") {
    const TokenSequence x0 = make_seq({0, 1, 2, 3, 0, 1, 2, 3});
    RngStream rng(0xFACE);
    std::vector<int> hits(8, 0);
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
        const MaskedSequence m = forward_mask(x0, 4, 0.5, rng);
        for (int n : m.masked_positions) {
            hits[static_cast<size_t>(n)] += 1;
        }
    }
    for (int h : hits) {
        REQUIRE(std::fabs(static_cast<double>(h) / trials - 0.5) < 0.02);
    }
}

TEST_CASE("forward_mask never touches the prompt") {
    const TokenSequence x0 = make_seq({3, 3, 0, 1, 2, 0}, 2);
    RngStream rng(5);
    for (int i = 0; i < 100; ++i) {
        const MaskedSequence m = forward_mask(x0, 4, 1.0, rng);
        REQUIRE(m.tokens[0] == 3);
        REQUIRE(m.tokens[1] == 3);
        REQUIRE(m.masked_count() == 4);
    }
}

TEST_CASE("complementary_mask flips the masked completion set") {
    const TokenSequence x0 = make_seq({0, 1, 2, 3});
    RngStream rng(7);

    SECTION("masking the first half complements to the second half") {
        MaskedSequence m;
        m.tokens = {4, 4, 2, 3};
        m.t = 0.5;
        m.masked_positions = {0, 1};
        const MaskedSequence c = complementary_mask(x0, m, 4);
        REQUIRE(c.masked_positions == std::vector<int>{2, 3});
        REQUIRE(c.t == Catch::Approx(0.5));
        REQUIRE(c.tokens == std::vector<int>{0, 1, 4, 4});
    }
    SECTION("t = 1 complements to the empty mask at t = 0") {
        const MaskedSequence m = forward_mask(x0, 4, 1.0, rng);
        const MaskedSequence c = complementary_mask(x0, m, 4);
        REQUIRE(c.masked_count() == 0);
        REQUIRE(c.t == Catch::Approx(0.0));
        REQUIRE(c.tokens == x0.tokens);
    }
    SECTION("union is everything, intersection is empty") {
        for (int trial = 0; trial < 100; ++trial) {
            const double t = (trial % 11) / 10.0;
            const MaskedSequence m = forward_mask(x0, 4, t, rng);
            const MaskedSequence c = complementary_mask(x0, m, 4);
            std::vector<bool> seen(4, false);
            for (int n : m.masked_positions) {
                seen[static_cast<size_t>(n)] = true;
            }
            for (int n : c.masked_positions) {
                REQUIRE(!seen[static_cast<size_t>(n)]);
                seen[static_cast<size_t>(n)] = true;
            }
            for (bool s : seen) {
                REQUIRE(s);
            }
        }
    }
}

TEST_CASE("tabular denoiser with zero parameters is uniform") {
    const PolicySnapshot policy = uniform_tabular(3, 2);
    RngStream rng(2);
    const MaskedSequence m = forward_mask(make_seq({0, 1}), 3, 1.0, rng);
    const DenoiserOutput out = denoiser_logits(policy, m);
    for (double logit : out.logits) {
        REQUIRE(logit == 0.0);
    }
}

TEST_CASE("denoiser evaluation is deterministic") {
    RngStream rng(3);
    PolicyShape shape;
    shape.family = PolicyFamily::mlp;
    shape.vocab = 4;
    shape.seq_len = 6;
    shape.prompt_len = 2;
    shape.hidden = 8;
    RngStream init_rng = rng.substream(0);
    const PolicySnapshot policy{shape, init_params(shape, 0.5, init_rng), false,
                                PolicyTag::theta};
    RngStream mask_rng = rng.substream(1);
    const MaskedSequence m = forward_mask(make_seq({1, 2, 0, 3, 1, 2}, 2), 4, 0.5, mask_rng);
    const DenoiserOutput a = denoiser_logits(policy, m);
    const DenoiserOutput b = denoiser_logits(policy, m);
    REQUIRE(a.logits == b.logits);
}

TEST_CASE("denoiser rejects shape mismatches") {
    const PolicySnapshot policy = uniform_tabular(3, 2);
    MaskedSequence wrong;
    wrong.tokens = {0, 1, 2};
    REQUIRE_THROWS_AS(denoiser_logits(policy, wrong), std::invalid_argument);
}

TEST_CASE("perturbing any mlp parameter changes some output") {
    PolicyShape shape;
    shape.family = PolicyFamily::mlp;
    shape.vocab = 3;
    shape.seq_len = 3;
    shape.prompt_len = 0;
    shape.hidden = 4;
    RngStream rng(11);
    PolicySnapshot policy{shape, init_params(shape, 0.5, rng), false, PolicyTag::theta};
    MaskedSequence m;
    m.tokens = {3, 3, 3};
    m.t = 1.0;
    m.masked_positions = {0, 1, 2};
    const DenoiserOutput base = denoiser_logits(policy, m);
    // spot-check a head weight and a first-layer weight
    for (size_t idx : {policy.params.size() - 1, static_cast<size_t>(0)}) {
        PolicySnapshot bumped = policy;
        bumped.params[idx] += 0.37;
        const DenoiserOutput out = denoiser_logits(bumped, m);
        REQUIRE(out.logits != base.logits);
    }
}

TEST_CASE("seq_log_prob on uniform logits is m log(1/V)") {
    const PolicySnapshot policy = uniform_tabular(3, 2);
    RngStream rng(4);
    const TokenSequence x0 = make_seq({0, 2});
    const MaskedSequence m = forward_mask(x0, 3, 1.0, rng);
    const DenoiserOutput out = denoiser_logits(policy, m);
    REQUIRE(seq_log_prob(out, x0) == Catch::Approx(2.0 * std::log(1.0 / 3.0)));
    REQUIRE(seq_log_prob(out, x0, std::span<const int>()) == 0.0);
}

TEST_CASE("seq_log_prob matches direct softmax arithmetic") {
    PolicySnapshot policy = uniform_tabular(3, 1);
    MaskedSequence m;
    m.tokens = {3};
    m.t = 1.0;
    m.masked_positions = {0};
    const int ctx = policy.shape.context_index(m);
    policy.params[static_cast<size_t>(ctx) * 3 + 0] = 1.0;
    policy.params[static_cast<size_t>(ctx) * 3 + 1] = 2.0;
    policy.params[static_cast<size_t>(ctx) * 3 + 2] = 3.0;
    const DenoiserOutput out = denoiser_logits(policy, m);
    const TokenSequence x0 = make_seq({2});
    const double expected =
        std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
    REQUIRE(seq_log_prob(out, x0) == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("seq_log_prob rejects unmasked positions") {
    const PolicySnapshot policy = uniform_tabular(3, 2);
    RngStream rng(6);
    const TokenSequence x0 = make_seq({0, 1});
    const MaskedSequence m = forward_mask(x0, 3, 0.5, rng);
    const int unmasked = m.masked_positions[0] == 0 ? 1 : 0;
    const DenoiserOutput out = denoiser_logits(policy, m);
    const std::vector<int> bad{unmasked};
    REQUIRE_THROWS_AS(seq_log_prob(out, x0, std::span<const int>(bad)), std::invalid_argument);
    const std::vector<int> oob{7};
    REQUIRE_THROWS_AS(seq_log_prob(out, x0, std::span<const int>(oob)), std::invalid_argument);
}

TEST_CASE("seq_log_prob factorizes over disjoint position sets") {
    RngStream rng(0x5EED);
    const EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.0, 0.0, rng);
    const MaskedSequence xt = inst.fully_masked();
    const DenoiserOutput out = denoiser_logits(inst.policies.theta, xt);
    const TokenSequence x0 = inst.completion_from_index(5);
    const std::vector<int> first{0};
    const std::vector<int> second{1};
    const double whole = seq_log_prob(out, x0);
    const double parts = seq_log_prob(out, x0, std::span<const int>(first)) +
                         seq_log_prob(out, x0, std::span<const int>(second));
    REQUIRE(whole == Catch::Approx(parts).epsilon(1e-12));
}

TEST_CASE("softmax and seq_log_prob differences are shift invariant") {
    RngStream rng(0x5EED1);
    EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.0, 0.0, rng);
    const MaskedSequence xt = inst.fully_masked();
    const DenoiserOutput out = denoiser_logits(inst.policies.theta, xt);

    EnumerableInstance shifted = inst;
    const int ctx = inst.policies.theta.shape.context_index(xt);
    for (int j = 0; j < 2; ++j) {
        for (int v = 0; v < 3; ++v) {
            shifted.policies.theta.params[static_cast<size_t>(ctx) * 6 +
                                          static_cast<size_t>(j) * 3 + v] += 11.5;
        }
    }
    const DenoiserOutput out2 = denoiser_logits(shifted.policies.theta, xt);
    for (int n : xt.masked_positions) {
        const std::vector<double> p1 = softmax_values(out.row(n));
        const std::vector<double> p2 = softmax_values(out2.row(n));
        for (size_t v = 0; v < p1.size(); ++v) {
            REQUIRE(p1[v] == Catch::Approx(p2[v]).margin(1e-12));
        }
    }
    const TokenSequence a = inst.completion_from_index(1);
    const TokenSequence b = inst.completion_from_index(7);
    const double diff1 = seq_log_prob(out, a) - seq_log_prob(out, b);
    const double diff2 = seq_log_prob(out2, a) - seq_log_prob(out2, b);
    REQUIRE(diff1 == Catch::Approx(diff2).margin(1e-9));
}

TEST_CASE("elbo estimate of a near-perfect denoiser is near zero") {
    PolicySnapshot policy = uniform_tabular(2, 2);
    const TokenSequence x0 = make_seq({0, 1});
    // push all mass onto the true tokens in every context
    for (long long ctx = 0; ctx < policy.shape.context_count(); ++ctx) {
        for (int j = 0; j < 2; ++j) {
            policy.params[static_cast<size_t>(ctx) * 4 + static_cast<size_t>(j) * 2 +
                          x0.tokens[static_cast<size_t>(j)]] = 60.0;
        }
    }
    RngStream rng(9);
    for (int k : {1, 3}) {
        REQUIRE(std::fabs(elbo_estimate(policy, x0, k, rng)) < 1e-12);
    }
}

TEST_CASE("elbo estimate of the uniform denoiser averages to N_c log(1/V)") {
    const PolicySnapshot policy = uniform_tabular(3, 4);
    const TokenSequence x0 = make_seq({0, 1, 2, 0});
    const double expected = 4.0 * std::log(1.0 / 3.0);
    for (MaskMode mode : {MaskMode::exact_count, MaskMode::bernoulli}) {
        RngStream rng(10);
        double sum = 0.0;
        double sumsq = 0.0;
        const int draws = 10000;
        for (int i = 0; i < draws; ++i) {
            const double e = elbo_estimate(policy, x0, 1, WeightSchedule::inv_t, mode, rng);
            sum += e;
            sumsq += e * e;
        }
        const double mean = sum / draws;
        const double se = std::sqrt(std::fmax(0.0, sumsq / draws - mean * mean) / draws);
        REQUIRE(std::fabs(mean - expected) <= 3.0 * se + 1e-12);
    }
}

TEST_CASE("elbo estimator mean matches its closed-form expectation") {
    RngStream rng(0x10E5);
    const EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.0, 0.0, rng);
    const TokenSequence x0 = inst.completion_from_index(4);
    for (MaskMode mode : {MaskMode::exact_count, MaskMode::bernoulli}) {
        const double expected = exact_elbo_expectation(inst.policies.theta, x0, mode);
        RngStream mc = rng.substream(mode == MaskMode::exact_count ? 1 : 2);
        double sum = 0.0;
        double sumsq = 0.0;
        const int draws = 20000;
        for (int i = 0; i < draws; ++i) {
            const double e =
                elbo_estimate(inst.policies.theta, x0, 1, WeightSchedule::inv_t, mode, mc);
            sum += e;
            sumsq += e * e;
        }
        const double mean = sum / draws;
        const double se = std::sqrt(std::fmax(0.0, sumsq / draws - mean * mean) / draws);
        REQUIRE(std::fabs(mean - expected) <= 3.5 * se);
    }
}

TEST_CASE("elbo estimates never exceed the exact sampler log-likelihood on average") {
    RngStream rng(0x10E6);
    const EnumerableInstance inst = EnumerableInstance::random(2, 2, 0.8, 0.0, rng);
    const DecodeSchedule sched = finest_schedule(2);
    for (int idx = 0; idx < inst.completion_count(); ++idx) {
        const TokenSequence x0 = inst.completion_from_index(idx);
        const double exact = rm_exact_log_prob(inst.policies.old_policy, x0, sched);
        RngStream mc = rng.substream(static_cast<uint64_t>(idx));
        double sum = 0.0;
        double sumsq = 0.0;
        const int draws = 10000;
        for (int i = 0; i < draws; ++i) {
            const double e = elbo_estimate(inst.policies.old_policy, x0, 1, WeightSchedule::inv_t,
                                           MaskMode::bernoulli, mc);
            sum += e;
            sumsq += e * e;
        }
        const double mean = sum / draws;
        const double se = std::sqrt(std::fmax(0.0, sumsq / draws - mean * mean) / draws);
        REQUIRE(exact - mean >= -3.0 * se);
    }
}

TEST_CASE("one drawn mask serves all three policies") {
    RngStream rng(0x10E7);
    const EnumerableInstance inst = EnumerableInstance::random(3, 2, 1.0, 0.0, rng);
    const TokenSequence x0 = inst.completion_from_index(2);
    RngStream mask_rng = rng.substream(1);
    const TimeSample s = sample_time_mask(x0, inst.vocab.mask_id(), MaskMode::exact_count,
                                          WeightSchedule::inv_t, mask_rng);
    const DenoiserOutput a = denoiser_logits(inst.policies.theta, s.xt);
    const DenoiserOutput b = denoiser_logits(inst.policies.old_policy, s.xt);
    const DenoiserOutput c = denoiser_logits(inst.policies.ref, s.xt);
    REQUIRE(a.masked_positions == b.masked_positions);
    REQUIRE(b.masked_positions == c.masked_positions);
}
