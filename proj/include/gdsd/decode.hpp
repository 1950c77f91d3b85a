#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "gdsd/mdm.hpp"
#include "gdsd/rng.hpp"

namespace gdsd {

enum class Selection { low_confidence, random_subset };

inline const char* to_string(Selection s) {
    return s == Selection::low_confidence ? "low_confidence" : "random";
}

// Iterative re-masking decode plan: T steps with descending times, a selection
// policy for which sampled tokens to keep, optional left-to-right blocks, and a
// sampling temperature. per_step_counts[k] tokens are finalized at step k.
struct DecodeSchedule {
    int steps = 1;
    std::vector<double> times;            // masked fraction before each step, descending in (0,1]
    Selection selection = Selection::low_confidence;
    int block_size = 0;                   // 0 = no blocks
    double temperature = 1.0;
    int completion_len = 1;
    std::vector<int> per_step_counts;

    int block_count() const { return block_size > 0 ? completion_len / block_size : 1; }
    int steps_per_block() const { return steps / block_count(); }

    void validate() const {
        if (steps < 1 || completion_len < 1) {
            throw std::invalid_argument("DecodeSchedule: steps and completion_len must be positive");
        }
        if (temperature < 0.0) {
            throw std::invalid_argument("DecodeSchedule: temperature must be >= 0");
        }
        if (block_size < 0 || (block_size > 0 && completion_len % block_size != 0)) {
            throw std::invalid_argument("DecodeSchedule: block_size must divide completion length");
        }
        if (steps % block_count() != 0) {
            throw std::invalid_argument("DecodeSchedule: steps must split evenly across blocks");
        }
        if (static_cast<int>(per_step_counts.size()) != steps ||
            static_cast<int>(times.size()) != steps) {
            throw std::invalid_argument("DecodeSchedule: per-step tables not built");
        }
        int total = 0;
        for (int c : per_step_counts) {
            if (c < 1) {
                throw std::invalid_argument("DecodeSchedule: every step must finalize >= 1 token");
            }
            total += c;
        }
        if (total != completion_len) {
            throw std::invalid_argument("DecodeSchedule: per-step counts must sum to completion length");
        }
        for (size_t k = 1; k < times.size(); ++k) {
            if (!(times[k] < times[k - 1])) {
                throw std::invalid_argument("DecodeSchedule: times must be strictly descending");
            }
        }
        if (times.front() > 1.0 || times.back() <= 0.0) {
            throw std::invalid_argument("DecodeSchedule: times must lie in (0, 1]");
        }
    }
};

// Near-uniform schedule: completion_len tokens spread over `steps` steps, blocks
// (when block_size > 0) each receiving steps / block_count consecutive steps.
inline DecodeSchedule make_schedule(int steps, int completion_len, Selection selection,
                                    int block_size, double temperature) {
    DecodeSchedule sched;
    sched.steps = steps;
    sched.selection = selection;
    sched.block_size = block_size;
    sched.temperature = temperature;
    sched.completion_len = completion_len;
    if (steps < 1 || completion_len < 1) {
        throw std::invalid_argument("make_schedule: steps and completion_len must be positive");
    }
    if (block_size < 0 || (block_size > 0 && completion_len % block_size != 0)) {
        throw std::invalid_argument("make_schedule: block_size must divide completion length");
    }
    const int blocks = block_size > 0 ? completion_len / block_size : 1;
    if (steps % blocks != 0) {
        throw std::invalid_argument("make_schedule: steps must split evenly across blocks");
    }
    const int spb = steps / blocks;
    const int span = block_size > 0 ? block_size : completion_len;
    if (spb > span) {
        throw std::invalid_argument("make_schedule: more steps than tokens in a block");
    }
    for (int b = 0; b < blocks; ++b) {
        const int base = span / spb;
        const int extra = span % spb;
        for (int s = 0; s < spb; ++s) {
            sched.per_step_counts.push_back(base + (s < extra ? 1 : 0));
        }
    }
    int remaining = completion_len;
    for (int k = 0; k < steps; ++k) {
        sched.times.push_back(static_cast<double>(remaining) / completion_len);
        remaining -= sched.per_step_counts[static_cast<size_t>(k)];
    }
    sched.validate();
    return sched;
}

struct DecodeStepRecord {
    std::vector<int> positions;  // absolute positions finalized at this step
    std::vector<int> tokens;
};

struct Rollout {
    TokenSequence completion;  // prompt + generated tokens
    DecodeSchedule schedule;
    std::vector<DecodeStepRecord> steps;
};

namespace detail {

inline int sample_categorical(std::span<const double> probs, RngStream& rng) {
    const double u = rng.next_double();
    double c = 0.0;
    for (size_t v = 0; v < probs.size(); ++v) {
        c += probs[v];
        if (u < c) {
            return static_cast<int>(v);
        }
    }
    return static_cast<int>(probs.size()) - 1;
}

struct BlockRange {
    int begin = 0;  // absolute positions
    int end = 0;
};

inline std::vector<BlockRange> block_ranges(const DecodeSchedule& sched, int prompt_len) {
    std::vector<BlockRange> out;
    const int span = sched.block_size > 0 ? sched.block_size : sched.completion_len;
    for (int b = 0; b < sched.block_count(); ++b) {
        out.push_back(BlockRange{prompt_len + b * span, prompt_len + (b + 1) * span});
    }
    return out;
}

}  // namespace detail

// Sample one completion by iterative re-masking: start fully masked, at each step
// sample tokens at every masked position of the active block from
// softmax(logits / temperature), keep the scheduled number of positions (highest
// sampled-token probability under low_confidence, a uniform subset under random;
// confidence ties break to the lowest position index), and re-mask the rest.
// Blocks are completed left to right.
inline Rollout decode(const PolicySnapshot& policy, const TokenSequence& prompt,
                      const DecodeSchedule& sched, RngStream& rng) {
    sched.validate();
    if (prompt.prompt_len != prompt.length()) {
        throw std::invalid_argument("decode: prompt sequence must be all prompt");
    }
    if (prompt.length() + sched.completion_len != policy.shape.seq_len) {
        throw std::invalid_argument("decode: schedule does not fit the policy shape");
    }
    const int mask_id = policy.shape.mask_id();

    MaskedSequence x;
    x.tokens = prompt.tokens;
    x.tokens.resize(static_cast<size_t>(policy.shape.seq_len), mask_id);
    x.prompt_len = prompt.length();
    x.t = 1.0;
    for (int n = prompt.length(); n < policy.shape.seq_len; ++n) {
        x.masked_positions.push_back(n);
    }

    Rollout rollout;
    rollout.schedule = sched;

    const std::vector<detail::BlockRange> blocks = detail::block_ranges(sched, prompt.length());
    int step_idx = 0;
    for (const detail::BlockRange& block : blocks) {
        for (int s = 0; s < sched.steps_per_block(); ++s, ++step_idx) {
            x.t = sched.times[static_cast<size_t>(step_idx)];
            const DenoiserOutput out = denoiser_logits(policy, x);

            std::vector<int> positions;
            for (int n = block.begin; n < block.end; ++n) {
                if (x.tokens[static_cast<size_t>(n)] == mask_id) {
                    positions.push_back(n);
                }
            }
            std::vector<int> sampled(positions.size());
            std::vector<double> confidence(positions.size());
            for (size_t i = 0; i < positions.size(); ++i) {
                const std::vector<double> probs =
                    softmax_values(out.row(positions[i]), sched.temperature);
                sampled[i] = detail::sample_categorical(probs, rng);
                confidence[i] = probs[static_cast<size_t>(sampled[i])];
            }

            const int keep = sched.per_step_counts[static_cast<size_t>(step_idx)];
            std::vector<int> kept_local;
            if (sched.selection == Selection::random_subset) {
                kept_local = rng.sample_without_replacement(static_cast<int>(positions.size()), keep);
            } else {
                std::vector<int> order(positions.size());
                std::iota(order.begin(), order.end(), 0);
                std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                    if (confidence[static_cast<size_t>(a)] != confidence[static_cast<size_t>(b)]) {
                        return confidence[static_cast<size_t>(a)] > confidence[static_cast<size_t>(b)];
                    }
                    return a < b;
                });
                kept_local.assign(order.begin(), order.begin() + keep);
                std::sort(kept_local.begin(), kept_local.end());
            }

            DecodeStepRecord rec;
            for (int i : kept_local) {
                const int n = positions[static_cast<size_t>(i)];
                x.tokens[static_cast<size_t>(n)] = sampled[static_cast<size_t>(i)];
                x.masked_positions.erase(
                    std::find(x.masked_positions.begin(), x.masked_positions.end(), n));
                rec.positions.push_back(n);
                rec.tokens.push_back(sampled[static_cast<size_t>(i)]);
            }
            rollout.steps.push_back(std::move(rec));
        }
    }

    rollout.completion.tokens = x.tokens;
    rollout.completion.prompt_len = prompt.length();
    return rollout;
}

namespace detail {

struct RmEnumContext {
    const PolicyShape* shape = nullptr;
    std::span<const double> params;
    const TokenSequence* x0 = nullptr;
    const DecodeSchedule* sched = nullptr;
    std::vector<BlockRange> blocks;
    int mask_id = 0;
};

inline double rm_prob_recurse(const RmEnumContext& ctx, std::vector<int>& masked, int step_idx);

// All masked tokens of the active block share one denoiser call; trajectories are
// expanded over kept subsets (and, for low-confidence selection, over the sampled
// values at re-masked positions, which decide the confidence ranking).
inline double rm_step_prob(const RmEnumContext& ctx, std::vector<int>& masked, int step_idx) {
    const DecodeSchedule& sched = *ctx.sched;
    const int block_idx = step_idx / sched.steps_per_block();
    const BlockRange& block = ctx.blocks[static_cast<size_t>(block_idx)];

    MaskedSequence xt;
    xt.tokens = ctx.x0->tokens;
    xt.prompt_len = ctx.x0->prompt_len;
    xt.t = sched.times[static_cast<size_t>(step_idx)];
    xt.masked_positions = masked;
    for (int n : masked) {
        xt.tokens[static_cast<size_t>(n)] = ctx.mask_id;
    }

    const DenoiserOutputT<double> out =
        denoiser_logits<double>(*ctx.shape, ctx.params, xt, PolicyTag::old_policy);

    std::vector<int> active;  // block-local masked positions, ascending
    for (int n : masked) {
        if (n >= block.begin && n < block.end) {
            active.push_back(n);
        }
    }
    const int keep = sched.per_step_counts[static_cast<size_t>(step_idx)];
    const int a = static_cast<int>(active.size());

    std::vector<std::vector<double>> probs(active.size());
    for (size_t i = 0; i < active.size(); ++i) {
        probs[i] = softmax_values(out.row(active[i]), sched.temperature);
    }

    double total = 0.0;
    if (sched.selection == Selection::random_subset) {
        // the re-masked positions' sampled values marginalize out
        double subsets = 1.0;
        for (int i = 0; i < keep; ++i) {
            subsets = subsets * (a - i) / (i + 1);
        }
        const double m_prob = 1.0 / subsets;
        std::vector<int> pick(static_cast<size_t>(keep));
        const auto recurse_subsets = [&](auto&& self, int start, int depth) -> void {
            if (depth == keep) {
                double p = m_prob;
                for (int i : pick) {
                    const int n = active[static_cast<size_t>(i)];
                    p *= probs[static_cast<size_t>(i)]
                              [static_cast<size_t>(ctx.x0->tokens[static_cast<size_t>(n)])];
                }
                std::vector<int> next;
                for (int n : masked) {
                    bool kept = false;
                    for (int i : pick) {
                        kept = kept || active[static_cast<size_t>(i)] == n;
                    }
                    if (!kept) {
                        next.push_back(n);
                    }
                }
                total += p * rm_prob_recurse(ctx, next, step_idx + 1);
                return;
            }
            for (int i = start; i <= a - (keep - depth); ++i) {
                pick[static_cast<size_t>(depth)] = i;
                self(self, i + 1, depth + 1);
            }
        };
        recurse_subsets(recurse_subsets, 0, 0);
        return total;
    }

    // low_confidence: enumerate full sampled assignments over the active positions
    std::vector<int> assign(active.size(), 0);
    const auto recurse_assign = [&](auto&& self, size_t depth) -> void {
        if (depth == active.size()) {
            double p = 1.0;
            std::vector<std::pair<double, int>> ranked;  // (-confidence, local index)
            for (size_t i = 0; i < active.size(); ++i) {
                const double pi = probs[i][static_cast<size_t>(assign[i])];
                p *= pi;
                ranked.emplace_back(-pi, static_cast<int>(i));
            }
            if (p == 0.0) {
                return;
            }
            std::sort(ranked.begin(), ranked.end());
            bool consistent = true;
            std::vector<int> next = masked;
            for (int r = 0; r < keep; ++r) {
                const int i = ranked[static_cast<size_t>(r)].second;
                const int n = active[static_cast<size_t>(i)];
                if (assign[static_cast<size_t>(i)] != ctx.x0->tokens[static_cast<size_t>(n)]) {
                    consistent = false;
                    break;
                }
                next.erase(std::find(next.begin(), next.end(), n));
            }
            if (consistent) {
                total += p * rm_prob_recurse(ctx, next, step_idx + 1);
            }
            return;
        }
        for (int v = 0; v < ctx.shape->vocab; ++v) {
            assign[depth] = v;
            self(self, depth + 1);
        }
    };
    recurse_assign(recurse_assign, 0);
    return total;
}

inline double rm_prob_recurse(const RmEnumContext& ctx, std::vector<int>& masked, int step_idx) {
    if (step_idx == ctx.sched->steps) {
        return 1.0;
    }
    return rm_step_prob(ctx, masked, step_idx);
}

}  // namespace detail

// Exact log-probability of producing x0 under the iterative re-masking sampler:
// the sum over every (kept-subset, token-assignment) trajectory of the product of
// selection and token-prediction factors. Only feasible on tiny instances.
inline double rm_exact_log_prob(const PolicySnapshot& policy, const TokenSequence& x0,
                                const DecodeSchedule& sched) {
    sched.validate();
    const int nc = x0.completion_len();
    if (policy.shape.vocab > 4 || nc > 4 || sched.steps > 4) {
        throw std::invalid_argument(
            "rm_exact_log_prob: instance too large for enumeration (needs V <= 4, "
            "completion_len <= 4, steps <= 4)");
    }
    if (nc != sched.completion_len || x0.length() != policy.shape.seq_len) {
        throw std::invalid_argument("rm_exact_log_prob: shape mismatch");
    }
    detail::RmEnumContext ctx;
    ctx.shape = &policy.shape;
    ctx.params = std::span<const double>(policy.params);
    ctx.x0 = &x0;
    ctx.sched = &sched;
    ctx.blocks = detail::block_ranges(sched, x0.prompt_len);
    ctx.mask_id = policy.shape.mask_id();
    std::vector<int> masked;
    for (int n = x0.prompt_len; n < x0.length(); ++n) {
        masked.push_back(n);
    }
    return std::log(detail::rm_prob_recurse(ctx, masked, 0));
}

}  // namespace gdsd
