#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gdsd/autodiff.hpp"
#include "gdsd/rng.hpp"

namespace gdsd {

// ---------------------------------------------------------------------------
// sequences
// ---------------------------------------------------------------------------

struct Vocabulary {
    int size = 2;  // count of real tokens; ids 0..size-1
    int mask_id() const { return size; }
    void validate() const {
        if (size < 2) {
            throw std::invalid_argument("Vocabulary: size must be >= 2");
        }
    }
};

// Clean sequence: prompt followed by completion, no mask tokens.
struct TokenSequence {
    std::vector<int> tokens;
    int prompt_len = 0;

    int length() const { return static_cast<int>(tokens.size()); }
    int completion_len() const { return length() - prompt_len; }

    void validate(const Vocabulary& vocab) const {
        if (prompt_len < 0 || prompt_len > length()) {
            throw std::invalid_argument("TokenSequence: prompt_len out of range");
        }
        for (int tok : tokens) {
            if (tok < 0 || tok >= vocab.size) {
                throw std::invalid_argument("TokenSequence: token outside vocabulary");
            }
        }
    }
};

// Partially masked sequence at diffusion time t. tokens[n] == mask_id exactly for
// n in masked_positions; prompt positions are never masked.
struct MaskedSequence {
    std::vector<int> tokens;
    double t = 0.0;
    std::vector<int> masked_positions;  // ascending
    int prompt_len = 0;

    int length() const { return static_cast<int>(tokens.size()); }
    int completion_len() const { return length() - prompt_len; }
    int masked_count() const { return static_cast<int>(masked_positions.size()); }

    bool is_masked(int n) const {
        return std::binary_search(masked_positions.begin(), masked_positions.end(), n);
    }
};

// Exact-count forward masking: round(t * completion_len) completion positions,
// chosen uniformly without replacement, are replaced by the mask token.
inline MaskedSequence forward_mask(const TokenSequence& x0, int mask_id, double t, RngStream& rng) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw std::invalid_argument("forward_mask: t must lie in [0, 1]");
    }
    const int nc = x0.completion_len();
    const int m = static_cast<int>(std::lround(t * nc));
    MaskedSequence out;
    out.tokens = x0.tokens;
    out.t = t;
    out.prompt_len = x0.prompt_len;
    const std::vector<int> rel = rng.sample_without_replacement(nc, m);
    out.masked_positions.reserve(rel.size());
    for (int r : rel) {
        const int pos = x0.prompt_len + r;
        out.tokens[static_cast<size_t>(pos)] = mask_id;
        out.masked_positions.push_back(pos);
    }
    return out;
}

// Per-position Bernoulli(t) masking; the alternative masking rule. The recorded t
// is the one drawn, the realized masked fraction may differ.
inline MaskedSequence bernoulli_mask(const TokenSequence& x0, int mask_id, double t, RngStream& rng) {
    if (!(t >= 0.0 && t <= 1.0)) {
        throw std::invalid_argument("bernoulli_mask: t must lie in [0, 1]");
    }
    MaskedSequence out;
    out.tokens = x0.tokens;
    out.t = t;
    out.prompt_len = x0.prompt_len;
    for (int n = x0.prompt_len; n < x0.length(); ++n) {
        if (rng.next_double() < t) {
            out.tokens[static_cast<size_t>(n)] = mask_id;
            out.masked_positions.push_back(n);
        }
    }
    return out;
}

// Masked sequence whose masked completion positions are exactly the complement of
// m's, at time 1 - t. Requires the clean sequence to restore the tokens m hid.
inline MaskedSequence complementary_mask(const TokenSequence& x0, const MaskedSequence& m,
                                         int mask_id) {
    const int nc = x0.completion_len();
    MaskedSequence out;
    out.tokens = x0.tokens;
    out.t = 1.0 - m.t;
    out.prompt_len = x0.prompt_len;
    for (int n = x0.prompt_len; n < x0.length(); ++n) {
        if (!m.is_masked(n)) {
            out.tokens[static_cast<size_t>(n)] = mask_id;
            out.masked_positions.push_back(n);
        }
    }
    const int expect = static_cast<int>(std::lround(out.t * nc));
    if (expect != out.masked_count()) {
        throw std::runtime_error("complementary_mask: complement size " +
                                 std::to_string(out.masked_count()) +
                                 " violates the count rule for t' = " + std::to_string(out.t));
    }
    return out;
}

// ---------------------------------------------------------------------------
// denoiser families
// ---------------------------------------------------------------------------

enum class PolicyFamily { tabular, mlp };
enum class PolicyTag { theta, old_policy, ref };

inline const char* to_string(PolicyTag tag) {
    switch (tag) {
        case PolicyTag::theta: return "theta";
        case PolicyTag::old_policy: return "old";
        case PolicyTag::ref: return "ref";
    }
    return "?";
}

// Shape shared by the three snapshots of a policy set. The tabular family keeps a
// distinct logits row per (masked-context, position) and is only valid when the
// context space (V+1)^completion_len is enumerable; the mlp family runs a one-hidden-
// layer network over one-hot tokens plus sinusoidal position features, with a
// linear head per position.
struct PolicyShape {
    PolicyFamily family = PolicyFamily::tabular;
    int vocab = 2;       // V
    int seq_len = 2;     // N (prompt + completion)
    int prompt_len = 0;
    int hidden = 32;     // mlp only
    int pos_features = 4;

    static constexpr int kMaxTabularContexts = 4096;

    int completion_len() const { return seq_len - prompt_len; }
    int mask_id() const { return vocab; }

    long long context_count() const {
        long long c = 1;
        for (int i = 0; i < completion_len(); ++i) {
            c *= vocab + 1;
        }
        return c;
    }

    int input_features() const { return seq_len * (vocab + 1 + pos_features); }

    int param_count() const {
        if (family == PolicyFamily::tabular) {
            return static_cast<int>(context_count()) * completion_len() * vocab;
        }
        const int fin = input_features();
        return fin * hidden + hidden + seq_len * (hidden * vocab + vocab);
    }

    void validate() const {
        if (vocab < 2 || seq_len < 1 || prompt_len < 0 || prompt_len >= seq_len) {
            throw std::invalid_argument("PolicyShape: bad dimensions");
        }
        if (family == PolicyFamily::tabular && context_count() > kMaxTabularContexts) {
            throw std::invalid_argument("PolicyShape: tabular family needs (V+1)^completion_len <= " +
                                        std::to_string(kMaxTabularContexts));
        }
        if (family == PolicyFamily::mlp && hidden < 1) {
            throw std::invalid_argument("PolicyShape: mlp hidden size must be positive");
        }
    }

    // Index of the completion-region masking context of x_t.
    int context_index(const MaskedSequence& xt) const {
        long long idx = 0;
        long long stride = 1;
        for (int n = prompt_len; n < seq_len; ++n) {
            idx += stride * xt.tokens[static_cast<size_t>(n)];
            stride *= vocab + 1;
        }
        return static_cast<int>(idx);
    }
};

struct PolicySnapshot {
    PolicyShape shape;
    ParamVector params;
    bool frozen = false;
    PolicyTag tag = PolicyTag::theta;
};

// The three denoisers of one run: trainable theta plus frozen old and reference
// copies, all sharing one shape.
struct PolicySet {
    PolicySnapshot theta;
    PolicySnapshot old_policy;
    PolicySnapshot ref;
};

inline PolicySet make_policy_set(const PolicyShape& shape, const ParamVector& init) {
    PolicySet set;
    set.theta = PolicySnapshot{shape, init, false, PolicyTag::theta};
    set.old_policy = PolicySnapshot{shape, init, true, PolicyTag::old_policy};
    set.ref = PolicySnapshot{shape, init, true, PolicyTag::ref};
    return set;
}

inline ParamVector init_params(const PolicyShape& shape, double scale, RngStream& rng) {
    ParamVector p(static_cast<size_t>(shape.param_count()));
    if (shape.family == PolicyFamily::tabular) {
        for (double& v : p) {
            v = scale * rng.next_gaussian();
        }
        return p;
    }
    const int fin = shape.input_features();
    size_t k = 0;
    for (int i = 0; i < fin * shape.hidden; ++i) {
        p[k++] = rng.next_gaussian() / std::sqrt(static_cast<double>(fin));
    }
    for (int i = 0; i < shape.hidden; ++i) {
        p[k++] = 0.0;
    }
    for (int n = 0; n < shape.seq_len; ++n) {
        for (int i = 0; i < shape.hidden * shape.vocab; ++i) {
            p[k++] = scale * rng.next_gaussian() / std::sqrt(static_cast<double>(shape.hidden));
        }
        for (int v = 0; v < shape.vocab; ++v) {
            p[k++] = 0.0;
        }
    }
    return p;
}

// Raw per-position logits over the vocabulary. Rows exist for every position; only
// masked rows carry supervision, prompt rows are zero-filled.
template <class Scalar>
struct DenoiserOutputT {
    int seq_len = 0;
    int vocab = 0;
    std::vector<Scalar> logits;        // seq_len * vocab, row-major
    PolicyTag source = PolicyTag::theta;
    std::vector<int> masked_positions;

    std::span<const Scalar> row(int n) const {
        return std::span<const Scalar>(logits).subspan(static_cast<size_t>(n) * vocab,
                                                       static_cast<size_t>(vocab));
    }
    std::span<Scalar> row(int n) {
        return std::span<Scalar>(logits).subspan(static_cast<size_t>(n) * vocab,
                                                 static_cast<size_t>(vocab));
    }
};

using DenoiserOutput = DenoiserOutputT<double>;

namespace detail {

template <class Scalar>
Scalar make_scalar(double v, Tape* tape) {
    if constexpr (std::is_same_v<Scalar, Var>) {
        return Var(tape, tape->add_leaf(v, "const"));
    } else {
        return v;
    }
}

template <class Scalar>
Tape* tape_of(std::span<const Scalar> params) {
    if constexpr (std::is_same_v<Scalar, Var>) {
        return params.empty() ? nullptr : params[0].tape();
    } else {
        return nullptr;
    }
}

}  // namespace detail

// One evaluation yields logits for all positions.
template <class Scalar>
DenoiserOutputT<Scalar> denoiser_logits(const PolicyShape& shape, std::span<const Scalar> params,
                                        const MaskedSequence& xt, PolicyTag source) {
    if (xt.length() != shape.seq_len) {
        throw std::invalid_argument("denoiser_logits: sequence length mismatch");
    }
    if (static_cast<int>(params.size()) != shape.param_count()) {
        throw std::invalid_argument("denoiser_logits: parameter count mismatch");
    }
    for (int tok : xt.tokens) {
        if (tok < 0 || tok > shape.vocab) {
            throw std::invalid_argument("denoiser_logits: token id outside augmented vocabulary");
        }
    }
    Tape* tape = detail::tape_of(params);
    DenoiserOutputT<Scalar> out;
    out.seq_len = shape.seq_len;
    out.vocab = shape.vocab;
    out.source = source;
    out.masked_positions = xt.masked_positions;
    out.logits.assign(static_cast<size_t>(shape.seq_len) * shape.vocab,
                      detail::make_scalar<Scalar>(0.0, tape));

    if (shape.family == PolicyFamily::tabular) {
        const int ctx = shape.context_index(xt);
        const size_t base =
            static_cast<size_t>(ctx) * shape.completion_len() * shape.vocab;
        for (int j = 0; j < shape.completion_len(); ++j) {
            const int n = shape.prompt_len + j;
            for (int v = 0; v < shape.vocab; ++v) {
                out.row(n)[static_cast<size_t>(v)] =
                    params[base + static_cast<size_t>(j) * shape.vocab + v];
            }
        }
        return out;
    }

    // mlp: features -> hidden tanh layer -> per-position linear heads
    const int fin = shape.input_features();
    const int block = shape.vocab + 1 + shape.pos_features;
    std::vector<double> feat(static_cast<size_t>(fin), 0.0);
    for (int n = 0; n < shape.seq_len; ++n) {
        const size_t off = static_cast<size_t>(n) * block;
        feat[off + static_cast<size_t>(xt.tokens[static_cast<size_t>(n)])] = 1.0;
        for (int i = 0; i < shape.pos_features; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(i / 2 * 2) /
                                                      shape.pos_features);
            const double angle = n * freq;
            feat[off + static_cast<size_t>(shape.vocab + 1 + i)] =
                (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }

    const size_t w1 = 0;
    const size_t b1 = static_cast<size_t>(fin) * shape.hidden;
    const size_t heads = b1 + static_cast<size_t>(shape.hidden);
    std::vector<Scalar> h;
    h.reserve(static_cast<size_t>(shape.hidden));
    for (int j = 0; j < shape.hidden; ++j) {
        Scalar acc = params[b1 + static_cast<size_t>(j)];
        for (int i = 0; i < fin; ++i) {
            if (feat[static_cast<size_t>(i)] != 0.0) {
                acc += params[w1 + static_cast<size_t>(i) * shape.hidden + j] *
                       feat[static_cast<size_t>(i)];
            }
        }
        using std::tanh;
        h.push_back(tanh(acc));
    }
    const size_t head_size = static_cast<size_t>(shape.hidden) * shape.vocab + shape.vocab;
    for (int n = 0; n < shape.seq_len; ++n) {
        const size_t hw = heads + static_cast<size_t>(n) * head_size;
        const size_t hb = hw + static_cast<size_t>(shape.hidden) * shape.vocab;
        for (int v = 0; v < shape.vocab; ++v) {
            Scalar acc = params[hb + static_cast<size_t>(v)];
            for (int j = 0; j < shape.hidden; ++j) {
                acc += params[hw + static_cast<size_t>(j) * shape.vocab + v] *
                       h[static_cast<size_t>(j)];
            }
            out.row(n)[static_cast<size_t>(v)] = acc;
        }
    }
    return out;
}

inline DenoiserOutput denoiser_logits(const PolicySnapshot& policy, const MaskedSequence& xt) {
    return denoiser_logits<double>(policy.shape, std::span<const double>(policy.params), xt,
                                   policy.tag);
}

// ---------------------------------------------------------------------------
// log-probabilities
// ---------------------------------------------------------------------------

template <class Scalar>
std::vector<Scalar> log_softmax(std::span<const Scalar> row) {
    double hi = value_of(row[0]);
    for (const Scalar& x : row) {
        hi = std::fmax(hi, value_of(x));
    }
    Scalar tot = row[0] - row[0];  // zero of the right scalar type
    using std::exp;
    for (const Scalar& x : row) {
        tot += exp(x - hi);
    }
    using std::log;
    const Scalar lse = log(tot) + hi;
    std::vector<Scalar> out;
    out.reserve(row.size());
    for (const Scalar& x : row) {
        out.push_back(x - lse);
    }
    return out;
}

template <class Scalar>
std::vector<double> softmax_values(std::span<const Scalar> row, double temperature = 1.0) {
    std::vector<double> p(row.size());
    if (temperature <= 0.0) {
        // limit case: all mass on the argmax, ties to the lowest index
        size_t best = 0;
        for (size_t v = 1; v < row.size(); ++v) {
            if (value_of(row[v]) > value_of(row[best])) {
                best = v;
            }
        }
        p[best] = 1.0;
        return p;
    }
    double hi = value_of(row[0]) / temperature;
    for (size_t v = 0; v < row.size(); ++v) {
        hi = std::fmax(hi, value_of(row[v]) / temperature);
    }
    double tot = 0.0;
    for (size_t v = 0; v < row.size(); ++v) {
        p[v] = std::exp(value_of(row[v]) / temperature - hi);
        tot += p[v];
    }
    for (double& x : p) {
        x /= tot;
    }
    return p;
}

// Sum over `positions` of log softmax(logits[n])[x0[n]]; the factorized
// sequence-level denoising log-probability restricted to those positions.
template <class Scalar>
Scalar seq_log_prob(const DenoiserOutputT<Scalar>& out, const TokenSequence& x0,
                    std::span<const int> positions) {
    Tape* tape = nullptr;
    if constexpr (std::is_same_v<Scalar, Var>) {
        tape = out.logits.empty() ? nullptr : out.logits[0].tape();
    }
    Scalar total = detail::make_scalar<Scalar>(0.0, tape);
    for (int n : positions) {
        if (n < 0 || n >= out.seq_len) {
            throw std::invalid_argument("seq_log_prob: position out of range");
        }
        if (!std::binary_search(out.masked_positions.begin(), out.masked_positions.end(), n)) {
            throw std::invalid_argument("seq_log_prob: position " + std::to_string(n) +
                                        " was not masked in the producing sequence");
        }
        const std::vector<Scalar> ls = log_softmax(out.row(n));
        total += ls[static_cast<size_t>(x0.tokens[static_cast<size_t>(n)])];
    }
    return total;
}

template <class Scalar>
Scalar seq_log_prob(const DenoiserOutputT<Scalar>& out, const TokenSequence& x0) {
    return seq_log_prob(out, x0, std::span<const int>(out.masked_positions));
}

// ---------------------------------------------------------------------------
// ELBO estimator
// ---------------------------------------------------------------------------

enum class MaskMode { exact_count, bernoulli };
enum class WeightSchedule { inv_t, constant };

// Weight attached to one masked draw. The 1/t schedule is applied to the realized
// masked fraction m / N_c, so a draw that masks m tokens weighs N_c / m.
inline double time_weight(WeightSchedule w, int completion_len, int masked) {
    if (w == WeightSchedule::constant) {
        return 1.0;
    }
    return static_cast<double>(completion_len) / static_cast<double>(masked);
}

struct TimeSample {
    MaskedSequence xt;
    double weight = 1.0;
};

// One accepted (t, mask) draw: t ~ U(0,1), masks with zero masked tokens are
// rejection-resampled so every sample supervises at least one token.
inline TimeSample sample_time_mask(const TokenSequence& x0, int mask_id, MaskMode mode,
                                   WeightSchedule w, RngStream& rng) {
    if (x0.completion_len() < 1) {
        throw std::invalid_argument("sample_time_mask: empty completion");
    }
    for (;;) {
        const double t = rng.next_double();
        MaskedSequence xt = mode == MaskMode::exact_count ? forward_mask(x0, mask_id, t, rng)
                                                          : bernoulli_mask(x0, mask_id, t, rng);
        if (xt.masked_count() == 0) {
            continue;
        }
        TimeSample s;
        s.weight = time_weight(w, x0.completion_len(), xt.masked_count());
        s.xt = std::move(xt);
        return s;
    }
}

template <class Scalar>
Scalar elbo_from_samples(const PolicyShape& shape, std::span<const Scalar> params,
                         const TokenSequence& x0, std::span<const TimeSample> samples,
                         PolicyTag source = PolicyTag::theta) {
    Tape* tape = detail::tape_of(params);
    Scalar total = detail::make_scalar<Scalar>(0.0, tape);
    for (const TimeSample& s : samples) {
        const DenoiserOutputT<Scalar> out = denoiser_logits(shape, params, s.xt, source);
        total += seq_log_prob(out, x0) * s.weight;
    }
    return total * (1.0 / static_cast<double>(samples.size()));
}

// Monte-Carlo ELBO estimate with K draws. The same drawn (t, mask) pairs can be
// replayed across policies by sampling them once and calling elbo_from_samples.
inline double elbo_estimate(const PolicySnapshot& policy, const TokenSequence& x0, int k,
                            WeightSchedule w, MaskMode mode, RngStream& rng) {
    if (k < 1) {
        throw std::invalid_argument("elbo_estimate: K must be >= 1");
    }
    std::vector<TimeSample> samples;
    samples.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        samples.push_back(sample_time_mask(x0, policy.shape.mask_id(), mode, w, rng));
    }
    return elbo_from_samples<double>(policy.shape, std::span<const double>(policy.params), x0,
                                     samples, policy.tag);
}

inline double elbo_estimate(const PolicySnapshot& policy, const TokenSequence& x0, int k,
                            RngStream& rng) {
    return elbo_estimate(policy, x0, k, WeightSchedule::inv_t, MaskMode::exact_count, rng);
}

}  // namespace gdsd
