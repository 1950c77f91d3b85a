#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gdsd {

using ParamVector = std::vector<double>;
using GradVector = std::vector<double>;

inline void check_params_finite(std::span<const double> p, const char* who) {
    for (size_t i = 0; i < p.size(); ++i) {
        if (!std::isfinite(p[i])) {
            throw std::runtime_error(std::string(who) + ": non-finite parameter at index " +
                                     std::to_string(i));
        }
    }
}

// Reverse-mode tape. Each node stores its value and the local partials w.r.t. at
// most two parents; the backward sweep is a single reverse pass. Every node value
// is checked on creation so a non-finite intermediate fails fast with the name of
// the operation that produced it.
class Tape {
public:
    struct Node {
        double value = 0.0;
        int p0 = -1;
        int p1 = -1;
        double d0 = 0.0;
        double d1 = 0.0;
    };

    int add_leaf(double v, const char* op = "leaf") {
        check_(v, op);
        nodes_.push_back(Node{v, -1, -1, 0.0, 0.0});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int add_unary(double v, int p0, double d0, const char* op) {
        check_(v, op);
        nodes_.push_back(Node{v, p0, -1, d0, 0.0});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int add_binary(double v, int p0, double d0, int p1, double d1, const char* op) {
        check_(v, op);
        nodes_.push_back(Node{v, p0, p1, d0, d1});
        return static_cast<int>(nodes_.size()) - 1;
    }

    double value(int idx) const { return nodes_[static_cast<size_t>(idx)].value; }
    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }
    void reserve(size_t n) { nodes_.reserve(n); }

    // Adjoints of all nodes with seed dL/droot = 1.
    std::vector<double> backward(int root) const {
        std::vector<double> adj(nodes_.size(), 0.0);
        adj[static_cast<size_t>(root)] = 1.0;
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            const Node& n = nodes_[static_cast<size_t>(i)];
            const double a = adj[static_cast<size_t>(i)];
            if (a == 0.0) {
                continue;
            }
            if (n.p0 >= 0) {
                adj[static_cast<size_t>(n.p0)] += a * n.d0;
            }
            if (n.p1 >= 0) {
                adj[static_cast<size_t>(n.p1)] += a * n.d1;
            }
        }
        return adj;
    }

private:
    void check_(double v, const char* op) const {
        if (!std::isfinite(v)) {
            throw std::runtime_error("autodiff: non-finite value produced by '" + std::string(op) +
                                     "' at node " + std::to_string(nodes_.size()));
        }
    }

    std::vector<Node> nodes_;
};

// Value-plus-handle into a tape. Behaves like a double in arithmetic expressions;
// templated numeric code instantiates with either Var or double.
class Var {
public:
    Var() = default;
    Var(Tape* tape, int idx) : tape_(tape), idx_(idx) {}

    double value() const { return tape_->value(idx_); }
    int index() const { return idx_; }
    Tape* tape() const { return tape_; }

    Var& operator+=(const Var& o) { return *this = *this + o; }
    Var& operator-=(const Var& o) { return *this = *this - o; }
    Var& operator*=(const Var& o) { return *this = *this * o; }

    friend Var operator+(const Var& a, const Var& b) {
        return Var(a.tape_, a.tape_->add_binary(a.value() + b.value(), a.idx_, 1.0, b.idx_, 1.0, "add"));
    }
    friend Var operator-(const Var& a, const Var& b) {
        return Var(a.tape_, a.tape_->add_binary(a.value() - b.value(), a.idx_, 1.0, b.idx_, -1.0, "sub"));
    }
    friend Var operator*(const Var& a, const Var& b) {
        return Var(a.tape_,
                   a.tape_->add_binary(a.value() * b.value(), a.idx_, b.value(), b.idx_, a.value(), "mul"));
    }
    friend Var operator/(const Var& a, const Var& b) {
        const double bv = b.value();
        return Var(a.tape_, a.tape_->add_binary(a.value() / bv, a.idx_, 1.0 / bv, b.idx_,
                                                -a.value() / (bv * bv), "div"));
    }
    friend Var operator-(const Var& a) {
        return Var(a.tape_, a.tape_->add_unary(-a.value(), a.idx_, -1.0, "neg"));
    }

    friend Var operator+(const Var& a, double c) {
        return Var(a.tape_, a.tape_->add_unary(a.value() + c, a.idx_, 1.0, "add_const"));
    }
    friend Var operator+(double c, const Var& a) { return a + c; }
    friend Var operator-(const Var& a, double c) { return a + (-c); }
    friend Var operator-(double c, const Var& a) {
        return Var(a.tape_, a.tape_->add_unary(c - a.value(), a.idx_, -1.0, "rsub_const"));
    }
    friend Var operator*(const Var& a, double c) {
        return Var(a.tape_, a.tape_->add_unary(a.value() * c, a.idx_, c, "mul_const"));
    }
    friend Var operator*(double c, const Var& a) { return a * c; }
    friend Var operator/(const Var& a, double c) { return a * (1.0 / c); }

    friend Var log(const Var& a) {
        return Var(a.tape_, a.tape_->add_unary(std::log(a.value()), a.idx_, 1.0 / a.value(), "log"));
    }
    friend Var exp(const Var& a) {
        const double e = std::exp(a.value());
        return Var(a.tape_, a.tape_->add_unary(e, a.idx_, e, "exp"));
    }
    friend Var tanh(const Var& a) {
        const double t = std::tanh(a.value());
        return Var(a.tape_, a.tape_->add_unary(t, a.idx_, 1.0 - t * t, "tanh"));
    }
    friend Var min(const Var& a, const Var& b) { return a.value() <= b.value() ? a : b; }
    friend Var max(const Var& a, const Var& b) { return a.value() >= b.value() ? a : b; }

private:
    Tape* tape_ = nullptr;
    int idx_ = -1;
};

inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.value(); }
inline double min(double a, double b) { return a <= b ? a : b; }
inline double max(double a, double b) { return a >= b ? a : b; }

// Exact reverse-mode gradient of loss_fn at p. loss_fn is any callable taking a
// std::span<const Var> over the parameters and returning the scalar loss as a Var.
template <class LossFn>
GradVector grad(LossFn&& loss_fn, std::span<const double> p) {
    check_params_finite(p, "grad");
    Tape tape;
    tape.reserve(p.size() * 2 + 1024);
    std::vector<Var> vars;
    vars.reserve(p.size());
    for (double v : p) {
        vars.emplace_back(&tape, tape.add_leaf(v, "param"));
    }
    const Var loss = loss_fn(std::span<const Var>(vars));
    const std::vector<double> adj = tape.backward(loss.index());
    GradVector g(p.size());
    for (size_t i = 0; i < p.size(); ++i) {
        g[i] = adj[static_cast<size_t>(vars[i].index())];
    }
    return g;
}

// Central finite differences, (f(p + step e_i) - f(p - step e_i)) / (2 step).
// Independent of the tape: loss_fn here runs on plain doubles.
template <class LossFn>
GradVector fd_grad(LossFn&& loss_fn, std::span<const double> p, double step) {
    if (!(step > 0.0)) {
        throw std::invalid_argument("fd_grad: step must be positive");
    }
    check_params_finite(p, "fd_grad");
    ParamVector work(p.begin(), p.end());
    GradVector g(p.size());
    for (size_t i = 0; i < p.size(); ++i) {
        const double saved = work[i];
        work[i] = saved + step;
        const double fp = loss_fn(std::span<const double>(work));
        work[i] = saved - step;
        const double fm = loss_fn(std::span<const double>(work));
        work[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw std::runtime_error("fd_grad: non-finite loss evaluation at coordinate " +
                                     std::to_string(i));
        }
        g[i] = (fp - fm) / (2.0 * step);
    }
    return g;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) {
        return na == nb ? 1.0 : 0.0;
    }
    return dot(a, b) / (na * nb);
}

// max_i |a_i - b_i| / max(|b_i|, floor); used for gradient cross-checks.
inline double max_relative_error(std::span<const double> a, std::span<const double> b,
                                 double floor = 1e-6) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double denom = std::fmax(std::fabs(b[i]), floor);
        worst = std::fmax(worst, std::fabs(a[i] - b[i]) / denom);
    }
    return worst;
}

}  // namespace gdsd
