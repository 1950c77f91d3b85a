#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace gdsd {

// Deterministic splitmix64 stream. std:: engines and distributions are avoided on
// purpose: every draw here is fully specified, so runs replay bit-identically on
// any platform and any toolchain.
class RngStream {
public:
    explicit RngStream(uint64_t seed) : state_(seed) {}

    // Child stream keyed by `key`. Children of distinct keys (and the parent) do not
    // share draws.
    RngStream substream(uint64_t key) const {
        uint64_t s = mix_(state_ + 0x9e3779b97f4a7c15ULL * (2u * key + 1u));
        return RngStream(mix_(s ^ 0xd1b54a32d192ed03ULL));
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix_(state_);
    }

    // Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    int next_int(int n) {
        if (n <= 0) {
            throw std::invalid_argument("RngStream::next_int: n must be positive");
        }
        const uint64_t bound = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        uint64_t r = next_u64();
        while (r >= limit) {
            r = next_u64();
        }
        return static_cast<int>(r % bound);
    }

    // Standard normal via Box-Muller (no cached spare, one value per call).
    double next_gaussian() {
        const double u = 1.0 - next_double();
        const double v = next_double();
        return std::sqrt(-2.0 * std::log(u)) * std::cos(6.283185307179586 * v);
    }

    // First k entries of a uniformly random permutation of {0..n-1}, ascending order.
    std::vector<int> sample_without_replacement(int n, int k) {
        if (k < 0 || k > n) {
            throw std::invalid_argument("RngStream::sample_without_replacement: bad k");
        }
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            idx[static_cast<size_t>(i)] = i;
        }
        for (int i = 0; i < k; ++i) {
            const int j = i + next_int(n - i);
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        std::vector<int> out(idx.begin(), idx.begin() + k);
        for (size_t a = 1; a < out.size(); ++a) {
            int key = out[a];
            size_t b = a;
            while (b > 0 && out[b - 1] > key) {
                out[b] = out[b - 1];
                --b;
            }
            out[b] = key;
        }
        return out;
    }

private:
    static uint64_t mix_(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    uint64_t state_;
};

}  // namespace gdsd
