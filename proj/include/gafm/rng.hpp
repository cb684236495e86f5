#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace gafm {

// mt19937_64 with hand-rolled uniform / normal transforms. The standard
// engine's output sequence is specified, the standard distributions are not,
// so sampling here is reproducible for a given seed on any implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed), seed_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() {
        return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, bound) by rejection.
    uint64_t uniform_below(uint64_t bound) {
        const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        uint64_t v;
        do {
            v = eng_();
        } while (v >= limit);
        return v % bound;
    }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive range
        return lo + static_cast<int64_t>(uniform_below(static_cast<uint64_t>(hi - lo + 1)));
    }

    // Box-Muller; consumes two uniforms per pair, caches the second value.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derives an independent deterministic stream, e.g. one per fold.
    Rng fork(uint64_t salt) const {
        uint64_t h = seed_ ^ (salt * 0x9e3779b97f4a7c15ULL + 0x165667b19e3779f9ULL);
        h ^= h >> 33;
        h *= 0xff51afd7ed558ccdULL;
        h ^= h >> 33;
        return Rng(h);
    }

private:
    std::mt19937_64 eng_;
    uint64_t seed_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace gafm
