#pragma once

#include <cmath>
#include <cstdint>

namespace mapfuse {

// SplitMix64 generator. Chosen over the std engines so that streams are
// bit-reproducible across standard library versions; the distribution
// transforms below are part of the contract, not implementation detail.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    float next_float() { return static_cast<float>(next_double()); }

    // Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        if (hi <= lo) return lo;
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        // Rejection sampling to avoid modulo bias.
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return lo + static_cast<int64_t>(v % span);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Marsaglia polar method; caches the second deviate.
    double normal(double mean = 0.0, double stddev = 1.0) {
        if (has_cached_) {
            has_cached_ = false;
            return mean + stddev * cached_;
        }
        double u, v, s;
        do {
            u = 2.0 * next_double() - 1.0;
            v = 2.0 * next_double() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double m = std::sqrt(-2.0 * std::log(s) / s);
        cached_ = v * m;
        has_cached_ = true;
        return mean + stddev * u * m;
    }

    // Derives an independent substream; children with distinct ids are
    // decorrelated regardless of draw order on the parent.
    Rng child(uint64_t stream_id) const {
        uint64_t z = state_ ^ (0x9e3779b97f4a7c15ull * (stream_id + 0x632be59bd9b4e019ull));
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return Rng(z ^ (z >> 31));
    }

  private:
    uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace mapfuse
