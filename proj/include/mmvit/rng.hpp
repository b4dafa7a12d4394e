#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace mmvit {

// Counter-based pseudo-random generator. The state walks a Weyl sequence
// (increment 0x9E3779B97F4A7C15) and every output is a finalized mix of the
// counter, i.e. the splitmix64 construction. The integer stream depends only
// on the seed and the call index, never on platform word size or libm, so
// identical seeds give identical streams everywhere. normal() layers a polar
// Box-Muller transform on top (IEEE-754 double arithmetic plus sqrt/log).
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        return mix(state_);
    }

    // Uniform in [0, 1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Marsaglia polar method; the rejected draws stay part of the stream so
    // the sequence is reproducible. Caches the spare deviate.
    double normal(double mean = 0.0, double stddev = 1.0) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double r = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * r;
        has_spare_ = true;
        return mean + stddev * u * r;
    }

    // Integer in [0, n). n must be positive. Uses rejection to stay unbiased.
    uint64_t below(uint64_t n) {
        const uint64_t limit = ~0ull - ~0ull % n;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Derives an independent stream: the substream seed is the mix of this
    // generator's seed and the stream id. Forking does not advance the parent.
    Rng fork(uint64_t stream_id) const { return Rng(mix(seed_base() ^ mix(stream_id + 0x632BE59BD9B4E019ull))); }

    static uint64_t mix(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

  private:
    uint64_t seed_base() const { return state_; }

    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// FNV-1a, used to key parameter init streams by parameter name so that the
// same-named parameter draws the same values in every model variant.
inline uint64_t fnv1a(const char* s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (; *s; ++s) h = (h ^ static_cast<unsigned char>(*s)) * 0x100000001B3ull;
    return h;
}

inline uint64_t fnv1a(const std::string& s) { return fnv1a(s.c_str()); }

}  // namespace mmvit
