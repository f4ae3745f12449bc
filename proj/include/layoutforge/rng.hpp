#pragma once

#include <cmath>
#include <cstdint>

#include "layoutforge/math.hpp"

namespace layoutforge {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Mix an arbitrary number of integer tags into one stream seed. Used to
/// derive independent, schedule-free substreams: rng for (seed, step, pixel)
/// never depends on evaluation order.
inline uint64_t mix_seed(uint64_t a) { return splitmix64(a); }
template <typename... Rest>
inline uint64_t mix_seed(uint64_t a, uint64_t b, Rest... rest) {
    return mix_seed(splitmix64(a ^ (b + 0x632be59bd9b4e019ull)), rest...);
}

/// PCG32 generator. Small state, fast, reproducible across platforms.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0x853c49e6748fea9bull) {
        state_ = 0u;
        inc_ = (seed << 1u) | 1u;
        next_u32();
        state_ += splitmix64(seed);
        next_u32();
    }

    uint32_t next_u32() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ull + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
    }

    /// Uniform double in [0, 1).
    double uniform() {
        return next_u32() * (1.0 / 4294967296.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n).
    uint32_t below(uint32_t n) { return static_cast<uint32_t>(uniform() * n) % n; }

    /// Standard normal via Box-Muller; caches the second draw.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-300) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * kPi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    Vec3 normal_vec3() { return {normal(), normal(), normal()}; }

  private:
    uint64_t state_ = 0;
    uint64_t inc_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace layoutforge
