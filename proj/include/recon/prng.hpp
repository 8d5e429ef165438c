// Seeded random number generation with cross-platform deterministic output.
// std::mt19937_64 is fully specified by the standard; the distribution
// helpers below avoid std::*_distribution, whose output is
// implementation-defined.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace recon {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0, 1), 53-bit mantissa.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::size_t uniform_index(std::size_t n) {
        std::size_t i = static_cast<std::size_t>(uniform() * static_cast<double>(n));
        return i < n ? i : n - 1;
    }

    // Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// splitmix64; used for stateless coordinate hashing (procedural noise).
inline std::uint64_t hash_u64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_coords(std::int64_t x, std::int64_t y, std::int64_t z,
                                 std::uint64_t seed) {
    std::uint64_t h = hash_u64(seed ^ 0x8f1bbcdcull);
    h = hash_u64(h ^ static_cast<std::uint64_t>(x));
    h = hash_u64(h ^ static_cast<std::uint64_t>(y));
    h = hash_u64(h ^ static_cast<std::uint64_t>(z));
    return h;
}

}  // namespace recon
