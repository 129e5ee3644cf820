#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace dpopt::rng {

// Seed mixing for decorrelated substreams (splitmix64 finalizer).
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    return mix64(a ^ (mix64(b) + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

// FNV-1a, used for stream tags and vocab/genotype hashes.
inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t master, std::string_view tag, std::uint64_t index = 0) {
    return mix64(mix64(master, fnv1a(tag)), index);
}

// Deterministic random stream. mt19937_64 is fully specified by the standard,
// and the distribution transforms below are pinned here, so sequences are
// bit-identical across platforms and standard libraries.
class Stream {
public:
    explicit Stream(std::uint64_t seed) : gen_(seed == 0 ? 0x9e3779b97f4a7c15ULL : seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform on the open interval (0, 1); safe to pass through log().
    double uniform() { return (static_cast<double>(gen_() >> 11) + 0.5) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection to avoid modulo bias.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller (one value per pair of uniforms).
    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Standard Gumbel: -log(-log(U)).
    double gumbel() { return -std::log(-std::log(uniform())); }

private:
    std::mt19937_64 gen_;
};

}  // namespace dpopt::rng
