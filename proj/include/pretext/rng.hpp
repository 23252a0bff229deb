#pragma once
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pretext/errors.hpp"

namespace pretext {

// FNV-1a 64-bit. Used for content hashes and for deriving per-item seeds.
inline uint64_t fnv1a(std::string_view bytes, uint64_t seed = 14695981039346656037ULL) {
    uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    return splitmix64(s);
}

// Per-item seed for fan-out drivers: independent of worker count and order.
inline uint64_t derive_seed(uint64_t global_seed, std::string_view item_id) {
    return mix_seed(global_seed, fnv1a(item_id));
}

// Deterministic RNG wrapper. All draws are hand-rolled from the raw 64-bit
// stream so results do not depend on libstdc++ distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Rejection-free for our toy ranges is not
    // worth the complexity; use rejection sampling for exact uniformity.
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) throw ContractError("uniform_int: n must be positive");
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; deterministic, no cached spare state to keep draws
    // independent of call history shape.
    double gaussian() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    std::string state_string() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void restore_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (is.fail()) throw ParseError("rng: invalid state string");
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace pretext
