#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string_view>

namespace safer {

// xoshiro256** with splitmix64 seeding. Deterministic across platforms and
// serializable as four u64 words; std::<random> distributions are
// implementation-defined, which would break the bit-identity contracts.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& word : state_) word = splitmix64(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Lemire-style rejection-free enough at our scales; keep the plain
        // modulo-free multiply-shift for determinism and speed.
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller (deterministic; always consumes two draws).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal truncated to +-2 sigma by rejection.
    double truncated_normal(double stddev) {
        for (;;) {
            const double z = normal();
            if (std::fabs(z) <= 2.0) return stddev * z;
        }
    }

    std::array<std::uint64_t, 4> state() const { return state_; }
    void set_state(const std::array<std::uint64_t, 4>& s) { state_ = s; }

    // Stateless stream derivation: independent child streams from a base seed
    // and a purpose tag, so resume-from-checkpoint replays identical draws.
    static std::uint64_t derive(std::uint64_t seed, std::string_view tag,
                                std::uint64_t a = 0, std::uint64_t b = 0) {
        std::uint64_t h = seed ^ 0x9e3779b97f4a7c15ull;
        for (const char c : tag) h = mix(h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
        h = mix(h ^ a);
        h = mix(h ^ b);
        return h;
    }

  private:
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static std::uint64_t rotl(std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    std::array<std::uint64_t, 4> state_{};
};

}  // namespace safer
