#pragma once

// Seeded deterministic RNG helpers. Derivations from mt19937_64 raw draws are
// spelled out so streams are identical across standard libraries.

#include <cstdint>
#include <random>

namespace pk {

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) { return engine_() % n; }

    bool bernoulli(double p) { return uniform() < p; }

    // Rademacher +/-1
    int sign() { return (engine_() & 1u) ? 1 : -1; }

  private:
    std::mt19937_64 engine_;
};

}  // namespace pk
