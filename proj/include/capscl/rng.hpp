#pragma once

#include <cstdint>
#include <random>

namespace capscl {

/// Seedable generator threaded explicitly through every stochastic op.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    /// Uniform in [lo, hi).
    double uniform(double lo = 0.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    /// Uniform in the open interval (0, 1).
    double uniform_open() {
        double u = 0.0;
        while (u <= 0.0) u = uniform();
        return u;
    }

    /// Standard Gumbel(0, 1) sample.
    double gumbel();

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform integer in [lo, hi].
    std::int64_t integer(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Independent child stream; advances this generator by one draw.
    Rng split() { return Rng(engine_() ^ 0x9e3779b97f4a7c15ULL); }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace capscl
