#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "bitdance/matrix.hpp"

namespace bitdance {

// Explicit random stream. Every stochastic operation takes one of these by
// reference; identical seeds give identical draws on every platform because
// the engine sequence is fixed by the standard and the variate transforms are
// implemented here rather than by the (implementation-defined) distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Standard normal via Box-Muller; consumes exactly two engine outputs.
    double normal();
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    bool bernoulli(double p) { return uniform() < p; }

    Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0);

    // Splits off an independent stream (used for per-request generators).
    Rng fork() { return Rng(engine_()); }

    std::string serialize() const;
    static Rng deserialize(const std::string& state);

    friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace bitdance
