#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace occ {

// Deterministic RNG with hand-rolled distributions. std:: distribution objects are
// implementation-defined, so every draw here is specified in terms of the raw
// mt19937_64 stream and reproduces bit-exactly across compilers.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed), eng_(seed) {}

    uint64_t u64() { return eng_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int uniform_int(int n) { return static_cast<int>(eng_() % static_cast<uint64_t>(n)); }

    // Box-Muller, cosine branch only; stateless between calls.
    double normal() {
        double u = 0.0;
        while (u <= 0.0) u = uniform();
        double v = uniform();
        return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * 3.14159265358979323846 * v);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Independent child stream keyed on (seed, stream) via splitmix64.
    Rng fork(uint64_t stream) const {
        uint64_t z = seed_ + 0x9E3779B97F4A7C15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return Rng(z ^ (z >> 31));
    }

private:
    uint64_t seed_;
    std::mt19937_64 eng_;
};

}  // namespace occ
