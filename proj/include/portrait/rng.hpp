#pragma once

#include <cstdint>
#include <random>

namespace portrait {

// Deterministic random source. Every stochastic component of the system draws
// from this class so that runs are reproducible from a 64-bit seed alone.
//
// The generator is std::mt19937_64 (fully specified by the C++ standard, so
// sequences are identical across platforms). Gaussians come from a Box-Muller
// transform over the raw 53-bit uniforms; std::normal_distribution is avoided
// because its output is implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    // Uniform integer in [0, n). Modulo bias is negligible for n << 2^64.
    uint64_t uniform_int(uint64_t n) { return gen_() % n; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace portrait
