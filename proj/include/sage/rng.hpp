#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

#include "sage/common.hpp"

namespace sage {

// Deterministic RNG. Every random decision in the engine flows through one
// of these, derived from the run seed by name, so two runs with the same
// config produce bit-identical outputs. Gaussians are generated with an
// explicit Box-Muller transform rather than std::normal_distribution, whose
// output sequence is implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed), seed_(seed) {}

    // Derive an independent child stream. The child's seed depends only on
    // (parent seed, label, index), never on how much the parent was used.
    Rng child(std::string_view label, uint64_t index = 0) const {
        uint64_t h = fnv1a(label, seed_ ^ 0x9e3779b97f4a7c15ull);
        h = fnv1a(&index, sizeof(index), h);
        return Rng(h);
    }

    uint64_t seed() const { return seed_; }

    uint64_t bits() { return eng_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        // Rejection sampling keeps the distribution exact.
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do {
            v = eng_();
        } while (v >= limit);
        return v % n;
    }

    double normal() {
        // Box-Muller, no cached second value so the stream position is
        // a pure function of call count.
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    double exponential(double rate) {
        double u = uniform();
        while (u <= 1e-300) u = uniform();
        return -std::log(u) / rate;
    }

    // Lognormal parameterized by its median and log-space sigma.
    double lognormal_median(double median, double sigma) {
        return median * std::exp(sigma * normal());
    }

    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    uint64_t seed_;
};

}  // namespace sage
