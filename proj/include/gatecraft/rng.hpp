#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace gatecraft {

/// Seeded random source. Every stochastic routine takes one explicitly so runs
/// are reproducible from the configured seed alone.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    /// Independent stream derived from (seed, stream id).
    static Rng derive(std::uint64_t seed, std::uint64_t stream);

    double uniform();
    /// Uniform on (eps, 1 - eps).
    double uniform_open(double eps);
    double normal(double mean = 0.0, double stddev = 1.0);
    std::size_t index(std::size_t n);

    std::mt19937_64& engine() noexcept { return engine_; }

    std::string state() const;
    void set_state(const std::string& state);

private:
    std::mt19937_64 engine_;
};

}  // namespace gatecraft
