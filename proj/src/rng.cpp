#include "gatecraft/rng.hpp"

#include <sstream>
#include <stdexcept>

namespace gatecraft {

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

Rng Rng::derive(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    Rng rng;
    rng.engine_.seed(seq);
    return rng;
}

double Rng::uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

double Rng::uniform_open(double eps) {
    return std::uniform_real_distribution<double>(eps, 1.0 - eps)(engine_);
}

double Rng::normal(double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
}

std::size_t Rng::index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

std::string Rng::state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::set_state(const std::string& state) {
    std::istringstream is(state);
    std::mt19937_64 restored;
    is >> restored;
    if (is.fail()) throw std::invalid_argument("Rng::set_state: malformed engine state");
    engine_ = restored;
}

}  // namespace gatecraft
