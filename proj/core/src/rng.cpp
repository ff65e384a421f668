#include "csm/rng.h"

#include <cmath>

namespace csm {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream)
    : seed_(seed), stream_(stream), engine_(splitmix64(seed ^ splitmix64(stream + 0x51ed270b27c4f1a3ULL))) {}

Rng Rng::split(std::uint64_t stream_id) const {
    return Rng(seed_, splitmix64(stream_ * 0x2545f4914f6cdd1dULL + stream_id + 1));
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform_open() {
    // (k + 0.5) / 2^53 for k in [0, 2^53) never touches 0 or 1.
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
}

double Rng::normal(double mean, double stddev) {
    // Box-Muller on open uniforms; one value per call keeps the stream position predictable.
    const double u1 = uniform_open();
    const double u2 = uniform_open();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
}

} // namespace csm
