#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <span>

namespace csm {

// Seeded 64-bit generator. Every stochastic op takes one explicitly; there is no global state.
// split() derives an independent stream so parallel or per-task work never shares a sequence.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

    Rng split(std::uint64_t stream_id) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

    std::uint64_t next_u64() { return engine_(); }
    // Uniform on [0, 1) with 53 random bits.
    double uniform();
    // Uniform on the open interval (0, 1).
    double uniform_open();
    double normal(double mean = 0.0, double stddev = 1.0);
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    template <typename T>
    void shuffle(std::span<T> items) {
        // Fisher-Yates driven by below(); std::shuffle's draw pattern is implementation-defined.
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[below(i)]);
        }
    }

    std::mt19937_64 & engine() { return engine_; }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

} // namespace csm
