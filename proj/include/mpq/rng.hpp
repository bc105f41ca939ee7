#pragma once

#include <array>
#include <cstdint>

#include "mpq/matrix.hpp"

namespace mpq {

// xoshiro256++ seeded through splitmix64. The generator is spelled out here
// rather than taken from <random> so the stream is identical on every
// platform and standard-library version; seeded runs must be bit-reproducible.
struct Rng {
    explicit Rng(uint64_t seed);

    uint64_t next_u64();
    // Uniform in [0, 1) with 53 random bits.
    double uniform01();
    // Standard normal via the Marsaglia polar method (caches the spare).
    double normal();
    // Uniform integer in [0, n); unbiased by rejection.
    uint64_t below(uint64_t n);

    // Child generator for an independent, documented sub-stream. Forking the
    // same (seed, stream) pair always yields the same child stream.
    Rng fork(uint64_t stream) const;

    uint64_t seed() const { return seed_; }

  private:
    std::array<uint64_t, 4> s_{};
    uint64_t seed_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

Matrix gaussian_matrix(Rng& rng, int rows, int cols, double mean = 0.0, double sd = 1.0);

// Fisher-Yates shuffle with rng.below; deterministic given the rng state.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (size_t i = v.size(); i > 1; --i) {
        size_t j = static_cast<size_t>(rng.below(i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace mpq
