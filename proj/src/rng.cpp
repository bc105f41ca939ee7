#include "mpq/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace mpq {

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(uint64_t seed) : seed_(seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
}

uint64_t Rng::next_u64() {
    uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u, v, s;
    do {
        u = 2.0 * uniform01() - 1.0;
        v = 2.0 * uniform01() - 1.0;
        s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
}

uint64_t Rng::below(uint64_t n) {
    if (n == 0) throw std::runtime_error("Rng::below: n must be positive");
    uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
        uint64_t r = next_u64();
        if (r >= threshold) return r % n;
    }
}

Rng Rng::fork(uint64_t stream) const {
    // Golden-ratio stride keeps consecutive stream ids far apart in seed space.
    uint64_t x = seed_ ^ (0x9E3779B97F4A7C15ULL * (stream + 1));
    return Rng(splitmix64(x));
}

Matrix gaussian_matrix(Rng& rng, int rows, int cols, double mean, double sd) {
    if (rows < 1 || cols < 1) throw std::runtime_error("gaussian_matrix: empty shape");
    Matrix m(rows, cols);
    for (auto& v : m.data) v = mean + sd * rng.normal();
    return m;
}

}  // namespace mpq
