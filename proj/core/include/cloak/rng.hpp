#pragma once

#include <cstdint>
#include <random>

#include "cloak/tensor.hpp"

namespace cloak {

using Rng = std::mt19937_64;

// Stateless 64-bit mix; used to derive independent stream seeds from
// (seed, purpose, index) tuples.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return mix_seed(mix_seed(mix_seed(seed) ^ a) ^ b);
}

inline Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t(shape);
    for (double& v : t.values()) v = dist(rng);
    return t;
}

inline Tensor rand_uniform(const Shape& shape, Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor t(shape);
    for (double& v : t.values()) v = dist(rng);
    return t;
}

inline int uniform_int(Rng& rng, int lo, int hi_exclusive) {
    return std::uniform_int_distribution<int>(lo, hi_exclusive - 1)(rng);
}

}  // namespace cloak
