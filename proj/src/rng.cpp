#include "shgvqa/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace shgvqa {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over seed ^ rotated stream
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t hash_string(std::string_view s) {
    // FNV-1a
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::int64_t Rng::uniform_int(std::int64_t n) {
    if (n <= 0) {
        throw std::invalid_argument("Rng::uniform_int: n must be positive");
    }
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return static_cast<std::int64_t>(x % un);
}

double Rng::normal() {
    if (have_cached_normal_) {
        have_cached_normal_ = false;
        return cached_normal_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    cached_normal_ = r * std::sin(theta);
    have_cached_normal_ = true;
    return r * std::cos(theta);
}

Rng Rng::fork(std::uint64_t stream) const {
    // Derived from the construction seed, not live engine state, so fork
    // order never perturbs the parent stream.
    return Rng(mix_seed(seed_snapshot_, stream));
}

Rng Rng::fork(std::string_view tag) const { return fork(hash_string(tag)); }

std::vector<std::int64_t> Rng::sample_without_replacement(std::int64_t n, std::int64_t k) {
    if (k > n) {
        throw std::invalid_argument("Rng::sample_without_replacement: k > n");
    }
    std::vector<std::int64_t> pool(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        pool[static_cast<std::size_t>(i)] = i;
    }
    std::vector<std::int64_t> out;
    out.reserve(static_cast<std::size_t>(k));
    for (std::int64_t i = 0; i < k; ++i) {
        const std::int64_t j = i + uniform_int(n - i);
        std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
        out.push_back(pool[static_cast<std::size_t>(i)]);
    }
    return out;
}

}  // namespace shgvqa
