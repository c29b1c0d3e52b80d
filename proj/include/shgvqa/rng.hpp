#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace shgvqa {

// Deterministic random source. std::mt19937_64 is fully specified by the
// standard, but the std distributions are not, so the transforms here are
// spelled out explicitly. Every stream of randomness in the project is a
// fork() of one root seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed), seed_snapshot_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of entropy.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    std::int64_t uniform_int(std::int64_t n);

    // Standard normal via Box-Muller (second value cached).
    double normal();

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Derive an independent child stream. Mixing is splitmix64-style so
    // sibling streams do not correlate.
    Rng fork(std::uint64_t stream) const;
    Rng fork(std::string_view tag) const;

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::int64_t i = static_cast<std::int64_t>(items.size()) - 1; i > 0; --i) {
            std::swap(items[static_cast<std::size_t>(i)],
                      items[static_cast<std::size_t>(uniform_int(i + 1))]);
        }
    }

    // Sample k distinct values from [0, n) in deterministic order of draw.
    std::vector<std::int64_t> sample_without_replacement(std::int64_t n, std::int64_t k);

    std::uint64_t state_seed() const { return seed_snapshot_; }

private:
    std::mt19937_64 engine_;
    bool have_cached_normal_ = false;
    double cached_normal_ = 0.0;
    std::uint64_t seed_snapshot_ = 0;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);
std::uint64_t hash_string(std::string_view s);

}  // namespace shgvqa
