#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace cmrc {

/// Deterministic counter-based random generator (xoshiro256** seeded via
/// splitmix64). All distributions are implemented here rather than with
/// std::<distribution> so that sequences are identical across platforms
/// and standard libraries: same seed + same call sequence => same values.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0);

    std::uint64_t next_u64();

    /// Uniform in [0, 1) with 53 bits of precision.
    double uniform();

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);

    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_index(std::uint64_t n);

    /// Standard normal via Box-Muller (one draw cached).
    double normal();
    double normal(double mean, double sd);

    /// Normal resampled until within [-2, 2] sigma, then scaled.
    double truncated_normal(double sd);

    bool bernoulli(double p);

    /// Poisson draw; exact for any lambda >= 0 (multiplication method,
    /// chunked so it stays stable for large rates).
    std::uint64_t poisson(double lambda);

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Choose `count` distinct indices from [0, n) (partial Fisher-Yates);
    /// result is sorted ascending.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count);

    /// Independent child stream keyed by a label; forked streams do not
    /// advance this generator's state in a label-dependent way beyond the
    /// hash, so per-sample parallel work stays reproducible.
    Rng fork(std::string_view label) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t state_[4];
    bool has_cached_normal_ = false;
    double cached_normal_ = 0.0;
};

} // namespace cmrc
