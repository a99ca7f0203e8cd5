#include "cmrc/rng.hpp"

#include "cmrc/errors.hpp"

#include <cmath>

namespace cmrc {

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

// FNV-1a, used only to derive fork seeds from labels.
std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

} // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
}

std::uint64_t Rng::next_u64() {
    // xoshiro256**
    std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

std::uint64_t Rng::uniform_index(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::uniform_index: n must be > 0");
    // rejection sampling to avoid modulo bias
    std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n + 1) % n;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x > limit);
    return x % n;
}

double Rng::normal() {
    if (has_cached_normal_) {
        has_cached_normal_ = false;
        return cached_normal_;
    }
    double u1, u2;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_normal_ = r * std::sin(theta);
    has_cached_normal_ = true;
    return r * std::cos(theta);
}

double Rng::normal(double mean, double sd) {
    return mean + sd * normal();
}

double Rng::truncated_normal(double sd) {
    double z;
    do {
        z = normal();
    } while (z < -2.0 || z > 2.0);
    return z * sd;
}

bool Rng::bernoulli(double p) {
    return uniform() < p;
}

std::uint64_t Rng::poisson(double lambda) {
    if (lambda < 0.0) throw ContractError("Rng::poisson: lambda must be >= 0");
    std::uint64_t total = 0;
    // Split large rates into chunks so exp(-lambda) stays representable.
    while (lambda > 500.0) {
        double chunk = 500.0;
        double l = std::exp(-chunk);
        std::uint64_t k = 0;
        double p = 1.0;
        do {
            ++k;
            p *= uniform();
        } while (p > l);
        total += k - 1;
        lambda -= chunk;
    }
    double l = std::exp(-lambda);
    std::uint64_t k = 0;
    double p = 1.0;
    do {
        ++k;
        p *= uniform();
    } while (p > l);
    return total + k - 1;
}

std::vector<std::size_t> Rng::sample_without_replacement(std::size_t n, std::size_t count) {
    if (count > n) throw ContractError("Rng::sample_without_replacement: count > n");
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t j = i + static_cast<std::size_t>(uniform_index(n - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
}

Rng Rng::fork(std::string_view label) const {
    std::uint64_t mix = seed_;
    std::uint64_t h = splitmix64(mix) ^ fnv1a(label);
    return Rng(h);
}

} // namespace cmrc
