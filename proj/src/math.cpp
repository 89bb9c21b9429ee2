#include "psqd/math.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace psqd {

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

} // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& s : s_) s = splitmix64(x);
}

// xoshiro256++
std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

int Rng::uniform_int(int n) {
    if (n <= 0) throw DomainError("Rng::uniform_int: n must be positive");
    return static_cast<int>(uniform() * static_cast<double>(n)) % n;
}

double Rng::normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::vector<double> Rng::unit_vector(int dim) {
    if (dim < 1) throw DomainError("Rng::unit_vector: dim must be >= 1");
    std::vector<double> v(dim);
    double n = 0.0;
    do {
        for (auto& x : v) x = normal();
        n = norm2(v);
    } while (n < 1e-12);
    for (auto& x : v) x /= n;
    return v;
}

Rng Rng::fork(std::uint64_t stream_id) const {
    std::uint64_t x = seed_ ^ (stream_id * 0xd1b54a32d192ed03ull);
    return Rng(splitmix64(x));
}

double log_sum_exp(std::span<const double> xs) {
    if (xs.empty()) throw DomainError("log_sum_exp: empty input");
    const double m = *std::max_element(xs.begin(), xs.end());
    if (!std::isfinite(m)) {
        if (m == -std::numeric_limits<double>::infinity()) return m;
        throw DomainError("log_sum_exp: non-finite input");
    }
    double acc = 0.0;
    for (double x : xs) acc += std::exp(x - m);
    return m + std::log(acc);
}

double log_sum_exp_masked(std::span<const double> xs, std::span<const char> mask) {
    if (xs.size() != mask.size()) throw DomainError("log_sum_exp_masked: size mismatch");
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < xs.size(); ++i)
        if (mask[i] && xs[i] > m) m = xs[i];
    if (m == -std::numeric_limits<double>::infinity())
        throw DomainError("log_sum_exp_masked: empty mask");
    double acc = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i)
        if (mask[i]) acc += std::exp(xs[i] - m);
    return m + std::log(acc);
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm2(std::span<const double> a) {
    return std::sqrt(dot(a, a));
}

} // namespace psqd
