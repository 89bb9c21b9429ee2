#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace psqd {

/// Thrown when an operation is called outside its contract (bad arguments,
/// malformed inputs). Maps to CLI exit code 2 when raised during setup.
class DomainError : public std::runtime_error {
public:
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown when a run cannot continue (non-finite loss, empty indifference
/// space, serialization failure). Maps to CLI exit code 3.
class RuntimeAbort : public std::runtime_error {
public:
    explicit RuntimeAbort(const std::string& msg) : std::runtime_error(msg) {}
};

/// Deterministic RNG with pinned distributions. std::mt19937_64 output is
/// specified by the standard and the distribution transforms below are
/// implemented by hand, so identical seeds give bitwise-identical streams on
/// every build of this project.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi);

    /// Uniform integer in [0, n).
    int uniform_int(int n);

    /// Standard normal via Box-Muller.
    double normal();

    /// Uniform direction on the unit sphere S^{dim-1}.
    std::vector<double> unit_vector(int dim);

    /// Derives an independent stream; forking with distinct ids from one
    /// parent gives decorrelated, reproducible child streams.
    Rng fork(std::uint64_t stream_id) const;

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::uint64_t s_[4];
};

/// Numerically stable log(sum(exp(x))). Never overflows for |x| <= 700.
double log_sum_exp(std::span<const double> xs);

/// log(sum(exp(x)) restricted to entries with mask != 0. Throws DomainError
/// if the mask selects nothing.
double log_sum_exp_masked(std::span<const double> xs, std::span<const char> mask);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

} // namespace psqd
