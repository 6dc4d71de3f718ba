#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace physteer {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Bad input, inconsistent shapes, violated preconditions (CLI exit code 2).
class ValidationError : public Error {
  public:
    using Error::Error;
};

/// Missing, unreadable or unwritable files (CLI exit code 3).
class IoError : public Error {
  public:
    using Error::Error;
};

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 0xcbf29ce484222325ULL);

std::string hexDigest(std::uint64_t h);

// splitmix64 finalizer; used to derive independent child seeds.
std::uint64_t mixSeed(std::uint64_t x);

/// Child seed for a named stream, e.g. deriveSeed(seed, "O1/p007/noise").
std::uint64_t deriveSeed(std::uint64_t seed, std::string_view tag);

/// Seeded generator with distribution code owned here, so sequences do not
/// depend on the standard library's (implementation-defined) distributions.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    double uniform();                          // [0, 1)
    double uniform(double lo, double hi);      // [lo, hi)
    std::uint64_t below(std::uint64_t bound);  // [0, bound)
    double normal();                           // N(0, 1), Box-Muller

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const auto j = below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

  private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index is
/// handled exactly once; callers write results into pre-sized slots so the
/// output does not depend on the worker count.
void parallelFor(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace physteer
