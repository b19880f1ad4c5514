#pragma once

#include <complex>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdnn {

inline constexpr int max_rank = 16;

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error { public: using Error::Error; };
class BoundsError : public Error { public: using Error::Error; };
class AliasError : public Error { public: using Error::Error; };
class StaleDerivativeError : public Error { public: using Error::Error; };
class SolverError : public Error { public: using Error::Error; };
class IoError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };

/// Dimension and stride vectors. Strides are counted in elements, not bytes.
using Dims = std::vector<long>;

inline long md_size(const Dims& dims)
{
    long n = 1;
    for (long d : dims)
        n *= d;
    return n;
}

inline std::string dims_to_string(const Dims& d)
{
    std::string s = "[";
    for (size_t i = 0; i < d.size(); i++)
        s += (i ? "," : "") + std::to_string(d[i]);
    return s + "]";
}

inline void check_rank(const Dims& dims)
{
    if (dims.empty() || dims.size() > max_rank)
        throw ShapeError("rank must be in 1.." + std::to_string(max_rank)
                         + ", got " + std::to_string(dims.size()));
    for (long d : dims)
        if (d < 1)
            throw ShapeError("dimensions must be positive, got " + dims_to_string(dims));
}

/// Column-major default strides: s_0 = 1, s_i = prod_{j<i} d_j.
inline Dims default_strides(const Dims& dims)
{
    check_rank(dims);
    Dims s(dims.size());
    long acc = 1;
    for (size_t i = 0; i < dims.size(); i++) {
        s[i] = acc;
        acc *= dims[i];
    }
    return s;
}

inline Dims dims_of_rank(std::initializer_list<long> head, int rank)
{
    Dims d(head);
    d.resize(rank, 1);
    return d;
}

// ---------------------------------------------------------------------------
// Deterministic random numbers.
//
// All randomness in the library flows through splitmix64, either sequentially
// (Rng) or as a pure counter-based hash (hash_rand), so that every draw is a
// function of explicit seeds and counters. This makes initialization, data
// shuffling and dropout bitwise reproducible across runs.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state)
{
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Stateless mix of a key and counter; basis of counter-based streams.
inline uint64_t hash_rand(uint64_t key, uint64_t counter)
{
    uint64_t s = key ^ (0x9e3779b97f4a7c15ULL + counter * 0xbf58476d1ce4e5b9ULL);
    splitmix64(s);
    return splitmix64(s);
}

/// Sequential deterministic generator.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed ^ 0x5851f42d4c957f2dULL) { splitmix64(state_); }

    uint64_t next() { return splitmix64(state_); }

    /// Uniform in [0, 1).
    double uniform() { return double(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller.
    double gauss()
    {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        while (u1 == 0.0)
            u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        have_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return next() % n; }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

/// Derive a child seed from a parent seed and a label (e.g. a weight name).
inline uint64_t derive_seed(uint64_t seed, const std::string& label)
{
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : label)
        h = (h ^ c) * 0x100000001b3ULL;
    return hash_rand(seed, h);
}

} // namespace mdnn
