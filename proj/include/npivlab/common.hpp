#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace npivlab {

/// Thrown on contract violations (invalid arguments, failed gates, infeasible budgets).
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ContractError(msg);
}

/**
 * Deterministic RNG with explicit streams.
 *
 * Every sampling routine takes one of these by reference, seeded from
 * (seed, stream) so that replications can run in parallel with
 * independent, reproducible streams. Distributions are hand-rolled on
 * top of mt19937_64 so the byte stream does not depend on the standard
 * library's distribution implementations.
 */
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : gen_(mix(seed, stream)) {}

    /// Uniform on [0,1) with 53-bit resolution.
    double uniform01() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    /// Uniform on [lo, hi).
    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform01();
    }

    /// Standard normal via Box-Muller; consumes exactly two uniforms per call.
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    /// Uniform integer in {0, ..., n-1}.
    std::uint64_t below(std::uint64_t n) {
        // Rejection-free modulo is fine here; n is tiny relative to 2^64.
        return gen_() % n;
    }

    std::uint64_t raw() { return gen_(); }

private:
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
        // SplitMix64 finalizer over the (seed, stream) pair.
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::mt19937_64 gen_;
};

/// Midpoints of the 2^depth dyadic cells of [0,1].
inline std::vector<double> dyadic_midpoints(int depth) {
    require(depth >= 0 && depth <= 26, "dyadic_midpoints: depth out of range");
    const std::size_t n = std::size_t{1} << depth;
    std::vector<double> pts(n);
    const double h = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) pts[i] = (static_cast<double>(i) + 0.5) * h;
    return pts;
}

/// n equally spaced points on [lo, hi], endpoints included.
inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
    require(n >= 2, "linspace: need at least two points");
    std::vector<double> pts(n);
    const double h = (hi - lo) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) pts[i] = lo + h * static_cast<double>(i);
    return pts;
}

inline double sqr(double x) { return x * x; }

/// Ordinary least squares fit y = a + b x; returns (intercept, slope, r2).
struct LineFit {
    double intercept = 0.0;
    double slope = 0.0;
    double r2 = 0.0;
};

inline LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() == y.size() && x.size() >= 2, "fit_line: need >= 2 points");
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
        syy += y[i] * y[i];
    }
    const double den = n * sxx - sx * sx;
    require(std::abs(den) > 0, "fit_line: degenerate abscissae");
    LineFit f;
    f.slope = (n * sxy - sx * sy) / den;
    f.intercept = (sy - f.slope * sx) / n;
    double ss_res = 0, ss_tot = 0;
    const double ybar = sy / n;
    for (std::size_t i = 0; i < x.size(); ++i) {
        ss_res += sqr(y[i] - (f.intercept + f.slope * x[i]));
        ss_tot += sqr(y[i] - ybar);
    }
    f.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
    return f;
}

inline double median(std::vector<double> v) {
    require(!v.empty(), "median of empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace npivlab
