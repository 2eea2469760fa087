#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "npivlab/common.hpp"

namespace npivlab::splines {

/**
 * Cardinal B-spline machinery.
 *
 * The cardinal B-spline of order r is the (r+1)-fold convolution of the
 * unit-interval indicator with itself: a piecewise polynomial of degree r
 * supported on [0, r+1], with values in [0, 1]. We evaluate it through the
 * truncated-power expansion
 *
 *   iota_r(x) = sum_{j=0}^{r+1} a_j (x - j)_+^r,   a_j = (-1)^j / r! * binom(r+1, j),
 *
 * which is exact and cheap for the small orders used here (r <= 8).
 */

inline double binom(int n, int k) {
    if (k < 0 || k > n) return 0.0;
    double v = 1.0;
    for (int i = 0; i < k; ++i) v = v * static_cast<double>(n - i) / static_cast<double>(i + 1);
    return v;
}

inline double factorial(int n) {
    double v = 1.0;
    for (int i = 2; i <= n; ++i) v *= static_cast<double>(i);
    return v;
}

/// Coefficients a_j of the truncated-power expansion of iota_r.
inline std::vector<double> truncated_power_coeffs(int r) {
    require(r >= 0, "spline order must be >= 0");
    std::vector<double> a(static_cast<std::size_t>(r) + 2);
    const double rf = factorial(r);
    for (int j = 0; j <= r + 1; ++j) {
        a[static_cast<std::size_t>(j)] = ((j % 2 == 0) ? 1.0 : -1.0) * binom(r + 1, j) / rf;
    }
    return a;
}

// (t)_+^r with the half-open convention at r = 0, so that iota_0 = 1_[0,1).
inline double pos_pow(double t, int r) {
    if (r == 0) return t >= 0.0 ? 1.0 : 0.0;
    return t > 0.0 ? std::pow(t, r) : 0.0;
}

/// iota_r(x); zero outside [0, r+1].
inline double cardinal_bspline(int r, double x) {
    require(r >= 0, "spline order must be >= 0");
    if (x < 0.0 || x > static_cast<double>(r + 1)) return 0.0;
    const auto a = truncated_power_coeffs(r);
    double v = 0.0;
    for (int j = 0; j <= r + 1; ++j) v += a[static_cast<std::size_t>(j)] * pos_pow(x - j, r);
    // Clamp the tiny negative values produced by cancellation at the knots.
    if (v < 0.0 && v > -1e-12) v = 0.0;
    return v;
}

/// Antiderivative of iota_r vanishing at -inf, used for exact integration.
inline double cardinal_bspline_antiderivative(int r, double x) {
    if (x <= 0.0) return 0.0;
    const auto a = truncated_power_coeffs(r);
    const double xe = std::min(x, static_cast<double>(r + 1));
    double v = 0.0;
    for (int j = 0; j <= r + 1; ++j) {
        const double t = xe - j;
        if (t > 0.0) v += a[static_cast<std::size_t>(j)] * std::pow(t, r + 1) / static_cast<double>(r + 1);
    }
    // Mass beyond the support stays at the total integral, which is 1.
    if (x >= static_cast<double>(r + 1)) return 1.0;
    return v;
}

/// Exact integral of iota_r over [lo, hi].
inline double cardinal_bspline_integral(int r, double lo, double hi) {
    return cardinal_bspline_antiderivative(r, hi) - cardinal_bspline_antiderivative(r, lo);
}

struct SplineOrder {
    int r = 1;
};

/**
 * Index of a tensor-product B-spline: resolution k >= 0 and integer
 * location l with each component in {-r, ..., 2^k}. The associated basis
 * function is omega_{k,l}(x) = prod_i iota_r(2^k x_i - l_i).
 */
struct BSplineIndex {
    int k = 0;
    std::vector<int> loc;

    bool operator<(const BSplineIndex& o) const {
        if (k != o.k) return k < o.k;
        return loc < o.loc;
    }
    bool operator==(const BSplineIndex& o) const { return k == o.k && loc == o.loc; }
};

inline bool index_valid(const BSplineIndex& idx, int r, int dim) {
    if (idx.k < 0 || static_cast<int>(idx.loc.size()) != dim) return false;
    const int hi = 1 << idx.k;
    for (int li : idx.loc)
        if (li < -r || li > hi) return false;
    return true;
}

/// omega_{k,l}(x) for x in [0,1]^d.
inline double tensor_bspline(const BSplineIndex& idx, int r, const std::vector<double>& x) {
    require(index_valid(idx, r, static_cast<int>(x.size())), "invalid B-spline index");
    const double scale = static_cast<double>(1 << idx.k);
    double v = 1.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        v *= cardinal_bspline(r, scale * x[i] - static_cast<double>(idx.loc[i]));
        if (v == 0.0) return 0.0;
    }
    return v;
}

/**
 * A finite B-spline coefficient field: order r, dimension d and a map
 * from indices to coefficients beta_{k,l}. Evaluation is the finite sum
 * sum beta_{k,l} omega_{k,l}(x), linear in the coefficients.
 */
struct SplineExpansion {
    int order = 1;
    int dim = 1;
    std::map<BSplineIndex, double> terms;

    double eval(const std::vector<double>& x) const {
        double v = 0.0;
        for (const auto& [idx, beta] : terms) v += beta * tensor_bspline(idx, order, x);
        return v;
    }

    double eval1d(double x) const { return eval(std::vector<double>{x}); }

    std::size_t term_count() const { return terms.size(); }

    void add(const BSplineIndex& idx, double beta) {
        require(index_valid(idx, order, dim), "invalid B-spline index for expansion");
        terms[idx] += beta;
    }

    void scale(double c) {
        for (auto& [idx, beta] : terms) beta *= c;
    }
};

/// All locations of resolution k in dimension d (the index set I_k).
inline std::vector<std::vector<int>> level_locations(int k, int r, int dim) {
    const int lo = -r, hi = 1 << k;
    std::vector<std::vector<int>> out;
    std::vector<int> cur(static_cast<std::size_t>(dim), lo);
    while (true) {
        out.push_back(cur);
        int i = 0;
        for (; i < dim; ++i) {
            if (cur[static_cast<std::size_t>(i)] < hi) {
                ++cur[static_cast<std::size_t>(i)];
                for (int j = 0; j < i; ++j) cur[static_cast<std::size_t>(j)] = lo;
                break;
            }
        }
        if (i == dim) break;
    }
    return out;
}

inline std::size_t level_size(int k, int r, int dim) {
    std::size_t per = static_cast<std::size_t>((1 << k) + r + 1);
    std::size_t n = 1;
    for (int i = 0; i < dim; ++i) n *= per;
    return n;
}

/**
 * Besov parameters (s, p, q) in dimension d. p or q may be infinity
 * (use std::numeric_limits<double>::infinity()), in which case the
 * corresponding power-sum in the sequence norm becomes a max.
 * Validity requires s > d*(1/p - 1/2)_+ so that members embed into L^2.
 */
struct BesovParams {
    double s = 1.0;
    double p = 2.0;
    double q = 2.0;
    int d = 1;

    static double inv(double e) { return std::isinf(e) ? 0.0 : 1.0 / e; }

    double delta() const { return static_cast<double>(d) * std::max(inv(p) - 0.5, 0.0); }

    bool valid() const {
        return s > 0.0 && p > 0.0 && q > 0.0 && d >= 1 && s > delta();
    }
};

/**
 * Sequence quasi-norm of a coefficient field:
 *   || beta || = ( sum_k [ 2^{k(s - d/p)} ( sum_l |beta_{k,l}|^p )^{1/p} ]^q )^{1/q},
 * with max-norm limits when p or q is infinite. Absolutely homogeneous of
 * degree 1 in the coefficients.
 */
inline double besov_sequence_norm(const SplineExpansion& f, const BesovParams& params) {
    require(params.valid(), "invalid Besov parameters");
    require(params.d == f.dim, "dimension mismatch between expansion and parameters");
    const bool pinf = std::isinf(params.p);
    const bool qinf = std::isinf(params.q);

    // Group coefficients by resolution.
    std::map<int, double> level_acc;  // either sum of |b|^p or running max
    for (const auto& [idx, beta] : f.terms) {
        const double ab = std::abs(beta);
        auto& acc = level_acc[idx.k];
        if (pinf)
            acc = std::max(acc, ab);
        else
            acc += std::pow(ab, params.p);
    }

    const double sp = params.s - static_cast<double>(params.d) * BesovParams::inv(params.p);
    double total = 0.0;
    for (const auto& [k, acc] : level_acc) {
        const double lp = pinf ? acc : std::pow(acc, 1.0 / params.p);
        const double term = std::pow(2.0, sp * static_cast<double>(k)) * lp;
        if (qinf)
            total = std::max(total, term);
        else
            total += std::pow(term, params.q);
    }
    return qinf ? total : std::pow(total, 1.0 / params.q);
}

}  // namespace npivlab::splines
