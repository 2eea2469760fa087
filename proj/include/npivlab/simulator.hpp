#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

#include "npivlab/bspline.hpp"
#include "npivlab/common.hpp"

namespace npivlab::sim {

/// Haar wavelet psi_{k,l} on [0,1): 2^{k/2} on the left half of cell l at
/// scale k, -2^{k/2} on the right half, zero elsewhere. Orthonormal.
struct HaarIndex {
    int k = 0;
    int l = 0;
};

inline double haar(int k, int l, double x) {
    require(k >= 0 && l >= 0 && l < (1 << k), "invalid Haar index");
    const double t = std::ldexp(x, k) - static_cast<double>(l);
    if (t < 0.0 || t >= 1.0) return 0.0;
    return (t < 0.5 ? 1.0 : -1.0) * std::pow(2.0, 0.5 * k);
}

/// Cell of x at scale k, clamped so x = 1 falls in the last cell.
inline int cell_of(double x, int k) {
    const int c = static_cast<int>(std::ldexp(x, k));
    return std::min(std::max(c, 0), (1 << k) - 1);
}

/// Sign of x within its scale-k cell: +1 on the left half, -1 on the right.
inline int half_sign(double x, int k) {
    const double t = std::ldexp(x, k) - static_cast<double>(cell_of(x, k));
    return t < 0.5 ? 1 : -1;
}

/**
 * Finite Haar representation of a function on [0,1]: mean plus coefficients
 * of psi_{k,l} for k <= K. This is the exact form of anything in the range
 * of the simulator's conditional-expectation operator.
 */
struct HaarRep {
    double mean = 0.0;
    std::vector<std::vector<double>> coef;  // coef[k][l]

    int depth() const { return static_cast<int>(coef.size()) - 1; }

    double eval(double z) const {
        double v = mean;
        for (int k = 0; k < static_cast<int>(coef.size()); ++k) {
            const int l = cell_of(z, k);
            v += coef[static_cast<std::size_t>(k)][static_cast<std::size_t>(l)] * haar(k, l, z);
        }
        return v;
    }

    double l2_norm() const {
        double acc = mean * mean;
        for (const auto& level : coef)
            for (double c : level) acc += c * c;
        return std::sqrt(acc);
    }
};

struct StageOneData {
    std::vector<double> x, z;
    std::size_t size() const { return x.size(); }
};

struct StageTwoData {
    std::vector<double> y, z;
    std::size_t size() const { return y.size(); }
};

/// Exact integral of a 1-d spline expansion over [lo, hi].
inline double integrate_expansion(const splines::SplineExpansion& f, double lo, double hi) {
    require(f.dim == 1, "exact integration path requires d = 1");
    double acc = 0.0;
    for (const auto& [idx, beta] : f.terms) {
        const double scale = std::ldexp(1.0, idx.k);
        acc += beta / scale *
               splines::cardinal_bspline_integral(f.order, scale * lo - idx.loc[0],
                                                  scale * hi - idx.loc[0]);
    }
    return acc;
}

/**
 * A synthetic NPIV problem on [0,1]^2 with known structural function and a
 * conditional-expectation operator that is exactly diagonal on the Haar
 * system: the joint density is
 *
 *   f_{X,Z}(x,z) = 1 + sum_{k<=K} sum_l c_k psi_{k,l}(x) psi_{k,l}(z),
 *   c_k = tau * 2^{-gamma k},
 *
 * so both marginals are uniform, T psi_{k,l} = c_k psi_{k,l} for k <= K,
 * and frequencies above K are annihilated. Positivity of the density
 * requires the margin tau * sum_k 2^{(1-gamma) k} < 1.
 */
class NPIVInstance {
public:
    double gamma = 1.0;
    int K = 6;
    double tau = 0.3;
    splines::SplineExpansion f_star;
    double C = 2.0;
    double sigma_eta = 0.1;
    std::uint64_t seed = 0;

    std::vector<double> c;  // c_k, k = 0..K
    HaarRep tf_star;        // T f_star, exact

    double positivity_margin() const {
        double m = 0.0;
        for (int k = 0; k <= K; ++k) m += std::pow(2.0, (1.0 - gamma) * k);
        return tau * m;
    }

    double density(double x, double z) const {
        double v = 1.0;
        for (int k = 0; k <= K; ++k) {
            if (cell_of(x, k) != cell_of(z, k)) break;  // deeper scales share no cell
            v += c[static_cast<std::size_t>(k)] * std::ldexp(1.0, k) *
                 static_cast<double>(half_sign(x, k) * half_sign(z, k));
        }
        return v;
    }
};

/// Exact Haar analysis of a spline expansion up to depth K, with the
/// diagonal multipliers applied: returns T f as a finite Haar representation.
inline HaarRep apply_T_exact(const NPIVInstance& inst, const splines::SplineExpansion& f) {
    HaarRep rep;
    rep.mean = integrate_expansion(f, 0.0, 1.0);
    rep.coef.resize(static_cast<std::size_t>(inst.K) + 1);
    for (int k = 0; k <= inst.K; ++k) {
        auto& level = rep.coef[static_cast<std::size_t>(k)];
        level.resize(std::size_t{1} << k);
        const double w = std::pow(2.0, 0.5 * k);
        for (int l = 0; l < (1 << k); ++l) {
            const double a = std::ldexp(static_cast<double>(l), -k);
            const double mid = std::ldexp(l + 0.5, -k);
            const double b = std::ldexp(static_cast<double>(l + 1), -k);
            const double ip =
                w * (integrate_expansion(f, a, mid) - integrate_expansion(f, mid, b));
            level[static_cast<std::size_t>(l)] = inst.c[static_cast<std::size_t>(k)] * ip;
        }
    }
    return rep;
}

/// T applied to a generic bounded function via dyadic midpoint quadrature at
/// depth K + 4 (exact whenever f is piecewise constant on cells that deep).
inline HaarRep apply_T_quadrature(const NPIVInstance& inst,
                                  const std::function<double(double)>& f) {
    const int depth = inst.K + 4;
    const std::size_t n = std::size_t{1} << depth;
    std::vector<double> avg(n);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        avg[i] = f((static_cast<double>(i) + 0.5) / static_cast<double>(n));
        mean += avg[i];
    }
    mean /= static_cast<double>(n);

    HaarRep rep;
    rep.mean = mean;
    rep.coef.resize(static_cast<std::size_t>(inst.K) + 1);
    for (int k = 0; k <= inst.K; ++k) {
        auto& level = rep.coef[static_cast<std::size_t>(k)];
        level.resize(std::size_t{1} << k);
        const double w = std::pow(2.0, 0.5 * k);
        const std::size_t cells_per_half = n >> (k + 1);
        for (int l = 0; l < (1 << k); ++l) {
            const std::size_t base = static_cast<std::size_t>(l) * (n >> k);
            double left = 0.0, right = 0.0;
            for (std::size_t i = 0; i < cells_per_half; ++i) {
                left += avg[base + i];
                right += avg[base + cells_per_half + i];
            }
            const double ip = w * (left - right) / static_cast<double>(n);
            level[static_cast<std::size_t>(l)] = inst.c[static_cast<std::size_t>(k)] * ip;
        }
    }
    return rep;
}

/// Diagonal action on an existing Haar representation (for operator algebra
/// tests): multiplies level k by c_k, annihilating nothing below depth K.
inline HaarRep apply_T_haar(const NPIVInstance& inst, const HaarRep& g) {
    HaarRep rep;
    rep.mean = g.mean;
    const int kmax = std::min(inst.K, g.depth());
    rep.coef.resize(static_cast<std::size_t>(kmax) + 1);
    for (int k = 0; k <= kmax; ++k) {
        rep.coef[static_cast<std::size_t>(k)] = g.coef[static_cast<std::size_t>(k)];
        for (auto& v : rep.coef[static_cast<std::size_t>(k)])
            v *= inst.c[static_cast<std::size_t>(k)];
    }
    return rep;
}

inline NPIVInstance make_instance(double gamma, int K, double tau,
                                  splines::SplineExpansion f_star, double sigma_eta,
                                  std::uint64_t seed, double C) {
    require(gamma >= 0.0, "decay exponent must be >= 0");
    require(K >= 0 && K <= 12, "wavelet truncation depth out of range");
    require(tau >= 0.0, "amplitude must be >= 0");
    require(sigma_eta >= 0.0, "noise scale must be >= 0");
    NPIVInstance inst;
    inst.gamma = gamma;
    inst.K = K;
    inst.tau = tau;
    inst.sigma_eta = sigma_eta;
    inst.seed = seed;
    inst.C = C;
    const double margin = inst.positivity_margin();
    if (margin >= 1.0) {
        std::ostringstream oss;
        oss << "density positivity violated: margin " << margin << " >= 1";
        throw ContractError(oss.str());
    }
    inst.c.resize(static_cast<std::size_t>(K) + 1);
    for (int k = 0; k <= K; ++k)
        inst.c[static_cast<std::size_t>(k)] = tau * std::pow(2.0, -gamma * k);

    // Structural bound check on a dense grid.
    double sup = 0.0;
    for (int i = 0; i < (1 << 14); ++i)
        sup = std::max(sup, std::abs(f_star.eval1d((i + 0.5) / static_cast<double>(1 << 14))));
    if (sup > C + 1e-12) {
        std::ostringstream oss;
        oss << "structural function exceeds the bound: sup " << sup << " > C = " << C;
        throw ContractError(oss.str());
    }
    inst.f_star = std::move(f_star);
    inst.tf_star = apply_T_exact(inst, inst.f_star);
    return inst;
}

/**
 * Stage-1 sampling: Z uniform, then X | Z = z by inverse CDF over the
 * 2^{K+1} dyadic cells on which the conditional density is constant. A
 * single uniform draw selects both the cell and the position inside it.
 */
inline StageOneData sample_stage1(const NPIVInstance& inst, std::size_t m, Rng& rng) {
    require(m >= 1, "need at least one sample");
    StageOneData out;
    out.x.resize(m);
    out.z.resize(m);
    const int depth = inst.K + 1;
    const std::size_t cells = std::size_t{1} << depth;
    std::vector<double> mass(cells);
    for (std::size_t i = 0; i < m; ++i) {
        const double z = rng.uniform01();
        // Piecewise-constant conditional density over the dyadic cells; the
        // sum over scales stops once the x-cell departs from z's path.
        const int zcell_path = cell_of(z, depth);
        double total = 0.0;
        for (std::size_t cidx = 0; cidx < cells; ++cidx) {
            double dens = 1.0;
            for (int k = 0; k <= inst.K; ++k) {
                const int xk = static_cast<int>(cidx >> (depth - k));
                const int zk = zcell_path >> (depth - k);
                if (xk != zk) break;
                const int sx = ((cidx >> (depth - k - 1)) & 1) ? -1 : 1;
                const int sz = ((zcell_path >> (depth - k - 1)) & 1) ? -1 : 1;
                dens += inst.c[static_cast<std::size_t>(k)] * std::ldexp(1.0, k) *
                        static_cast<double>(sx * sz);
            }
            mass[cidx] = dens / static_cast<double>(cells);
            total += mass[cidx];
        }
        double u = rng.uniform01() * total;
        std::size_t cidx = 0;
        while (cidx + 1 < cells && u >= mass[cidx]) {
            u -= mass[cidx];
            ++cidx;
        }
        const double frac = std::min(u / mass[cidx], 1.0 - 1e-16);
        out.x[i] = (static_cast<double>(cidx) + frac) / static_cast<double>(cells);
        out.z[i] = z;
    }
    return out;
}

/// Stage-2 sampling from the indirect model: y = (T f_star)(z) + eta,
/// eta ~ N(0, sigma_eta^2), z uniform.
inline StageTwoData sample_stage2(const NPIVInstance& inst, std::size_t n, Rng& rng) {
    require(n >= 1, "need at least one sample");
    StageTwoData out;
    out.y.resize(n);
    out.z.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double z = rng.uniform01();
        out.z[i] = z;
        out.y[i] = inst.tf_star.eval(z) + inst.sigma_eta * rng.normal();
    }
    return out;
}

/// The exact L^2 contraction ratio ||T psi_{k,0}|| / ||psi_{k,0}|| per scale.
inline std::vector<std::pair<int, double>> l2_contraction_profile(const NPIVInstance& inst,
                                                                  int k_max) {
    require(k_max <= inst.K, "profile limited to the truncation depth");
    std::vector<std::pair<int, double>> out;
    for (int k = 0; k <= k_max; ++k) {
        const HaarRep img =
            apply_T_quadrature(inst, [k](double x) { return haar(k, 0, x); });
        out.emplace_back(k, img.l2_norm());
    }
    return out;
}

struct TargetStyle {
    enum Kind { smooth, spiky } kind = smooth;
    int max_level = 6;        // finest resolution carrying mass
    int n_spikes = 4;         // spiky only
    int spike_level = 6;      // spiky only
    int smooth_levels = 2;    // spiky only: dense part up to this level
};

/**
 * Draws a structural function in the unit Besov sequence ball with sup-norm
 * at most C. Smooth style: dense random coefficients with the mandated
 * level decay. Spiky style: a low-resolution smooth part plus a few large
 * coefficients at a high resolution, renormalized into the unit ball.
 */
inline splines::SplineExpansion make_besov_target(const splines::BesovParams& params,
                                                  const TargetStyle& style, std::uint64_t seed,
                                                  double C, int order = 2) {
    require(params.valid() && params.d == 1, "target generator requires valid 1-d parameters");
    Rng rng(seed, 777);
    splines::SplineExpansion f;
    f.order = order;
    f.dim = 1;

    if (style.kind == TargetStyle::smooth) {
        for (int k = 0; k <= style.max_level; ++k) {
            const double mag = std::pow(2.0, -(params.s + 0.25) * k);
            for (const auto& loc : splines::level_locations(k, order, 1)) {
                const double b = mag * rng.uniform(0.5, 1.0) * (rng.below(2) ? 1.0 : -1.0);
                f.add(splines::BSplineIndex{k, loc}, b);
            }
        }
    } else {
        for (int k = 0; k <= style.smooth_levels; ++k) {
            const double mag = std::pow(2.0, -(params.s + 0.25) * k);
            for (const auto& loc : splines::level_locations(k, order, 1)) {
                const double b = mag * rng.uniform(0.5, 1.0) * (rng.below(2) ? 1.0 : -1.0);
                f.add(splines::BSplineIndex{k, loc}, b);
            }
        }
        // Spikes at distinct interior locations of the spike level.
        std::set<int> locs;
        const int span = (1 << style.spike_level) - order;
        while (static_cast<int>(locs.size()) < style.n_spikes)
            locs.insert(static_cast<int>(rng.below(static_cast<std::uint64_t>(span))));
        // Size the spike level to dominate the budget: its norm contribution
        // matches the whole smooth part before joint renormalization.
        splines::SplineExpansion smooth_part = f;
        const double smooth_norm = besov_sequence_norm(smooth_part, params);
        const double per_level =
            std::pow(2.0, (params.s - 1.0 / params.p) * style.spike_level);
        const double spike_mag =
            1.5 * smooth_norm /
            (per_level * std::pow(static_cast<double>(style.n_spikes), 1.0 / params.p));
        for (int l : locs)
            f.add(splines::BSplineIndex{style.spike_level, {l}},
                  spike_mag * (rng.below(2) ? 1.0 : -1.0));
    }

    const double norm = besov_sequence_norm(f, params);
    if (norm > 0.0) f.scale(1.0 / norm);
    // Enforce the sup bound on a dense grid, preserving unit-ball membership.
    double sup = 0.0;
    for (int i = 0; i < 10000; ++i)
        sup = std::max(sup, std::abs(f.eval1d((i + 0.5) / 10000.0)));
    if (sup > C) f.scale(C / sup);
    return f;
}

/**
 * Minimax hard instances: functions f_v = 2^{-ks} eps sum_l beta_{v,l}
 * omega_{k,l} over sign patterns on the stride-(r+1) location subset J_k
 * (pairwise disjoint supports inside [0,1]). Patterns are kept only if
 * they differ from all previously accepted ones in at least |J_k|/4
 * positions; sampling retries up to a fixed budget before rejecting.
 */
inline std::vector<splines::SplineExpansion> make_hard_instances(int k, double eps, double s,
                                                                 double p, int count,
                                                                 int order = 2,
                                                                 std::uint64_t seed = 0) {
    require(k >= 0 && eps > 0.0 && count >= 1, "invalid hard-instance request");
    (void)p;
    std::vector<int> locs;
    for (int l = 0; l + order + 1 <= (1 << k); l += order + 1) locs.push_back(l);
    require(!locs.empty(), "resolution too coarse for disjoint supports");
    const int j = static_cast<int>(locs.size());

    Rng rng(seed, 4242);
    std::vector<std::vector<int>> patterns;
    int draws = 0;
    while (static_cast<int>(patterns.size()) < count) {
        if (++draws > 10000) {
            std::ostringstream oss;
            oss << "hard-instance packing infeasible: " << patterns.size() << " of " << count
                << " patterns in " << draws - 1 << " draws (|J_k| = " << j << ")";
            throw ContractError(oss.str());
        }
        std::vector<int> cand(static_cast<std::size_t>(j));
        for (auto& s_i : cand) s_i = rng.below(2) ? 1 : -1;
        bool ok = true;
        for (const auto& prev : patterns) {
            int ham = 0;
            for (int i = 0; i < j; ++i)
                if (cand[static_cast<std::size_t>(i)] != prev[static_cast<std::size_t>(i)]) ++ham;
            if (4 * ham < j) {
                ok = false;
                break;
            }
        }
        if (ok) patterns.push_back(std::move(cand));
    }

    const double amp = std::pow(2.0, -s * k) * eps;
    std::vector<splines::SplineExpansion> out;
    for (const auto& pat : patterns) {
        splines::SplineExpansion f;
        f.order = order;
        f.dim = 1;
        for (int i = 0; i < j; ++i)
            f.add(splines::BSplineIndex{k, {locs[static_cast<std::size_t>(i)]}},
                  amp * pat[static_cast<std::size_t>(i)]);
        out.push_back(std::move(f));
    }
    return out;
}

}  // namespace npivlab::sim
