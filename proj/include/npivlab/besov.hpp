#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "npivlab/bspline.hpp"
#include "npivlab/common.hpp"

namespace npivlab::splines {

using RealFunc1d = std::function<double(double)>;

/**
 * Mesh for modulus-of-smoothness estimation: m_points equally spaced
 * points covering [0,1]^d along each axis. The number of points per axis
 * must be a multiple of 2^kmax so that the dyadic shifts h = 2^-k land
 * exactly on mesh nodes.
 */
struct MeshSpec {
    int points_per_axis = 256;
};

/**
 * Discretized Besov seminorm of a scalar function on [0,1]^d:
 *
 *   |f| ~ ( sum_{k=0}^{Kmax} [ 2^{ks} w_{r,p}(f, 2^-k) ]^q )^{1/q}
 *
 * where the modulus w_{r,p}(f, t) is approximated by the maximum over
 * axis directions h, ||h|| = 2^-k, of the discrete L^p norm of the r-th
 * forward difference Delta_h^r f over mesh points whose full stencil
 * stays inside the domain. Points whose stencil exits the domain are
 * skipped. The discrete L^p norm is normalized by the total mesh size,
 * ( (1/M) sum_valid |Delta|^p )^{1/p}, with a max over valid points when
 * p is infinite.
 *
 * Requires r > s (the modulus order must exceed the smoothness) and a
 * mesh fine enough that the step is at most 2^-kmax / r.
 */
inline double estimate_besov_seminorm(const std::function<double(const std::vector<double>&)>& f,
                                      const BesovParams& params, int r, const MeshSpec& mesh,
                                      int kmax) {
    require(params.valid(), "invalid Besov parameters");
    require(r > params.s, "modulus order r must exceed smoothness s");
    require(kmax >= 0, "kmax must be >= 0");
    const int M = mesh.points_per_axis;
    require(M >= 2, "mesh too small");
    require((M - 1) % (1 << kmax) == 0,
            "mesh intervals must be divisible by 2^kmax so shifts land on nodes");
    const double step = 1.0 / static_cast<double>(M - 1);
    require(step <= std::pow(2.0, -kmax) / static_cast<double>(r) + 1e-15,
            "mesh too coarse for kmax");
    const int d = params.d;
    require(d >= 1 && d <= 3, "seminorm estimation supports d in {1,2,3}");

    // Binomial weights of the r-th forward difference.
    std::vector<double> w(static_cast<std::size_t>(r) + 1);
    for (int j = 0; j <= r; ++j)
        w[static_cast<std::size_t>(j)] = (((r - j) % 2 == 0) ? 1.0 : -1.0) * binom(r, j);

    // Evaluate f once on the full mesh.
    std::vector<int> shape(static_cast<std::size_t>(d), M);
    std::size_t total = 1;
    for (int i = 0; i < d; ++i) total *= static_cast<std::size_t>(M);
    std::vector<double> vals(total);
    std::vector<double> x(static_cast<std::size_t>(d));
    for (std::size_t flat = 0; flat < total; ++flat) {
        std::size_t rem = flat;
        for (int i = 0; i < d; ++i) {
            x[static_cast<std::size_t>(i)] =
                static_cast<double>(rem % static_cast<std::size_t>(M)) * step;
            rem /= static_cast<std::size_t>(M);
        }
        vals[flat] = f(x);
    }

    const bool pinf = std::isinf(params.p);
    const bool qinf = std::isinf(params.q);
    double outer = 0.0;
    for (int k = 0; k <= kmax; ++k) {
        const int stride = (M - 1) / (1 << k);  // index shift realizing h = 2^-k
        require(stride >= 1, "stencil exceeds mesh");
        // When r * h > 1 no forward stencil fits in the domain and the
        // discrete modulus at this scale is zero.
        double level_best = 0.0;
        for (int axis = 0; axis < d; ++axis) {
            std::size_t axis_stride = 1;
            for (int i = 0; i < axis; ++i) axis_stride *= static_cast<std::size_t>(M);
            double acc = 0.0;
            for (std::size_t flat = 0; flat < total; ++flat) {
                const int coord =
                    static_cast<int>((flat / axis_stride) % static_cast<std::size_t>(M));
                if (coord + r * stride >= M) continue;  // forward stencil exits [0,1]
                double diff = 0.0;
                for (int j = 0; j <= r; ++j)
                    diff += w[static_cast<std::size_t>(j)] *
                            vals[flat + static_cast<std::size_t>(j * stride) * axis_stride];
                const double ad = std::abs(diff);
                if (pinf)
                    acc = std::max(acc, ad);
                else
                    acc += std::pow(ad, params.p);
            }
            const double lp =
                pinf ? acc : std::pow(acc / static_cast<double>(total), 1.0 / params.p);
            level_best = std::max(level_best, lp);
        }
        const double term = std::pow(2.0, params.s * static_cast<double>(k)) * level_best;
        if (qinf)
            outer = std::max(outer, term);
        else
            outer += std::pow(term, params.q);
    }
    return qinf ? outer : std::pow(outer, 1.0 / params.q);
}

inline double estimate_besov_seminorm(const RealFunc1d& f, const BesovParams& params, int r,
                                      const MeshSpec& mesh, int kmax) {
    require(params.d == 1, "1-d overload requires d = 1");
    return estimate_besov_seminorm(
        [&f](const std::vector<double>& x) { return f(x[0]); }, params, r, mesh, kmax);
}

namespace detail {

/// Least-squares projection of samples onto the resolution-k spline span (1-d).
/// Returns coefficients indexed over I_k = {-r, ..., 2^k}.
inline Eigen::VectorXd project_level_1d(const std::vector<double>& grid,
                                        const std::vector<double>& vals, int k, int r) {
    const int n_basis = (1 << k) + r + 1;
    const double scale = static_cast<double>(1 << k);
    using Trip = Eigen::Triplet<double>;
    Eigen::VectorXd aty = Eigen::VectorXd::Zero(n_basis);
    Eigen::SparseMatrix<double> ata(n_basis, n_basis);
    // Accumulate normal equations row by row; each row has <= r+1 nonzeros.
    std::vector<std::pair<int, double>> row;
    std::vector<Trip> ata_trips;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        const double t = scale * grid[g];
        row.clear();
        const int l_hi = static_cast<int>(std::floor(t));
        for (int l = l_hi - r; l <= l_hi; ++l) {
            if (l < -r || l > (1 << k)) continue;
            const double b = cardinal_bspline(r, t - static_cast<double>(l));
            if (b != 0.0) row.emplace_back(l + r, b);
        }
        for (const auto& [i, bi] : row) {
            aty[i] += bi * vals[g];
            for (const auto& [j, bj] : row) ata_trips.emplace_back(i, j, bi * bj);
        }
    }
    ata.setFromTriplets(ata_trips.begin(), ata_trips.end());
    for (int i = 0; i < n_basis; ++i) ata.coeffRef(i, i) += 1e-12;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(ata);
    require(solver.info() == Eigen::Success, "level projection failed to factorize");
    return solver.solve(aty);
}

/// Two-scale refinement: coefficients at level k-1 re-expressed at level k.
inline Eigen::VectorXd refine_coeffs_1d(const Eigen::VectorXd& coarse, int k_from, int r) {
    const int n_fine = (1 << (k_from + 1)) + r + 1;
    Eigen::VectorXd fine = Eigen::VectorXd::Zero(n_fine);
    const double pow2 = std::pow(2.0, -r);
    for (int i = 0; i < coarse.size(); ++i) {
        const int l = i - r;  // location at level k_from
        for (int j = 0; j <= r + 1; ++j) {
            const int lf = 2 * l + j;  // location at level k_from + 1
            if (lf < -r || lf > (1 << (k_from + 1))) continue;
            fine[lf + r] += coarse[i] * pow2 * binom(r + 1, j);
        }
    }
    return fine;
}

struct Candidate {
    int k = 0;
    int loc = 0;
    double beta = 0.0;
};

}  // namespace detail

/**
 * Adaptive N-term approximation of a target function on [0,1] in the
 * multiscale B-spline system.
 *
 * The approximant keeps all locations densely up to a resolution K, and
 * when p < 2 additionally the n_k largest-magnitude detail coefficients
 * per resolution k in (K, K*], with a geometric budget profile
 * n_k ~ 2^{-nu (k-K)}, nu = (s - Delta) / (2 Delta). The split
 * resolution K is chosen maximal subject to the total term budget N.
 * Detail coefficients come from successive least-squares projections on
 * a fixed dyadic quadrature grid; the kept terms are then refit by
 * least squares on their own span.
 *
 * Rejects budgets too small to hold the resolution-0 level.
 */
inline SplineExpansion adaptive_approximation(const RealFunc1d& target, std::size_t budget,
                                              const BesovParams& params, int order) {
    require(params.valid(), "invalid Besov parameters");
    require(params.d == 1, "adaptive approximation is implemented for d = 1");
    require(order >= 0, "invalid spline order");
    const int r = order;
    const double delta = params.delta();

    const auto dense_count = [&](int K) {
        std::size_t c = 0;
        for (int k = 0; k <= K; ++k) c += level_size(k, r, 1);
        return c;
    };
    require(dense_count(0) <= budget, "approximation budget too small for resolution 0");

    // Choose the dense cutoff K maximal under the budget; when p < 2 hold
    // back roughly half the budget for sparse high-resolution terms.
    const std::size_t dense_budget = delta > 0.0 ? std::max<std::size_t>(budget / 2, dense_count(0))
                                                 : budget;
    int K = 0;
    while (dense_count(K + 1) <= dense_budget && K < 16) ++K;

    int K_star = K;
    std::vector<std::size_t> n_k;  // sparse budget for levels K+1..K_star
    if (delta > 0.0) {
        const double nu = (params.s - delta) / (2.0 * delta);
        const double rho = std::pow(2.0, -nu);
        const std::size_t rem = budget - dense_count(K);
        // Largest leading count c with c * sum_j rho^j <= rem.
        double gsum = rho / (1.0 - rho);
        double c0 = gsum > 0 ? static_cast<double>(rem) / gsum : 0.0;
        std::size_t used = 0;
        for (int k = K + 1; k <= K + 24; ++k) {
            const std::size_t cap = level_size(k, r, 1);
            std::size_t nk = static_cast<std::size_t>(std::floor(c0 * std::pow(rho, k - K)));
            nk = std::min(nk, cap);
            if (nk == 0) break;
            if (used + nk > rem) nk = rem - used;
            if (nk == 0) break;
            n_k.push_back(nk);
            used += nk;
            K_star = k;
        }
    }

    // Fixed quadrature grid, deep enough for the finest level considered.
    const int qdepth = std::max(K_star + 3, 12);
    const auto grid = dyadic_midpoints(qdepth);
    std::vector<double> vals(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) vals[i] = target(grid[i]);

    // Canonical multilevel details: level 0 keeps the projection itself,
    // level k keeps (Pi_k - Pi_{k-1}) f expressed at resolution k.
    std::vector<Eigen::VectorXd> details;
    Eigen::VectorXd prev;
    for (int k = 0; k <= K_star; ++k) {
        Eigen::VectorXd coef = detail::project_level_1d(grid, vals, k, r);
        if (k == 0) {
            details.push_back(coef);
        } else {
            details.push_back(coef - detail::refine_coeffs_1d(prev, k - 1, r));
        }
        prev = std::move(coef);
    }

    // Select terms: dense through K, then the n_k largest details per level.
    std::vector<detail::Candidate> selected;
    for (int k = 0; k <= K; ++k)
        for (int i = 0; i < details[static_cast<std::size_t>(k)].size(); ++i)
            selected.push_back({k, i - r, details[static_cast<std::size_t>(k)][i]});
    for (std::size_t j = 0; j < n_k.size(); ++j) {
        const int k = K + 1 + static_cast<int>(j);
        const auto& det = details[static_cast<std::size_t>(k)];
        std::vector<int> idx(static_cast<std::size_t>(det.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
        std::sort(idx.begin(), idx.end(), [&](int a, int b) {
            const double da = std::abs(det[a]), db = std::abs(det[b]);
            if (da != db) return da > db;
            return a < b;
        });
        for (std::size_t i = 0; i < n_k[j] && i < idx.size(); ++i)
            selected.push_back({k, idx[i] - r, det[idx[i]]});
    }

    // Refit the selected span by (minimally regularized) least squares.
    const int n_sel = static_cast<int>(selected.size());
    Eigen::MatrixXd ata = Eigen::MatrixXd::Zero(n_sel, n_sel);
    Eigen::VectorXd aty = Eigen::VectorXd::Zero(n_sel);
    std::vector<double> brow(static_cast<std::size_t>(n_sel));
    for (std::size_t g = 0; g < grid.size(); ++g) {
        for (int j = 0; j < n_sel; ++j) {
            const auto& c = selected[static_cast<std::size_t>(j)];
            brow[static_cast<std::size_t>(j)] = cardinal_bspline(
                r, static_cast<double>(1 << c.k) * grid[g] - static_cast<double>(c.loc));
        }
        for (int i = 0; i < n_sel; ++i) {
            if (brow[static_cast<std::size_t>(i)] == 0.0) continue;
            aty[i] += brow[static_cast<std::size_t>(i)] * vals[g];
            for (int j = 0; j < n_sel; ++j)
                ata(i, j) += brow[static_cast<std::size_t>(i)] * brow[static_cast<std::size_t>(j)];
        }
    }
    const double ridge = 1e-10 * (1.0 + ata.trace() / std::max(1, n_sel));
    for (int i = 0; i < n_sel; ++i) ata(i, i) += ridge;
    Eigen::VectorXd beta = ata.ldlt().solve(aty);

    SplineExpansion out;
    out.order = r;
    out.dim = 1;
    for (int j = 0; j < n_sel; ++j) {
        if (std::abs(beta[j]) < 1e-13) continue;  // prune numerically dead terms
        BSplineIndex idx;
        idx.k = selected[static_cast<std::size_t>(j)].k;
        idx.loc = {selected[static_cast<std::size_t>(j)].loc};
        out.add(idx, beta[j]);
    }
    return out;
}

inline SplineExpansion adaptive_approximation(const SplineExpansion& target, std::size_t budget,
                                              const BesovParams& params) {
    return adaptive_approximation([&target](double x) { return target.eval1d(x); }, budget,
                                  params, target.order);
}

/// Mean squared difference of two callables over a uniform grid (test aid
/// for the approximation contracts).
inline double grid_l2_error(const RealFunc1d& a, const RealFunc1d& b, std::size_t n_points) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n_points; ++i) {
        const double x = (static_cast<double>(i) + 0.5) / static_cast<double>(n_points);
        acc += sqr(a(x) - b(x));
    }
    return std::sqrt(acc / static_cast<double>(n_points));
}

}  // namespace npivlab::splines
