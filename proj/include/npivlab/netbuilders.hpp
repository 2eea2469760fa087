#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <mutex>
#include <sstream>
#include <vector>

#include "npivlab/bspline.hpp"
#include "npivlab/common.hpp"
#include "npivlab/smoothnet.hpp"

namespace npivlab::nets {

namespace detail {

/// sigma^{(m)}(t) expressed as a polynomial in y = sigma(t):
/// P_1 = y - y^2, P_{m+1} = P_m'(y) * (y - y^2).
inline std::vector<double> sigmoid_deriv_poly(int m) {
    std::vector<double> p{0.0, 1.0, -1.0};  // P_1
    for (int i = 1; i < m; ++i) {
        std::vector<double> dp(p.size() - 1);
        for (std::size_t j = 1; j < p.size(); ++j) dp[j - 1] = p[j] * static_cast<double>(j);
        // multiply dp by (y - y^2)
        std::vector<double> next(dp.size() + 2, 0.0);
        for (std::size_t j = 0; j < dp.size(); ++j) {
            next[j + 1] += dp[j];
            next[j + 2] -= dp[j];
        }
        p = std::move(next);
    }
    return p;
}

inline double sigmoid_deriv_at(int m, double t) {
    const double y = sigmoid(t);
    const auto p = sigmoid_deriv_poly(m);
    double acc = 0.0;
    for (std::size_t j = p.size(); j-- > 0;) acc = acc * y + p[j];
    return acc;
}

/// Argument maximizing |sigma^{(m)}| over a grid away from the symmetry
/// point t = 0. At t = 0 the unit columns pair up as sigma(-u) = 1 - sigma(u),
/// collapsing the span onto odd functions; any offset point breaks this.
inline double pick_expansion_point(int m) {
    double best_t = 0.5, best = 0.0;
    for (int i = 50; i <= 800; ++i) {
        const double t = 0.01 * i;
        const double v = std::abs(sigmoid_deriv_at(m, t));
        if (v > best) {
            best = v;
            best_t = t;
        }
    }
    return best_t;
}

/// Offset evaluation grid: n points strictly inside [lo, hi], avoiding knots.
inline std::vector<double> gate_grid(double lo, double hi, int n) {
    std::vector<double> g(static_cast<std::size_t>(n));
    const double h = (hi - lo) / n;
    for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = lo + (i + 0.5) * h;
    return g;
}

struct ShallowFit {
    Eigen::VectorXd in_w;   // hidden unit input weights
    Eigen::VectorXd in_b;   // hidden unit biases
    Eigen::VectorXd out_w;  // output weights
    double out_b = 0.0;
    double sup_err = std::numeric_limits<double>::infinity();
};

/**
 * Fit a shallow sigmoid net to a 1-d target on [lo, hi] using centered
 * divided-difference units sigma(t0 + (j - deg/2) h (x - center)) of the
 * given degree, with the output layer refit by least squares on a dense
 * grid. Deterministic; the difference weights are the fallback candidate.
 */
inline ShallowFit fit_shallow_1d(const std::function<double(double)>& target, int deg, double lo,
                                 double hi, double h_scale) {
    const double t0 = pick_expansion_point(deg);
    const double dr = sigmoid_deriv_at(deg, t0);
    const double center = 0.5 * (lo + hi);
    const int units = deg + 1;
    ShallowFit fit;
    fit.in_w.resize(units);
    fit.in_b.resize(units);
    for (int j = 0; j < units; ++j) {
        const double c = (static_cast<double>(j) - 0.5 * deg) * h_scale;
        fit.in_w[j] = c;
        fit.in_b[j] = t0 - c * center;
    }

    // Candidate 1: analytic divided-difference output weights (valid when the
    // target is the pure monomial (x - center)^deg).
    Eigen::VectorXd dd_w(units);
    for (int j = 0; j < units; ++j)
        dd_w[j] = (((j % 2) == 0) ? 1.0 : -1.0) * splines::binom(deg, j) /
                  (std::pow(h_scale, deg) * dr);

    // Candidate 2: least-squares refit of the output layer on a dense grid.
    const int gn = 2001;
    Eigen::MatrixXd design(gn, units + 1);
    Eigen::VectorXd rhs(gn);
    for (int i = 0; i < gn; ++i) {
        const double x = lo + (hi - lo) * i / (gn - 1);
        for (int j = 0; j < units; ++j) design(i, j) = sigmoid(fit.in_w[j] * x + fit.in_b[j]);
        design(i, units) = 1.0;
        rhs[i] = target(x);
    }
    // The columns are nearly collinear for small steps; a thresholded SVD
    // keeps the refit stable there.
    Eigen::BDCSVD<Eigen::MatrixXd> svd(design, Eigen::ComputeThinU | Eigen::ComputeThinV);
    svd.setThreshold(1e-13);
    Eigen::VectorXd ls = svd.solve(rhs);

    const auto sup_of = [&](const Eigen::VectorXd& w, double b) {
        double s = 0.0;
        for (double x : gate_grid(lo, hi, 4000)) {
            double v = b;
            for (int j = 0; j < units; ++j) v += w[j] * sigmoid(fit.in_w[j] * x + fit.in_b[j]);
            s = std::max(s, std::abs(v - target(x)));
        }
        return s;
    };

    const double e_ls = sup_of(ls.head(units), ls[units]);
    const double e_dd = sup_of(dd_w, 0.0);
    if (e_ls <= e_dd) {
        fit.out_w = ls.head(units);
        fit.out_b = ls[units];
        fit.sup_err = e_ls;
    } else {
        fit.out_w = dd_w;
        fit.out_b = 0.0;
        fit.sup_err = e_dd;
    }
    return fit;
}

inline ClipSpec wide_clip(double range) {
    return ClipSpec{range + 1.0, range + 2.0};
}

}  // namespace detail

/// Shallow two-unit net computing delta_B(x) = sigma(Bx) - sigma(B(x-1)),
/// the smooth surrogate of the unit-interval indicator.
inline SmoothNet build_indicator_net(double steepness) {
    require(steepness > 1.0, "indicator steepness must exceed 1");
    Layer l1{Eigen::MatrixXd(2, 1), Eigen::VectorXd(2)};
    l1.w << steepness, steepness;
    l1.b << 0.0, -steepness;
    Layer l2{Eigen::MatrixXd(1, 2), Eigen::VectorXd(1)};
    l2.w << 1.0, -1.0;
    l2.b << 0.0;
    return SmoothNet({l1, l2}, detail::wide_clip(2.0));
}

/**
 * Shallow sigmoid net approximating x^r on [-m_range, m_range], width at
 * most floor(3r/2) + 2. Degrees 0 and 1 are exact through the affine path.
 * The construction is accepted only if its measured sup error on a
 * 10^4-point grid passes the requested gate; otherwise it is rejected
 * with diagnostics after the retry schedule is exhausted.
 */
inline SmoothNet build_monomial_net(int r, double m_range, double eps) {
    require(r >= 0, "degree must be >= 0");
    require(m_range > 0.0 && eps > 0.0, "invalid range or gate");
    const double out_range = std::pow(m_range, r) + 1.0;

    if (r == 0) {
        Layer l{Eigen::MatrixXd::Zero(1, 1), Eigen::VectorXd::Constant(1, 1.0)};
        return SmoothNet({l}, detail::wide_clip(out_range));
    }
    if (r == 1) {
        Layer l{Eigen::MatrixXd::Constant(1, 1, 1.0), Eigen::VectorXd::Zero(1)};
        return SmoothNet({l}, detail::wide_clip(out_range));
    }

    const auto target = [r](double x) { return std::pow(x, r); };
    double best_err = std::numeric_limits<double>::infinity();
    detail::ShallowFit best;
    for (double h : {6e-2, 3e-2, 2e-2, 1e-2, 6e-3, 3e-3, 2e-3, 1e-3, 6e-4, 3e-4, 1e-4, 3e-5}) {
        const auto fit =
            detail::fit_shallow_1d(target, r, -m_range, m_range, h / m_range);
        if (fit.sup_err < best_err) {
            best_err = fit.sup_err;
            best = fit;
        }
        if (best_err <= 0.5 * eps) break;
    }

    const int units = r + 1;
    Layer l1{Eigen::MatrixXd(units, 1), best.in_b};
    for (int j = 0; j < units; ++j) l1.w(j, 0) = best.in_w[j];
    Layer l2{best.out_w.transpose(), Eigen::VectorXd::Constant(1, best.out_b)};
    SmoothNet net({l1, l2}, detail::wide_clip(out_range));

    // Gate on the contract grid.
    double sup = 0.0;
    for (double x : detail::gate_grid(-m_range, m_range, 10000))
        sup = std::max(sup, std::abs(net.forward1d(x) - target(x)));
    if (sup > eps) {
        std::ostringstream oss;
        oss << "monomial net gate failed: r=" << r << " m_range=" << m_range
            << " measured=" << sup << " required=" << eps;
        throw ContractError(oss.str());
    }
    return net;
}

namespace detail {

/// Squaring fit used by product assemblies: shallow unit set for u^2 on
/// [-range, range]. Tries a retry schedule of difference steps.
inline ShallowFit squaring_fit(double range, double eps) {
    ShallowFit best;
    for (double h : {3e-3, 1e-3, 3e-4, 1e-4, 5e-5, 2e-5}) {
        auto fit = fit_shallow_1d([](double u) { return u * u; }, 2, -range, range, h / range);
        if (fit.sup_err < best.sup_err) best = fit;
        if (best.sup_err <= eps) break;
    }
    return best;
}

/// Identity-wire fit: two units realizing u on [-range, range] with
/// (sigma(hu) - sigma(-hu)) / (h/2). Returned in ShallowFit form.
inline ShallowFit identity_fit(double range) {
    ShallowFit fit;
    const double h = 2e-4 / std::max(range, 1.0);
    fit.in_w.resize(2);
    fit.in_b = Eigen::VectorXd::Zero(2);
    fit.in_w << h, -h;
    fit.out_w.resize(2);
    fit.out_w << 2.0 / h, -2.0 / h;
    fit.out_b = 0.0;
    double sup = 0.0;
    for (double u : gate_grid(-range, range, 2000)) {
        const double v = fit.out_w[0] * sigmoid(h * u) + fit.out_w[1] * sigmoid(-h * u);
        sup = std::max(sup, std::abs(v - u));
    }
    fit.sup_err = sup;
    return fit;
}

/// Rows of a squaring block applied to an affine functional `coeffs . prev + c0`
/// of the previous layer; appends the block's hidden rows to (w, b) and
/// returns the output-combination columns for later use.
struct BlockRef {
    int first_row = 0;
    int rows = 0;
};

inline BlockRef append_block(Eigen::MatrixXd& w, Eigen::VectorXd& b, int& row,
                             const ShallowFit& fit, const Eigen::VectorXd& coeffs, double c0) {
    BlockRef ref{row, static_cast<int>(fit.in_w.size())};
    for (int j = 0; j < fit.in_w.size(); ++j) {
        w.row(row) = fit.in_w[j] * coeffs.transpose();
        b[row] = fit.in_b[j] + fit.in_w[j] * c0;
        ++row;
    }
    return ref;
}

}  // namespace detail

/**
 * Product net pi_d approximating x_1 * ... * x_d on [-m_range, m_range]^d,
 * assembled as a binary tree of pairwise products, each realized through
 * squaring nets via x y = ((x+y)^2 - x^2 - y^2) / 2. Supported arities:
 * 2, 3, 4. Gated on 10^4 random points.
 */
inline SmoothNet build_product_net(int d, double m_range, double eps) {
    require(d >= 2 && d <= 4, "product net supports arity 2..4");
    require(m_range > 0.0 && eps > 0.0, "invalid range or gate");
    const double out_range = std::pow(m_range, d) + 1.0;

    SmoothNet net;
    bool built = false;
    for (double eps_sq : {eps / 6.0, eps / 20.0, eps / 60.0}) {
        const auto sq1 = detail::squaring_fit(2.0 * m_range, eps_sq);
        if (d == 2) {
            const int n1 = 3 * static_cast<int>(sq1.in_w.size());
            Eigen::MatrixXd w1(n1, 2);
            Eigen::VectorXd b1(n1);
            int row = 0;
            Eigen::VectorXd exy(2), ex(2), ey(2);
            exy << 1, 1;
            ex << 1, 0;
            ey << 0, 1;
            const auto A = detail::append_block(w1, b1, row, sq1, exy, 0.0);
            const auto B = detail::append_block(w1, b1, row, sq1, ex, 0.0);
            const auto C = detail::append_block(w1, b1, row, sq1, ey, 0.0);
            Eigen::MatrixXd w2 = Eigen::MatrixXd::Zero(1, n1);
            for (int j = 0; j < sq1.out_w.size(); ++j) {
                w2(0, A.first_row + j) = 0.5 * sq1.out_w[j];
                w2(0, B.first_row + j) = -0.5 * sq1.out_w[j];
                w2(0, C.first_row + j) = -0.5 * sq1.out_w[j];
            }
            Eigen::VectorXd b2 = Eigen::VectorXd::Constant(1, -0.5 * sq1.out_b);
            net = SmoothNet({Layer{w1, b1}, Layer{w2, b2}}, detail::wide_clip(out_range));
        } else {
            // Pair up the first inputs, wire the rest through, then multiply.
            const int pairs = d / 2;            // products formed at level 1
            const int passthrough = d % 2;      // inputs carried by id-wires
            const double lvl1_range = m_range * m_range + 1.0;
            const auto sq2 = detail::squaring_fit(2.0 * lvl1_range, eps_sq / 4.0);
            const auto idw = detail::identity_fit(m_range);

            const int sq_units = static_cast<int>(sq1.in_w.size());
            const int n1 = pairs * 3 * sq_units + passthrough * 2;
            Eigen::MatrixXd w1 = Eigen::MatrixXd::Zero(n1, d);
            Eigen::VectorXd b1(n1);
            int row = 0;
            struct Lvl1 {
                Eigen::VectorXd combo;  // output functional over layer-1 units
                double bias = 0.0;
            };
            std::vector<Lvl1> vals;
            for (int p = 0; p < pairs; ++p) {
                Eigen::VectorXd exy = Eigen::VectorXd::Zero(d), ex = Eigen::VectorXd::Zero(d),
                                ey = Eigen::VectorXd::Zero(d);
                exy[2 * p] = exy[2 * p + 1] = 1.0;
                ex[2 * p] = 1.0;
                ey[2 * p + 1] = 1.0;
                const auto A = detail::append_block(w1, b1, row, sq1, exy, 0.0);
                const auto B = detail::append_block(w1, b1, row, sq1, ex, 0.0);
                const auto C = detail::append_block(w1, b1, row, sq1, ey, 0.0);
                Lvl1 v;
                v.combo = Eigen::VectorXd::Zero(n1);
                for (int j = 0; j < sq_units; ++j) {
                    v.combo[A.first_row + j] = 0.5 * sq1.out_w[j];
                    v.combo[B.first_row + j] = -0.5 * sq1.out_w[j];
                    v.combo[C.first_row + j] = -0.5 * sq1.out_w[j];
                }
                v.bias = -0.5 * sq1.out_b;
                vals.push_back(std::move(v));
            }
            if (passthrough) {
                Eigen::VectorXd elast = Eigen::VectorXd::Zero(d);
                elast[d - 1] = 1.0;
                const auto I = detail::append_block(w1, b1, row, idw, elast, 0.0);
                Lvl1 v;
                v.combo = Eigen::VectorXd::Zero(n1);
                v.combo[I.first_row] = idw.out_w[0];
                v.combo[I.first_row + 1] = idw.out_w[1];
                v.bias = idw.out_b;
                vals.push_back(std::move(v));
            }

            // Level 2: multiply the two level-1 values.
            const int sq2_units = static_cast<int>(sq2.in_w.size());
            const int n2 = 3 * sq2_units;
            Eigen::MatrixXd w2 = Eigen::MatrixXd::Zero(n2, n1);
            Eigen::VectorXd b2(n2);
            int row2 = 0;
            const auto mk = [&](const Eigen::VectorXd& combo, double bias) {
                return detail::append_block(w2, b2, row2, sq2, combo, bias);
            };
            const auto A = mk(vals[0].combo + vals[1].combo, vals[0].bias + vals[1].bias);
            const auto B = mk(vals[0].combo, vals[0].bias);
            const auto C = mk(vals[1].combo, vals[1].bias);
            Eigen::MatrixXd w3 = Eigen::MatrixXd::Zero(1, n2);
            for (int j = 0; j < sq2_units; ++j) {
                w3(0, A.first_row + j) = 0.5 * sq2.out_w[j];
                w3(0, B.first_row + j) = -0.5 * sq2.out_w[j];
                w3(0, C.first_row + j) = -0.5 * sq2.out_w[j];
            }
            Eigen::VectorXd b3 = Eigen::VectorXd::Constant(1, -0.5 * sq2.out_b);
            net = SmoothNet({Layer{w1, b1}, Layer{w2, b2}, Layer{w3, b3}},
                            detail::wide_clip(out_range));
        }

        // Gate on random points.
        Rng rng(20240u + static_cast<std::uint64_t>(d));
        double sup = 0.0;
        Eigen::VectorXd x(d);
        for (int t = 0; t < 10000; ++t) {
            double prod = 1.0;
            for (int i = 0; i < d; ++i) {
                x[i] = rng.uniform(-m_range, m_range);
                prod *= x[i];
            }
            sup = std::max(sup, std::abs(net.forward(x) - prod));
        }
        if (sup <= eps) {
            built = true;
            break;
        }
    }
    if (!built) {
        std::ostringstream oss;
        oss << "product net gate failed: d=" << d << " m_range=" << m_range
            << " required=" << eps;
        throw ContractError(oss.str());
    }
    return net;
}

/// Result of a spline-net build: the net plus its architecture bookkeeping.
struct SplineNetResult {
    SmoothNet net;
    int product_levels = 0;  // stated schedule: ceil(log2 d) + 1
    double measured_sup = 0.0;
    double gate = 0.0;
};

namespace detail {

/// One-dimensional smooth B-spline surrogate; see build_spline_net.
inline SplineNetResult build_spline_net_1d(int r, double eps) {
    const auto target = [r](double x) { return splines::cardinal_bspline(r, x); };
    const double lo = -static_cast<double>(r) - 2.0, hi = static_cast<double>(r) + 2.0;

    if (r == 0) {
        // The order-0 spline is the indicator itself; delta_B suffices.
        for (double B : {2e4, 1e5, 1e6}) {
            SmoothNet net = build_indicator_net(B);
            double sup = 0.0;
            for (double x : gate_grid(lo, hi, 10000))
                sup = std::max(sup, std::abs(net.forward1d(x) - target(x)));
            if (sup <= eps) return {net, 1, sup, eps};
        }
        throw ContractError("spline net gate failed for r=0");
    }

    const auto a = splines::truncated_power_coeffs(r);
    const auto poly_q = [&](int kpiece, double x) {
        double v = 0.0;
        for (int j = 0; j <= kpiece; ++j) v += a[static_cast<std::size_t>(j)] * std::pow(x - j, r);
        return v;
    };

    double best_sup = std::numeric_limits<double>::infinity();
    SmoothNet best_net;
    for (double B : {1e5, 1e6, 1e7}) {
        for (double hp : {1e-2, 3e-3, 1e-3, 3e-4, 1e-4}) {
            // Layer 1: indicator units sigma(B(x-j)), j = 0..r+2, plus per-piece
            // polynomial bases fitted on a window around each piece.
            const int n_ind = r + 3;
            std::vector<ShallowFit> poly(static_cast<std::size_t>(r + 2));
            for (int k = 0; k <= r + 1; ++k)
                poly[static_cast<std::size_t>(k)] = fit_shallow_1d(
                    [&](double x) { return poly_q(k, x); }, r, k - 1.5, k + 2.5, hp);
            const int poly_units = r + 1;
            const int n1 = n_ind + (r + 2) * poly_units;
            Eigen::MatrixXd w1(n1, 1);
            Eigen::VectorXd b1(n1);
            for (int j = 0; j < n_ind; ++j) {
                w1(j, 0) = B;
                b1[j] = -B * static_cast<double>(j);
            }
            for (int k = 0; k <= r + 1; ++k)
                for (int j = 0; j < poly_units; ++j) {
                    const int row = n_ind + k * poly_units + j;
                    w1(row, 0) = poly[static_cast<std::size_t>(k)].in_w[j];
                    b1[row] = poly[static_cast<std::size_t>(k)].in_b[j];
                }

            // Output functionals of layer 1: delta_B(x-k) and Qhat_k(x).
            const auto delta_combo = [&](int k) {
                Eigen::VectorXd c = Eigen::VectorXd::Zero(n1);
                c[k] = 1.0;
                c[k + 1] = -1.0;
                return std::pair<Eigen::VectorXd, double>(c, 0.0);
            };
            const auto poly_combo = [&](int k) {
                Eigen::VectorXd c = Eigen::VectorXd::Zero(n1);
                for (int j = 0; j < poly_units; ++j)
                    c[n_ind + k * poly_units + j] = poly[static_cast<std::size_t>(k)].out_w[j];
                return std::pair<Eigen::VectorXd, double>(c, poly[static_cast<std::size_t>(k)].out_b);
            };

            // Range actually fed to the pairwise products: the indicator is in
            // [0, 1] up to exponentially small tails and the windowed
            // polynomial values stay near the spline range.
            double m_v = 1.0;
            for (int k = 0; k <= r + 1; ++k)
                for (double x : gate_grid(k - 0.05, k + 1.05, 200)) {
                    double q = poly[static_cast<std::size_t>(k)].out_b;
                    for (int j = 0; j < poly_units; ++j)
                        q += poly[static_cast<std::size_t>(k)].out_w[j] *
                             sigmoid(poly[static_cast<std::size_t>(k)].in_w[j] * x +
                                     poly[static_cast<std::size_t>(k)].in_b[j]);
                    m_v = std::max(m_v, std::abs(q));
                }
            const auto sq = squaring_fit(2.0 * (m_v + 1.2), eps / 8.0);
            const int sq_units = static_cast<int>(sq.in_w.size());

            // Layer 2: one product block per piece.
            const int n2 = (r + 2) * 3 * sq_units;
            Eigen::MatrixXd w2 = Eigen::MatrixXd::Zero(n2, n1);
            Eigen::VectorXd b2(n2);
            Eigen::MatrixXd w3 = Eigen::MatrixXd::Zero(1, n2);
            double b3v = 0.0;
            int row = 0;
            for (int k = 0; k <= r + 1; ++k) {
                const auto [dc, db] = delta_combo(k);
                const auto [pc, pb] = poly_combo(k);
                const auto A = append_block(w2, b2, row, sq, dc + pc, db + pb);
                const auto Bb = append_block(w2, b2, row, sq, dc, db);
                const auto C = append_block(w2, b2, row, sq, pc, pb);
                for (int j = 0; j < sq_units; ++j) {
                    w3(0, A.first_row + j) += 0.5 * sq.out_w[j];
                    w3(0, Bb.first_row + j) += -0.5 * sq.out_w[j];
                    w3(0, C.first_row + j) += -0.5 * sq.out_w[j];
                }
                b3v += -0.5 * sq.out_b;
            }
            Eigen::VectorXd b3 = Eigen::VectorXd::Constant(1, b3v);
            SmoothNet net({Layer{w1, b1}, Layer{w2, b2}, Layer{w3, b3}}, wide_clip(2.0));

            double sup = 0.0;
            for (double x : gate_grid(lo, hi, 10000))
                sup = std::max(sup, std::abs(net.forward1d(x) - target(x)));
            // Tail check: the surrogate must vanish beyond the box.
            for (double x : {hi + 0.5, hi + 2.0, hi + 16.0, hi + 256.0, lo - 0.5, lo - 2.0,
                             lo - 16.0, lo - 256.0})
                sup = std::max(sup, std::abs(net.forward1d(x)));
            if (sup < best_sup) {
                best_sup = sup;
                best_net = net;
            }
            if (best_sup <= 0.5 * eps) break;
        }
        if (best_sup <= 0.5 * eps) break;
    }
    if (best_sup > eps) {
        std::ostringstream oss;
        oss << "spline net gate failed: r=" << r << " measured=" << best_sup
            << " required=" << eps;
        throw ContractError(oss.str());
    }
    return {best_net, 1, best_sup, eps};
}

}  // namespace detail

/**
 * Smooth network surrogate of the base tensor B-spline omega_{0,0} of
 * order r in dimension d, gated at sup error eps on a dense grid over
 * [-r-2, r+2]^d. The product schedule has ceil(log2 d) + 1 levels: one
 * indicator-times-polynomial level inside each coordinate factor and a
 * pairwise tree across coordinates. Rescaling the input to realize
 * omega_{k,l} preserves the sup error exactly.
 */
inline SplineNetResult build_spline_net(int r, int d, double eps) {
    require(r >= 0, "invalid order");
    require(d >= 1 && d <= 3, "spline nets support d in {1,2,3}");
    require(eps > 0.0 && eps < 0.5, "gate must be in (0, 0.5)");
    if (d == 1) return detail::build_spline_net_1d(r, eps);

    // Coordinate factors, then a product tree across them.
    const auto factor = detail::build_spline_net_1d(r, eps / (3.0 * d));
    const auto& fl = factor.net.layers();
    const int hidden1 = static_cast<int>(fl[0].w.rows());
    const int hidden2 = static_cast<int>(fl[1].w.rows());

    // Parallel-stack d copies of the univariate net (layers 1 and 2).
    const int n1 = d * hidden1, n2 = d * hidden2;
    Eigen::MatrixXd w1 = Eigen::MatrixXd::Zero(n1, d);
    Eigen::VectorXd b1(n1);
    Eigen::MatrixXd w2 = Eigen::MatrixXd::Zero(n2, n1);
    Eigen::VectorXd b2(n2);
    std::vector<std::pair<Eigen::VectorXd, double>> outs;  // per-coordinate value functionals
    for (int i = 0; i < d; ++i) {
        w1.block(i * hidden1, i, hidden1, 1) = fl[0].w;
        b1.segment(i * hidden1, hidden1) = fl[0].b;
        w2.block(i * hidden2, i * hidden1, hidden2, hidden1) = fl[1].w;
        b2.segment(i * hidden2, hidden2) = fl[1].b;
        Eigen::VectorXd combo = Eigen::VectorXd::Zero(n2);
        combo.segment(i * hidden2, hidden2) = fl[2].w.row(0);
        outs.emplace_back(combo, fl[2].b[0]);
    }

    const auto sq = detail::squaring_fit(2.4, eps / (6.0 * d));
    const int sq_units = static_cast<int>(sq.in_w.size());
    std::vector<Layer> layers{Layer{w1, b1}, Layer{w2, b2}};

    // Binary product tree; each level multiplies adjacent pairs and wires odd
    // survivors through identity units.
    auto values = outs;
    int prev_width = n2;
    while (values.size() > 1) {
        const int pairs = static_cast<int>(values.size()) / 2;
        const int leftover = static_cast<int>(values.size()) % 2;
        const auto idw = detail::identity_fit(1.5);
        const int nl = pairs * 3 * sq_units + leftover * 2;
        Eigen::MatrixXd wl = Eigen::MatrixXd::Zero(nl, prev_width);
        Eigen::VectorXd bl(nl);
        int row = 0;
        std::vector<std::pair<Eigen::VectorXd, double>> next;
        for (int p = 0; p < pairs; ++p) {
            const auto& [ca, ba] = values[static_cast<std::size_t>(2 * p)];
            const auto& [cb, bb] = values[static_cast<std::size_t>(2 * p + 1)];
            const auto A = detail::append_block(wl, bl, row, sq, ca + cb, ba + bb);
            const auto Bb = detail::append_block(wl, bl, row, sq, ca, ba);
            const auto C = detail::append_block(wl, bl, row, sq, cb, bb);
            Eigen::VectorXd combo = Eigen::VectorXd::Zero(nl);
            for (int j = 0; j < sq_units; ++j) {
                combo[A.first_row + j] = 0.5 * sq.out_w[j];
                combo[Bb.first_row + j] = -0.5 * sq.out_w[j];
                combo[C.first_row + j] = -0.5 * sq.out_w[j];
            }
            next.emplace_back(combo, -0.5 * sq.out_b);
        }
        if (leftover) {
            const auto& [cc, bc] = values.back();
            const auto I = detail::append_block(wl, bl, row, idw, cc, bc);
            Eigen::VectorXd combo = Eigen::VectorXd::Zero(nl);
            combo[I.first_row] = idw.out_w[0];
            combo[I.first_row + 1] = idw.out_w[1];
            next.emplace_back(combo, idw.out_b);
        }
        layers.push_back(Layer{wl, bl});
        prev_width = nl;
        values = std::move(next);
    }
    Eigen::MatrixXd wo(1, prev_width);
    wo.row(0) = values[0].first.transpose();
    Eigen::VectorXd bo = Eigen::VectorXd::Constant(1, values[0].second);
    layers.push_back(Layer{wo, bo});
    SmoothNet net(layers, detail::wide_clip(2.0));

    // Gate against the exact tensor spline on random points in the box.
    Rng rng(551u + static_cast<std::uint64_t>(d) * 7u + static_cast<std::uint64_t>(r));
    double sup = 0.0;
    Eigen::VectorXd x(d);
    for (int t = 0; t < 10000; ++t) {
        double truth = 1.0;
        for (int i = 0; i < d; ++i) {
            x[i] = rng.uniform(-r - 2.0, r + 2.0);
            truth *= splines::cardinal_bspline(r, x[i]);
        }
        sup = std::max(sup, std::abs(net.forward(x) - truth));
    }
    if (sup > eps) {
        std::ostringstream oss;
        oss << "tensor spline net gate failed: r=" << r << " d=" << d << " measured=" << sup
            << " required=" << eps;
        throw ContractError(oss.str());
    }
    int levels = 1;
    for (int v = 1; v < d; v *= 2) ++levels;
    return {net, levels, sup, eps};
}

/// Cache of spline-net templates keyed by (r, d, gate).
inline const SplineNetResult& spline_net_template(int r, int d, double eps) {
    static std::map<std::tuple<int, int, double>, SplineNetResult> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_tuple(r, d, eps);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, build_spline_net(r, d, eps)).first;
    return it->second;
}

/// Rescale a base spline net to realize omega_{k,l}: x -> net(2^k x - l).
/// Only the first layer changes, so the sup error is preserved.
inline SmoothNet rescale_spline_net(const SmoothNet& base, int k, const std::vector<int>& loc) {
    auto layers = base.layers();
    const double scale = static_cast<double>(1 << k);
    Eigen::VectorXd shift(layers[0].w.cols());
    for (Eigen::Index i = 0; i < shift.size(); ++i)
        shift[i] = static_cast<double>(loc[static_cast<std::size_t>(i)]);
    layers[0].b -= layers[0].w * shift;
    layers[0].w *= scale;
    return SmoothNet(layers, base.clip());
}

/**
 * Parallel composition realizing a finite B-spline expansion: one rescaled
 * spline-net block per term with output weight beta_{k,l}. The measured sup
 * error against the exact expansion is bounded by sum |beta| * eps_per_term.
 */
inline SmoothNet build_besov_net(const splines::SplineExpansion& f, double eps_per_term,
                                 ClipSpec clip = ClipSpec{0.0, 0.0}) {
    require(eps_per_term > 0.0, "invalid per-term gate");
    double beta_l1 = 0.0;
    for (const auto& [idx, beta] : f.terms) beta_l1 += std::abs(beta);
    if (clip.c_max <= clip.c_id) clip = detail::wide_clip(beta_l1 + 1.0);

    if (f.terms.empty()) {
        Layer l{Eigen::MatrixXd::Zero(1, f.dim), Eigen::VectorXd::Zero(1)};
        return SmoothNet({l}, clip);
    }

    const auto& tmpl = spline_net_template(f.order, f.dim, eps_per_term);
    std::vector<SmoothNet> blocks;
    std::vector<double> weights;
    for (const auto& [idx, beta] : f.terms) {
        blocks.push_back(rescale_spline_net(tmpl.net, idx.k, idx.loc));
        weights.push_back(beta);
    }

    // Block-diagonal parallel join.
    const auto& proto = blocks.front().layers();
    const std::size_t depth = proto.size();
    std::vector<Layer> layers;
    for (std::size_t li = 0; li + 1 < depth; ++li) {
        int rows = 0, cols = 0;
        for (const auto& blk : blocks) {
            rows += static_cast<int>(blk.layers()[li].w.rows());
            cols = li == 0 ? f.dim : cols + static_cast<int>(blk.layers()[li].w.cols());
        }
        Eigen::MatrixXd w = Eigen::MatrixXd::Zero(rows, cols);
        Eigen::VectorXd b(rows);
        int ro = 0, co = 0;
        for (const auto& blk : blocks) {
            const auto& l = blk.layers()[li];
            if (li == 0) {
                w.block(ro, 0, l.w.rows(), f.dim) = l.w;
            } else {
                w.block(ro, co, l.w.rows(), l.w.cols()) = l.w;
                co += static_cast<int>(l.w.cols());
            }
            b.segment(ro, l.b.size()) = l.b;
            ro += static_cast<int>(l.w.rows());
        }
        layers.push_back(Layer{w, b});
    }
    // Output layer: weighted sum of block outputs.
    int prev = static_cast<int>(layers.back().w.rows());
    Eigen::MatrixXd wo = Eigen::MatrixXd::Zero(1, prev);
    double bo = 0.0;
    int co = 0;
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
        const auto& l = blocks[bi].layers().back();
        wo.block(0, co, 1, l.w.cols()) = weights[bi] * l.w;
        bo += weights[bi] * l.b[0];
        co += static_cast<int>(l.w.cols());
    }
    layers.push_back(Layer{wo, Eigen::VectorXd::Constant(1, bo)});
    SmoothNet net(layers, clip);

    // Contract check on the unit cube.
    require(f.dim == 1 || f.dim == 2, "besov net gate supports d <= 2");
    double sup = 0.0;
    if (f.dim == 1) {
        for (double x : detail::gate_grid(0.0, 1.0, 10000))
            sup = std::max(sup, std::abs(net.forward1d(x) - f.eval1d(x)));
    } else {
        Rng rng(91);
        Eigen::VectorXd x(2);
        for (int t = 0; t < 10000; ++t) {
            x[0] = rng.uniform01();
            x[1] = rng.uniform01();
            sup = std::max(sup, std::abs(net.forward(x) - f.eval({x[0], x[1]})));
        }
    }
    if (sup > beta_l1 * eps_per_term + 1e-12) {
        std::ostringstream oss;
        oss << "besov net gate failed: terms=" << f.terms.size() << " measured=" << sup
            << " budget=" << beta_l1 * eps_per_term;
        throw ContractError(oss.str());
    }
    return net;
}

}  // namespace nets
