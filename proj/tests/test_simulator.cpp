#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "npivlab/simulator.hpp"
#include "oracles.hpp"

using namespace npivlab;
using namespace npivlab::sim;
using namespace npivlab::splines;

namespace {

SplineExpansion smooth_target() {
    BesovParams prm{2.0, 2.0, 2.0, 1};
    return make_besov_target(prm, TargetStyle{}, 11, 1.0);
}

NPIVInstance default_instance(double gamma = 1.0, int K = 6, double tau = 0.12,
                              double sigma = 0.1) {
    return make_instance(gamma, K, tau, smooth_target(), sigma, 0, 1.0);
}

// Kolmogorov-Smirnov distance of a sample against the uniform law.
double ks_uniform(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double d = 0.0;
    const double n = static_cast<double>(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double emp_lo = static_cast<double>(i) / n;
        const double emp_hi = static_cast<double>(i + 1) / n;
        d = std::max({d, std::abs(v[i] - emp_lo), std::abs(v[i] - emp_hi)});
    }
    return d;
}

}  // namespace

TEST_CASE("positivity margin arithmetic") {
    // gamma = 0: margin tau * (1 + 2 + 4)
    auto inst = make_instance(0.0, 2, 0.07, smooth_target(), 0.1, 0, 1.0);
    CHECK(inst.positivity_margin() == Catch::Approx(0.49).epsilon(1e-12));

    // gamma = 2: geometric sum of 2^{-k}
    auto inst2 = make_instance(2.0, 6, 0.4, smooth_target(), 0.1, 0, 1.0);
    double geo = 0.0;
    for (int k = 0; k <= 6; ++k) geo += std::pow(2.0, -k);
    CHECK(inst2.positivity_margin() == Catch::Approx(0.4 * geo).epsilon(1e-12));
    CHECK(inst2.positivity_margin() < 0.8);

    // Violations reject with the computed margin in the message.
    CHECK_THROWS_WITH(make_instance(0.0, 4, 0.2, smooth_target(), 0.1, 0, 1.0),
                      Catch::Matchers::ContainsSubstring("margin"));
}

TEST_CASE("density is positive on the dyadic grid and has uniform marginals") {
    auto inst = default_instance();
    const int cells = 1 << (inst.K + 1);
    double min_d = 1e300;
    for (int i = 0; i < cells; ++i) {
        const double x = (i + 0.5) / cells;
        double row = 0.0;
        for (int j = 0; j < cells; ++j) {
            const double z = (j + 0.5) / cells;
            const double d = inst.density(x, z);
            min_d = std::min(min_d, d);
            row += d / cells;
        }
        // Marginal over z is 1 (uniform) for every x.
        CHECK(row == Catch::Approx(1.0).epsilon(1e-12));
    }
    CHECK(min_d >= 1.0 - inst.positivity_margin() - 1e-12);
    CHECK(min_d > 0.0);
}

TEST_CASE("stage-1 sampling: determinism and independence limit") {
    auto inst = default_instance();
    Rng r1(3, 5), r2(3, 5);
    const auto d1 = sample_stage1(inst, 512, r1);
    const auto d2 = sample_stage1(inst, 512, r2);
    CHECK(d1.x == d2.x);  // byte-identical under the same stream
    CHECK(d1.z == d2.z);

    // tau = 0 decouples X and Z: indicator correlation within MC error.
    auto indep = make_instance(1.0, 6, 0.0, smooth_target(), 0.1, 0, 1.0);
    Rng r3(7, 1);
    const auto d = sample_stage1(indep, 100000, r3);
    double cov = 0.0, mx = 0.0, mz = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double ax = d.x[i] < 0.5 ? 1.0 : 0.0;
        const double az = d.z[i] < 0.5 ? 1.0 : 0.0;
        cov += ax * az;
        mx += ax;
        mz += az;
    }
    const double n = static_cast<double>(d.size());
    cov = cov / n - (mx / n) * (mz / n);
    CHECK(std::abs(cov) <= 3.0 * 0.25 / std::sqrt(n));
}

TEST_CASE("stage-1 sampling: marginal uniformity via KS at 0.01") {
    auto inst = default_instance();
    Rng rng(0, 0);
    const auto d = sample_stage1(inst, 100000, rng);
    const double crit = 1.6276 / std::sqrt(static_cast<double>(d.size()));
    CHECK(ks_uniform(d.x) <= crit);
    CHECK(ks_uniform(d.z) <= crit);
}

TEST_CASE("stage-1 sampling: conditional moment identity") {
    // E[psi_{k,l}(X) psi_{k,l}(Z)] = c_k; pooled over locations per scale.
    auto inst = default_instance(0.7, 5, 0.08);
    Rng rng(1, 9);
    const std::size_t m = 100000;
    const auto d = sample_stage1(inst, m, rng);
    for (int k = 0; k <= 4; ++k) {
        double acc = 0.0, acc2 = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const int lx = cell_of(d.x[i], k);
            double w = 0.0;
            if (lx == cell_of(d.z[i], k)) w = haar(k, lx, d.x[i]) * haar(k, lx, d.z[i]);
            acc += w;
            acc2 += w * w;
        }
        const double mean = acc / static_cast<double>(m);
        // Estimator of sum_l E[psi psi] = 2^k c_k, folded back per location.
        const double est = mean / std::ldexp(1.0, k);
        const double var = (acc2 / m - mean * mean) / static_cast<double>(m);
        const double se = std::sqrt(std::max(var, 1e-300)) / std::ldexp(1.0, k);
        CHECK(std::abs(est - inst.c[static_cast<std::size_t>(k)]) <= 3.0 * se);
    }
}

TEST_CASE("stage-2 sampling: noiseless reductions") {
    // tau = 0, sigma = 0: y is exactly the mean of f_star.
    auto inst0 = make_instance(1.0, 5, 0.0, smooth_target(), 0.0, 0, 1.0);
    Rng rng(2, 2);
    const auto d0 = sample_stage2(inst0, 64, rng);
    const double mean = integrate_expansion(inst0.f_star, 0.0, 1.0);
    for (double y : d0.y) CHECK(y == Catch::Approx(mean).margin(1e-12));

    // sigma = 0 generally: y_i = (T f_star)(z_i) exactly.
    auto inst = make_instance(0.8, 6, 0.08, smooth_target(), 0.0, 0, 1.0);
    Rng rng2(2, 3);
    const auto d = sample_stage2(inst, 128, rng2);
    for (std::size_t i = 0; i < d.size(); ++i)
        CHECK(d.y[i] == Catch::Approx(inst.tf_star.eval(d.z[i])).margin(1e-12));
}

TEST_CASE("stage-2 sampling: noise variance matches within MC error") {
    auto inst = default_instance();
    Rng rng(5, 5);
    const std::size_t n = 100000;
    const auto d = sample_stage2(inst, n, rng);
    double acc = 0.0, acc2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double e = d.y[i] - inst.tf_star.eval(d.z[i]);
        acc += e;
        acc2 += e * e;
    }
    const double var = acc2 / n - sqr(acc / n);
    const double se = std::sqrt(2.0 / (n - 1.0)) * sqr(inst.sigma_eta);  // var of s^2
    CHECK(std::abs(var - sqr(inst.sigma_eta)) <= 3.0 * se);
}

TEST_CASE("apply_T: diagonal action on the Haar system") {
    auto inst = default_instance(0.9, 6, 0.1);
    // f = psi_{k,l} with k <= K maps to c_k psi_{k,l}.
    for (int k : {0, 2, 4}) {
        const int l = k == 0 ? 0 : (1 << k) / 3;
        const auto img = apply_T_quadrature(inst, [&](double x) { return haar(k, l, x); });
        CHECK(img.mean == Catch::Approx(0.0).margin(1e-12));
        for (int kk = 0; kk <= inst.K; ++kk) {
            for (int ll = 0; ll < (1 << kk); ++ll) {
                const double want =
                    (kk == k && ll == l) ? inst.c[static_cast<std::size_t>(k)] : 0.0;
                CHECK(img.coef[kk][ll] == Catch::Approx(want).margin(1e-12));
            }
        }
    }
    // Constants are fixed points.
    const auto one = apply_T_quadrature(inst, [](double) { return 1.0; });
    CHECK(one.mean == Catch::Approx(1.0).epsilon(1e-13));
    CHECK(one.l2_norm() == Catch::Approx(1.0).epsilon(1e-13));
    // Frequencies beyond K are annihilated.
    const auto dead =
        apply_T_quadrature(inst, [&](double x) { return haar(inst.K + 1, 0, x); });
    CHECK(dead.l2_norm() <= 1e-12);
}

TEST_CASE("apply_T: exact spline path agrees with quadrature") {
    auto inst = default_instance();
    const auto exact = apply_T_exact(inst, inst.f_star);
    const auto quad = apply_T_quadrature(inst, [&](double x) { return inst.f_star.eval1d(x); });
    CHECK(exact.mean == Catch::Approx(quad.mean).margin(1e-4));
    for (int k = 0; k <= 3; ++k)
        for (int l = 0; l < (1 << k); ++l)
            CHECK(exact.coef[k][l] == Catch::Approx(quad.coef[k][l]).margin(1e-4));

    // The exact path against independent panel quadrature, tight tolerance.
    const double direct = oracles::integrate(
        [&](double x) { return inst.f_star.eval1d(x); }, 0.0, 0.5, 64);
    CHECK(integrate_expansion(inst.f_star, 0.0, 0.5) == Catch::Approx(direct).margin(1e-10));
}

TEST_CASE("apply_T: linearity and sup-norm contraction") {
    auto inst = default_instance();
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        SplineExpansion f, g;
        f.order = g.order = 2;
        f.dim = g.dim = 1;
        for (int t = 0; t < 6; ++t) {
            const int k = static_cast<int>(rng.below(4));
            const auto locs = level_locations(k, 2, 1);
            f.add(BSplineIndex{k, locs[rng.below(locs.size())]}, rng.uniform(-1, 1));
            g.add(BSplineIndex{k, locs[rng.below(locs.size())]}, rng.uniform(-1, 1));
        }
        const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2);
        SplineExpansion comb = f;
        comb.scale(a);
        for (const auto& [idx, beta] : g.terms) comb.add(idx, b * beta);
        const auto tf = apply_T_exact(inst, f), tg = apply_T_exact(inst, g),
                   tc = apply_T_exact(inst, comb);
        double sup_f = 0.0;
        for (int i = 0; i < 200; ++i) {
            const double z = (i + 0.5) / 200.0;
            CHECK(std::abs(tc.eval(z) - a * tf.eval(z) - b * tg.eval(z)) <= 1e-12);
            sup_f = std::max(sup_f, std::abs(f.eval1d(z)));
        }
        // Sup-norm contraction on a grid (T is an averaging operator).
        double sup_tf = 0.0, sup_f_fine = 0.0;
        for (int i = 0; i < 2000; ++i) {
            const double z = (i + 0.5) / 2000.0;
            sup_tf = std::max(sup_tf, std::abs(tf.eval(z)));
            sup_f_fine = std::max(sup_f_fine, std::abs(f.eval1d(z)));
        }
        CHECK(sup_tf <= sup_f_fine + 1e-10);
    }
}

TEST_CASE("contraction profile decays exactly polynomially") {
    auto inst = default_instance(1.0, 6, 0.13);
    const auto prof = l2_contraction_profile(inst, 5);
    REQUIRE(prof.size() == 6);
    CHECK(prof[0].second == Catch::Approx(0.13).epsilon(1e-12));
    for (std::size_t i = 0; i < prof.size(); ++i) {
        CHECK(prof[i].second ==
              Catch::Approx(0.13 * std::pow(2.0, -1.0 * prof[i].first)).epsilon(1e-12));
        if (i > 0) CHECK(prof[i].second <= prof[i - 1].second);
    }
    // gamma = 1, k = 3 -> tau / 8.
    CHECK(prof[3].second == Catch::Approx(0.13 / 8.0).epsilon(1e-12));
}

TEST_CASE("besov targets: norm and style contracts") {
    BesovParams prm{2.0, 2.0, 2.0, 1};
    const auto smooth = make_besov_target(prm, TargetStyle{}, 5, 0.9);
    CHECK(besov_sequence_norm(smooth, prm) <= 1.0 + 1e-12);
    double sup = 0.0;
    for (int i = 0; i < 10000; ++i)
        sup = std::max(sup, std::abs(smooth.eval1d((i + 0.5) / 10000.0)));
    CHECK(sup <= 0.9 + 1e-9);

    BesovParams spiky_prm{1.2, 1.0, 1.0, 1};
    TargetStyle style;
    style.kind = TargetStyle::spiky;
    style.n_spikes = 4;
    style.spike_level = 6;
    const auto spiky = make_besov_target(spiky_prm, style, 5, 1.0);
    CHECK(besov_sequence_norm(spiky, spiky_prm) <= 1.0 + 1e-12);
    int at_spike_level = 0;
    for (const auto& [idx, beta] : spiky.terms)
        if (idx.k == 6) ++at_spike_level;
    CHECK(at_spike_level == 4);
}

TEST_CASE("hard instances: separation and symmetry") {
    const int k = 5, r = 2;
    const auto fams = make_hard_instances(k, 0.5, 1.5, 1.0, 6, r, 3);
    REQUIRE(fams.size() == 6);

    // All instances share the same sequence norm by sign symmetry.
    BesovParams prm{1.5, 1.0, 1.0, 1};
    const double n0 = besov_sequence_norm(fams[0], prm);
    for (const auto& f : fams)
        CHECK(besov_sequence_norm(f, prm) == Catch::Approx(n0).epsilon(1e-12));

    // Pairwise L2 separation from disjoint supports, against exact panel
    // integration of the squared difference.
    const double omega_sq = oracles::integrate(
        [&](double x) { return sqr(cardinal_bspline(r, x)); }, 0.0, r + 1.0, 3 * (r + 1));
    int j = 0;
    for (int l = 0; l + r + 1 <= (1 << k); l += r + 1) ++j;
    const double amp = std::pow(2.0, -1.5 * k) * 0.5;
    for (std::size_t a = 0; a < fams.size(); ++a) {
        for (std::size_t b = a + 1; b < fams.size(); ++b) {
            const double l2sq = oracles::integrate(
                [&](double x) { return sqr(fams[a].eval1d(x) - fams[b].eval1d(x)); }, 0.0, 1.0,
                1 << k);
            // At least |J_k|/4 differing positions, each worth (2 amp)^2 |omega|^2.
            const double floor_sep =
                (j / 4.0) * 4.0 * sqr(amp) * omega_sq * std::pow(2.0, -k);
            CHECK(l2sq >= floor_sep - 1e-15);
        }
    }

    // count = 1 trivially valid; infeasible packings reject.
    CHECK(make_hard_instances(3, 0.5, 1.5, 1.0, 1, 2, 0).size() == 1);
    CHECK_THROWS_AS(make_hard_instances(2, 0.5, 1.5, 1.0, 4, 2, 0), ContractError);
}
