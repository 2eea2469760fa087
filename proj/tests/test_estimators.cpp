#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "npivlab/estimators.hpp"
#include "oracles.hpp"

using namespace npivlab;
using namespace npivlab::fit;
using namespace npivlab::sim;
using namespace npivlab::splines;

namespace {

SplineExpansion constant_expansion(double c, int order = 2) {
    SplineExpansion f;
    f.order = order;
    f.dim = 1;
    for (const auto& loc : level_locations(0, order, 1))
        f.add(BSplineIndex{0, loc}, c);  // partition of unity
    return f;
}

double stage1_objective(const Eigen::MatrixXd& psi, const Eigen::MatrixXd& phi,
                        const Eigen::MatrixXd& v, double lambda1) {
    return (psi - phi * v.transpose()).squaredNorm() / static_cast<double>(psi.rows()) +
           lambda1 * v.squaredNorm();
}

double stage2_objective(const Eigen::MatrixXd& w, const Eigen::VectorXd& y,
                        const Eigen::VectorXd& u, double lambda2) {
    return (y - w * u).squaredNorm() / static_cast<double>(w.rows()) +
           lambda2 * u.squaredNorm();
}

}  // namespace

TEST_CASE("stage-1 solve: ridge shrinkage and 1-d normal equation") {
    // m = 2 hand dataset, identity features.
    Eigen::MatrixXd psi(2, 1), phi(2, 1);
    psi << 0.9, -0.4;
    phi << 0.5, 1.0;
    const double l1 = 0.05;
    const auto v = stage1_solve(psi, phi, l1);
    // 1-d normal equation: v = sum(psi phi) / (sum(phi^2) + m lambda1)
    const double want = (0.9 * 0.5 - 0.4 * 1.0) / (0.25 + 1.0 + 2 * l1);
    CHECK(v(0, 0) == Catch::Approx(want).epsilon(1e-12));

    // Brute-force scan over v confirms the minimizer (objective gap).
    const auto best = oracles::grid_minimize(
        [&](const std::vector<double>& p) {
            Eigen::MatrixXd vv(1, 1);
            vv << p[0];
            return stage1_objective(psi, phi, vv, l1);
        },
        {-2}, {2});
    Eigen::MatrixXd v_scan(1, 1);
    v_scan << best[0];
    CHECK(stage1_objective(psi, phi, v_scan, l1) - stage1_objective(psi, phi, v, l1) <= 1e-4);
    CHECK(stage1_objective(psi, phi, v_scan, l1) - stage1_objective(psi, phi, v, l1) >= -1e-10);

    // Large ridge drives V to zero.
    const auto v_big = stage1_solve(psi, phi, 1e6);
    CHECK(v_big.norm() <= 1e-6);
    // Minimizer beats V = 0.
    CHECK(stage1_objective(psi, phi, v, l1) <=
          stage1_objective(psi, phi, Eigen::MatrixXd::Zero(1, 1), l1));
}

TEST_CASE("stage-2 solve: zero responses, stationarity, shrinkage") {
    Eigen::MatrixXd w(3, 2);
    w << 1.0, 0.2, -0.3, 0.9, 0.5, -0.5;
    const auto u0 = stage2_solve(w, Eigen::VectorXd::Zero(3), 0.1);
    CHECK(u0.norm() == 0.0);

    Eigen::VectorXd y(3);
    y << 0.7, -0.1, 0.4;
    const double l2 = 0.07;
    const auto u = stage2_solve(w, y, l2);
    // Normal equations: W^T (y - W u) = n lambda2 u.
    const Eigen::VectorXd resid = w.transpose() * (y - w * u);
    CHECK((resid - 3.0 * l2 * u).norm() <= 1e-8);

    // Tenfold ridge never increases ||u||.
    const auto u_shrunk = stage2_solve(w, y, 10 * l2);
    CHECK(u_shrunk.norm() <= u.norm() + 1e-12);
}

TEST_CASE("closed forms match brute-force minimization on micro-instances") {
    Rng rng(123);
    for (int inst = 0; inst < 5; ++inst) {
        const int m = 3 + static_cast<int>(rng.below(3));
        const int dx = 1 + static_cast<int>(rng.below(2));
        const int dz = 1 + static_cast<int>(rng.below(2));
        Eigen::MatrixXd psi(m, dx), phi(m, dz);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < dx; ++j) psi(i, j) = rng.uniform(-1, 1);
            for (int j = 0; j < dz; ++j) phi(i, j) = rng.uniform(-1, 1);
        }
        const double l1 = 0.02 + 0.1 * rng.uniform01();
        const auto v = stage1_solve(psi, phi, l1);
        std::vector<double> lo(static_cast<std::size_t>(dx * dz), -3.0),
            hi(static_cast<std::size_t>(dx * dz), 3.0);
        const auto best = oracles::grid_minimize(
            [&](const std::vector<double>& p) {
                Eigen::MatrixXd vv(dx, dz);
                for (int a = 0; a < dx; ++a)
                    for (int b = 0; b < dz; ++b)
                        vv(a, b) = p[static_cast<std::size_t>(a * dz + b)];
                return stage1_objective(psi, phi, vv, l1);
            },
            lo, hi, 9, 8);
        Eigen::MatrixXd v_scan(dx, dz);
        for (int a = 0; a < dx; ++a)
            for (int b = 0; b < dz; ++b) v_scan(a, b) = best[static_cast<std::size_t>(a * dz + b)];
        const double gap = stage1_objective(psi, phi, v_scan, l1) -
                           stage1_objective(psi, phi, v, l1);
        CHECK(gap >= -1e-10);
        CHECK(gap <= 1e-4);

        // Stage 2 on the induced design.
        const int n = 3 + static_cast<int>(rng.below(3));
        Eigen::MatrixXd phi2(n, dz);
        Eigen::VectorXd y(n);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < dz; ++j) phi2(i, j) = rng.uniform(-1, 1);
            y[i] = rng.uniform(-1, 1);
        }
        const Eigen::MatrixXd w = phi2 * v.transpose();
        const double l2 = 0.02 + 0.1 * rng.uniform01();
        const auto u = stage2_solve(w, y, l2);
        std::vector<double> lo2(static_cast<std::size_t>(dx), -3.0),
            hi2(static_cast<std::size_t>(dx), 3.0);
        const auto ubest = oracles::grid_minimize(
            [&](const std::vector<double>& p) {
                Eigen::VectorXd uu(dx);
                for (int a = 0; a < dx; ++a) uu[a] = p[static_cast<std::size_t>(a)];
                return stage2_objective(w, y, uu, l2);
            },
            lo2, hi2, 11, 8);
        Eigen::VectorXd u_scan(dx);
        for (int a = 0; a < dx; ++a) u_scan[a] = ubest[static_cast<std::size_t>(a)];
        const double gap2 = stage2_objective(w, y, u_scan, l2) - stage2_objective(w, y, u, l2);
        CHECK(gap2 >= -1e-10);
        CHECK(gap2 <= 1e-4);
    }
}

TEST_CASE("sieve: constant-capable basis at kx = 0, r = 0") {
    auto inst = make_instance(1.0, 4, 0.1, constant_expansion(0.4), 0.05, 3, 1.0);
    Rng r1(3, 1), r2(3, 2);
    const auto d1 = sample_stage1(inst, 200, r1);
    const auto d2 = sample_stage2(inst, 200, r2);
    SieveConfig cfg;
    cfg.kx = 0;
    cfg.kz = 1;
    cfg.order = 0;
    const auto model = sieve_2sls_fit(d1, d2, cfg);
    // Order-0 splines at resolution 0 are the indicator of [0,1]: f_hat constant.
    CHECK(model.f_hat(0.2) == Catch::Approx(model.f_hat(0.8)).margin(1e-12));
}

TEST_CASE("sieve: estimate is linear in the stage-2 responses") {
    auto inst = make_instance(0.5, 5, 0.05, constant_expansion(0.5), 0.1, 9, 1.0);
    Rng r1(4, 1), r2(4, 2);
    const auto d1 = sample_stage1(inst, 300, r1);
    auto d2 = sample_stage2(inst, 300, r2);
    SieveConfig cfg;
    cfg.kx = 2;
    cfg.kz = 3;
    const auto model = sieve_2sls_fit(d1, d2, cfg);
    StageTwoData d2s = d2;
    for (auto& yv : d2s.y) yv *= -2.5;
    const auto scaled = sieve_2sls_fit(d1, d2s, cfg);
    for (double x : {0.1, 0.33, 0.5, 0.77, 0.95})
        CHECK(scaled.f_hat(x) == Catch::Approx(-2.5 * model.f_hat(x)).margin(1e-10));
}

TEST_CASE("sieve: well-specified consistency as n grows") {
    // Target inside the resolution-1 span; noiseless; MSE decreases along
    // a doubling grid of sample sizes.
    SplineExpansion target;
    target.order = 2;
    target.dim = 1;
    target.add(BSplineIndex{1, {0}}, 0.6);
    target.add(BSplineIndex{1, {-1}}, 0.2);
    auto inst = make_instance(1.0, 5, 0.1, target, 0.0, 5, 1.0);
    SieveConfig cfg;
    cfg.kx = 1;
    cfg.kz = 2;
    double prev = 1e300;
    for (std::size_t n : {1000u, 10000u}) {
        Rng r1(6, n), r2(7, n);
        const auto d1 = sample_stage1(inst, n, r1);
        const auto d2 = sample_stage2(inst, n, r2);
        const auto model = sieve_2sls_fit(d1, d2, cfg);
        double mse = 0.0;
        for (int i = 0; i < 2000; ++i) {
            const double x = (i + 0.5) / 2000.0;
            mse += sqr(model.f_hat(x) - target.eval1d(x));
        }
        mse /= 2000.0;
        CHECK(mse < prev);
        prev = mse;
    }
    CHECK(prev <= 5e-3);
}

TEST_CASE("kernel baseline: flattening and duplicate centers") {
    auto inst = make_instance(1.0, 4, 0.1, constant_expansion(0.3), 0.05, 8, 1.0);
    Rng r1(8, 1), r2(8, 2);
    const auto d1 = sample_stage1(inst, 400, r1);
    const auto d2 = sample_stage2(inst, 400, r2);
    KernelConfig cfg;
    cfg.bandwidth = 100.0;  // features nearly constant
    const auto model = kernel_2sls_fit(d1, d2, cfg);
    double lo = 1e300, hi = -1e300;
    for (int i = 0; i < 200; ++i) {
        const double v = model.f_hat((i + 0.5) / 200.0);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    CHECK(sqr(hi - lo) <= 1e-6);

    // Duplicate centers produce identical columns; the ridge still solves.
    Eigen::MatrixXd w(3, 2);
    w << 1.0, 1.0, 0.4, 0.4, -0.2, -0.2;
    Eigen::VectorXd y(3);
    y << 1.0, 0.0, 0.5;
    const auto u = stage2_solve(w, y, 0.01);
    CHECK(std::isfinite(u[0]));
    CHECK(u[0] == Catch::Approx(u[1]).margin(1e-10));
}

TEST_CASE("resolution selection: singleton, argmin, determinism") {
    auto inst = make_instance(1.0, 5, 0.12, constant_expansion(0.5), 0.1, 2, 1.0);
    Rng r1(2, 1), r2(2, 2);
    const auto d1 = sample_stage1(inst, 500, r1);
    const auto d2 = sample_stage2(inst, 500, r2);

    SieveConfig base;
    const auto single = sieve_resolution_select(d1, d2, {{3, 4}}, base, 0);
    CHECK(single.kx == 3);
    CHECK(single.kz == 4);

    const std::vector<std::pair<int, int>> grid{{1, 2}, {2, 3}, {3, 4}};
    const auto sel1 = sieve_resolution_select(d1, d2, grid, base, 7);
    const auto sel2 = sieve_resolution_select(d1, d2, grid, base, 7);
    CHECK(sel1.kx == sel2.kx);
    CHECK(sel1.kz == sel2.kz);

    // The returned config attains the grid's best validation MSE.
    const auto [train_idx, val_idx] = validation_split(d2.size(), 7);
    StageTwoData train;
    for (std::size_t i : train_idx) {
        train.y.push_back(d2.y[i]);
        train.z.push_back(d2.z[i]);
    }
    double best = 1e300, got = 0.0;
    for (const auto& [kx, kz] : grid) {
        SieveConfig cfg = base;
        cfg.kx = kx;
        cfg.kz = kz;
        const double mse = stage2_validation_mse(sieve_2sls_fit(d1, train, cfg), d2, val_idx);
        best = std::min(best, mse);
        if (kx == sel1.kx && kz == sel1.kz) got = mse;
    }
    CHECK(got <= 1.1 * best);
}

TEST_CASE("dfiv: epochs = 0 equals the closed-form solve on initial features") {
    auto inst = make_instance(1.0, 5, 0.12, constant_expansion(0.5), 0.1, 4, 1.0);
    Rng r1(5, 1), r2(5, 2);
    const auto d1 = sample_stage1(inst, 150, r1);
    const auto d2 = sample_stage2(inst, 150, r2);
    TrainConfig cfg;
    cfg.warm_start = false;
    cfg.epochs = 0;
    cfg.dx = 4;
    cfg.dz = 5;
    cfg.seed = 21;
    const auto res = dfiv_fit(d1, d2, cfg);
    REQUIRE(!res.aborted);

    // Recompute the two ridge solves directly from the model's features.
    const Eigen::MatrixXd psi_x = design_matrix(res.model.psi, d1.x);
    const Eigen::MatrixXd phi_z = design_matrix(res.model.phi, d1.z);
    const auto v = stage1_solve(psi_x, phi_z, cfg.lambda1);
    CHECK((v - res.model.v).cwiseAbs().maxCoeff() <= 1e-12);
    const Eigen::MatrixXd w = design_matrix(res.model.phi, d2.z) * v.transpose();
    const auto u = stage2_solve(
        w, Eigen::Map<const Eigen::VectorXd>(d2.y.data(), static_cast<Eigen::Index>(d2.y.size())),
        cfg.lambda2);
    CHECK((u - res.model.u).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("dfiv: deterministic under a fixed seed") {
    auto inst = make_instance(1.0, 5, 0.12, constant_expansion(0.5), 0.1, 4, 1.0);
    Rng r1(9, 1), r2(9, 2);
    const auto d1 = sample_stage1(inst, 200, r1);
    const auto d2 = sample_stage2(inst, 200, r2);
    TrainConfig cfg;
    cfg.warm_start = false;
    cfg.epochs = 2;
    cfg.dx = 3;
    cfg.dz = 4;
    cfg.seed = 31;
    const auto a = dfiv_fit(d1, d2, cfg);
    const auto b = dfiv_fit(d1, d2, cfg);
    REQUIRE(!a.aborted);
    REQUIRE(!b.aborted);
    CHECK((a.model.u - b.model.u).norm() == 0.0);
    for (double x : {0.2, 0.5, 0.8}) CHECK(a.model.f_hat(x) == b.model.f_hat(x));
}

TEST_CASE("dfiv: degenerate learnable problem reaches the constant fit") {
    // tau = 0, sigma = 0, constant target: the oracle is the constant.
    const double c = 0.45;
    auto inst = make_instance(1.0, 5, 0.0, constant_expansion(c), 0.0, 6, 1.0);
    Rng r1(12, 1), r2(12, 2);
    const auto d1 = sample_stage1(inst, 400, r1);
    const auto d2 = sample_stage2(inst, 400, r2);
    TrainConfig cfg;
    cfg.lambda_reg = 0.0;
    cfg.seed = 2;
    const auto res = dfiv_fit(d1, d2, cfg);
    REQUIRE(!res.aborted);
    double mse = 0.0;
    for (int i = 0; i < 2000; ++i) mse += sqr(res.model.f_hat((i + 0.5) / 2000.0) - c);
    mse /= 2000.0;
    CHECK(mse <= 1e-3);
}

TEST_CASE("dfiv: stage-1 objective trace is non-increasing across epochs") {
    auto inst = make_instance(1.0, 5, 0.12, constant_expansion(0.5), 0.1, 4, 1.0);
    Rng r1(14, 1), r2(14, 2);
    const auto d1 = sample_stage1(inst, 300, r1);
    const auto d2 = sample_stage2(inst, 300, r2);
    TrainConfig cfg;
    cfg.warm_start = false;
    cfg.epochs = 4;
    cfg.dx = 4;
    cfg.dz = 5;
    cfg.seed = 3;
    const auto res = dfiv_fit(d1, d2, cfg);
    REQUIRE(!res.aborted);  // abort would mean a monotonicity violation
    REQUIRE(res.trace.size() == 4);
}

TEST_CASE("dfiv: regularizer reduces the estimated seminorm") {
    auto inst = make_instance(0.8, 5, 0.08, constant_expansion(0.5), 0.15, 4, 1.0);
    std::vector<double> sems_off, sems_on;
    for (std::uint64_t rep = 0; rep < 5; ++rep) {
        Rng r1(20 + rep, 1), r2(20 + rep, 2);
        const auto d1 = sample_stage1(inst, 250, r1);
        const auto d2 = sample_stage2(inst, 250, r2);
        TrainConfig cfg;
        cfg.warm_start = false;
        cfg.dx = 6;
        cfg.dz = 7;
        cfg.epochs = 3;
        cfg.seed = 100 + rep;
        cfg.reg.kmax = 4;
        cfg.reg.mesh = 257;
        TrainConfig reg_cfg = cfg;
        reg_cfg.lambda_reg = 10.0;
        const auto off = dfiv_fit(d1, d2, cfg);
        const auto on = dfiv_fit(d1, d2, reg_cfg);
        REQUIRE(!off.aborted);
        REQUIRE(!on.aborted);
        splines::BesovParams prm{cfg.reg.s, cfg.reg.p, cfg.reg.q, 1};
        sems_off.push_back(splines::estimate_besov_seminorm(
            [&](double x) { return off.model.f_hat(x); }, prm, cfg.reg.r,
            splines::MeshSpec{cfg.reg.mesh}, cfg.reg.kmax));
        sems_on.push_back(splines::estimate_besov_seminorm(
            [&](double x) { return on.model.f_hat(x); }, prm, cfg.reg.r,
            splines::MeshSpec{cfg.reg.mesh}, cfg.reg.kmax));
    }
    CHECK(median(sems_on) <= median(sems_off) + 1e-12);
}

TEST_CASE("restriction filter: seminorm threshold semantics") {
    RegSpec reg;
    TwoStageModel constant;
    constant.psi = FeatureMap{1, [](double, Eigen::Ref<Eigen::VectorXd> out) { out[0] = 1.0; }};
    constant.u = Eigen::VectorXd::Constant(1, 0.7);
    CHECK(restriction_filter(constant, 0.5, reg));  // seminorm 0

    TwoStageModel wiggly;
    wiggly.psi = FeatureMap{1, [](double x, Eigen::Ref<Eigen::VectorXd> out) {
                                out[0] = std::sin(20.0 * x);
                            }};
    wiggly.u = Eigen::VectorXd::Constant(1, 1.0);
    splines::BesovParams prm{reg.s, reg.p, reg.q, 1};
    const double sem = splines::estimate_besov_seminorm(
        [&](double x) { return wiggly.f_hat(x); }, prm, reg.r, splines::MeshSpec{reg.mesh},
        reg.kmax);
    CHECK(restriction_filter(wiggly, sem, reg));            // boundary accepted
    CHECK(restriction_filter(wiggly, sem + 1e-9, reg));
    // Scaling by 10 with a cutoff between the two seminorms rejects.
    TwoStageModel scaled = wiggly;
    scaled.u = Eigen::VectorXd::Constant(1, 10.0);
    CHECK(!restriction_filter(scaled, 5.0 * sem, reg));
    CHECK(restriction_filter(scaled, 10.0 * sem + 1e-6, reg));
}
