#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "npivlab/besov.hpp"
#include "npivlab/netbuilders.hpp"

using namespace npivlab;
using namespace npivlab::nets;
using namespace npivlab::splines;

TEST_CASE("indicator net: closed-form values and symmetry") {
    SmoothNet net = build_indicator_net(10.0);
    // delta_10(0.5) = 2 sigma(5) - 1
    CHECK(net.forward1d(0.5) == Catch::Approx(2.0 * sigmoid(5.0) - 1.0).epsilon(1e-14));
    CHECK(net.forward1d(0.5) == Catch::Approx(0.9866).margin(5e-5));
    for (double t : {0.1, 0.23, 0.49}) {
        CHECK(net.forward1d(0.5 + t) == Catch::Approx(net.forward1d(0.5 - t)).margin(1e-12));
    }
    CHECK_THROWS_AS(build_indicator_net(0.5), ContractError);
}

TEST_CASE("indicator translates form a near-partition of unity") {
    // |delta_B(x) + delta_B(x-1) + delta_B(x+1) - 1| decays like e^{-B}.
    SmoothNet net = build_indicator_net(30.0);
    double worst = 0.0;
    for (int i = 0; i <= 1000; ++i) {
        const double x = i / 1000.0;
        const double s = net.forward1d(x) + net.forward1d(x - 1.0) + net.forward1d(x + 1.0);
        worst = std::max(worst, std::abs(s - 1.0));
    }
    CHECK(worst <= 1e-9);
}

TEST_CASE("monomial nets: exact low degrees") {
    SmoothNet c = build_monomial_net(0, 3.0, 1e-12);
    CHECK(c.forward1d(-2.0) == 1.0);
    CHECK(c.forward1d(1.7) == 1.0);

    SmoothNet lin = build_monomial_net(1, 3.0, 1e-12);
    CHECK(lin.forward1d(0.3) == 0.3);
    CHECK(lin.forward1d(-2.9) == -2.9);
}

TEST_CASE("monomial nets: gated fits for r >= 2") {
    for (int r : {2, 3, 4}) {
        SmoothNet net = build_monomial_net(r, 3.0, 1e-3);
        CHECK(net.meta().width <= 3 * r / 2 + 2);
        CHECK(net.meta().depth == 2);
        double sup = 0.0;
        for (int i = 0; i < 2000; ++i) {
            const double x = -3.0 + 6.0 * (i + 0.5) / 2000;
            sup = std::max(sup, std::abs(net.forward1d(x) - std::pow(x, r)));
        }
        CHECK(sup <= 1e-3);
    }
    // Unattainable gate rejects cleanly.
    CHECK_THROWS_AS(build_monomial_net(3, 3.0, 1e-13), ContractError);
}

TEST_CASE("product net: pairwise values") {
    SmoothNet p2 = build_product_net(2, 2.0, 1e-3);
    Eigen::VectorXd x(2);
    x << 1.0, 1.0;
    CHECK(std::abs(p2.forward(x) - 1.0) <= 1e-3);
    x << 0.0, 1.7;  // any zero input makes the true product zero
    CHECK(std::abs(p2.forward(x)) <= 1e-3);
    x << -1.3, 0.8;
    CHECK(std::abs(p2.forward(x) - (-1.04)) <= 1e-3);
    // Permutation symmetry up to twice the gate.
    Eigen::VectorXd y(2);
    y << 0.8, -1.3;
    CHECK(std::abs(p2.forward(x) - p2.forward(y)) <= 2e-3);
}

TEST_CASE("product net: arity 3 tree") {
    SmoothNet p3 = build_product_net(3, 1.5, 1e-3);
    Rng rng(3);
    double sup = 0.0;
    Eigen::VectorXd x(3);
    for (int t = 0; t < 500; ++t) {
        double prod = 1.0;
        for (int i = 0; i < 3; ++i) {
            x[i] = rng.uniform(-1.5, 1.5);
            prod *= x[i];
        }
        sup = std::max(sup, std::abs(p3.forward(x) - prod));
    }
    CHECK(sup <= 1e-3);
}

TEST_CASE("spline net: r = 0 reduces to the indicator") {
    const auto res = build_spline_net(0, 1, 1e-2);
    CHECK(res.product_levels == 1);
    CHECK(res.measured_sup <= 1e-2);
    CHECK(res.net.forward1d(0.5) >= 0.99);
}

TEST_CASE("spline net: univariate gates at 1e-2") {
    for (int r : {1, 2, 3}) {
        const auto res = build_spline_net(r, 1, 1e-2);
        CHECK(res.product_levels == 1);  // ceil(log2 1) + 1
        double sup = 0.0;
        for (int i = 0; i < 10000; ++i) {
            const double x = -(r + 2.0) + 2.0 * (r + 2.0) * (i + 0.5) / 10000;
            sup = std::max(sup, std::abs(res.net.forward1d(x) - cardinal_bspline(r, x)));
        }
        CHECK(sup <= 1e-2);
        // Width within a constant factor of floor(3r/2) d + 4 d.
        CHECK(res.net.meta().width <= 12 * (3 * r / 2 + 4));
    }
}

TEST_CASE("spline net: rescaling preserves the sup error") {
    const auto res = build_spline_net(2, 1, 1e-2);
    SmoothNet scaled = rescale_spline_net(res.net, 3, {5});
    double sup = 0.0;
    for (int i = 0; i < 5000; ++i) {
        const double x = (i + 0.5) / 5000.0;
        const double truth = cardinal_bspline(2, 8.0 * x - 5.0);
        sup = std::max(sup, std::abs(scaled.forward1d(x) - truth));
    }
    CHECK(sup <= res.measured_sup + 1e-12);
}

TEST_CASE("spline net: bivariate tensor build") {
    const auto res = build_spline_net(1, 2, 1e-2);
    CHECK(res.product_levels == 2);  // ceil(log2 2) + 1
    Eigen::VectorXd x(2);
    x << 1.0, 1.0;
    CHECK(std::abs(res.net.forward(x) - 1.0) <= 1e-2);
    x << -0.5, 1.0;
    CHECK(std::abs(res.net.forward(x)) <= 1e-2);
}

TEST_CASE("besov net: empty, single and additive expansions") {
    SplineExpansion empty;
    empty.order = 2;
    empty.dim = 1;
    SmoothNet zero = build_besov_net(empty, 1e-3);
    CHECK(zero.forward1d(0.37) == 0.0);

    SplineExpansion single;
    single.order = 2;
    single.dim = 1;
    single.add(BSplineIndex{2, {1}}, 0.8);
    SmoothNet one = build_besov_net(single, 1e-3);
    double sup1 = 0.0;
    for (int i = 0; i < 4000; ++i) {
        const double x = (i + 0.5) / 4000.0;
        sup1 = std::max(sup1, std::abs(one.forward1d(x) - single.eval1d(x)));
    }
    CHECK(sup1 <= 0.8 * 1e-3);

    // Two-term expansion: errors add sub-additively.
    SplineExpansion other;
    other.order = 2;
    other.dim = 1;
    other.add(BSplineIndex{1, {0}}, -0.5);
    SplineExpansion both = single;
    both.add(BSplineIndex{1, {0}}, -0.5);
    SmoothNet two = build_besov_net(both, 1e-3);
    SmoothNet net_other = build_besov_net(other, 1e-3);
    double err_two = 0.0, err_parts = 0.0;
    for (int i = 0; i < 4000; ++i) {
        const double x = (i + 0.5) / 4000.0;
        err_two = std::max(err_two, std::abs(two.forward1d(x) - both.eval1d(x)));
        err_parts = std::max(err_parts, std::abs(one.forward1d(x) - single.eval1d(x)) +
                                            std::abs(net_other.forward1d(x) - other.eval1d(x)));
    }
    CHECK(err_two <= err_parts + 1e-12);
}

TEST_CASE("besov net: approximation rate over budgets") {
    // L2 error of the network realization of the adaptive N-term
    // approximation decays with N for a smooth target.
    BesovParams prm{1.5, 2.0, 2.0, 1};
    const auto target = [](double x) { return std::sin(3.0 * x) + 0.25 * std::cos(11.0 * x); };
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t n : {8, 32, 128}) {
        const auto approx = adaptive_approximation(target, n, prm, 2);
        SmoothNet net = build_besov_net(approx, 1e-5);
        const double err =
            grid_l2_error(target, [&](double x) { return net.forward1d(x); }, 3000);
        CHECK(err <= prev * 1.05 + 1e-9);
        prev = err;
    }
    CHECK(prev <= 2e-3);
}
