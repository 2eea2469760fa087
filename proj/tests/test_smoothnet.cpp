#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "npivlab/smoothnet.hpp"
#include "oracles.hpp"

using namespace npivlab;
using namespace npivlab::nets;

namespace {

SmoothNet random_net(int in_dim, const std::vector<int>& widths, Rng& rng, ClipSpec clip) {
    std::vector<Layer> layers;
    int prev = in_dim;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        Layer l{Eigen::MatrixXd(widths[i], prev), Eigen::VectorXd(widths[i])};
        for (int a = 0; a < l.w.rows(); ++a) {
            for (int b = 0; b < l.w.cols(); ++b) l.w(a, b) = rng.uniform(-1.0, 1.0);
            l.b[a] = rng.uniform(-0.5, 0.5);
        }
        layers.push_back(std::move(l));
        prev = widths[i];
    }
    return SmoothNet(layers, clip);
}

}  // namespace

TEST_CASE("clip: identity region, bound, Lipschitz") {
    ClipSpec clip{1.5, 2.5};
    CHECK(clip(0.3) == 0.3);
    CHECK(clip(-1.5) == -1.5);
    for (double x : {1.6, 2.0, 3.0, 5.0, 100.0}) {
        CHECK(std::abs(clip(x)) <= 2.5 + 1e-12);
        CHECK(std::abs(clip(-x)) <= 2.5 + 1e-12);
        CHECK(clip(-x) == -clip(x));
    }
    CHECK(clip(100.0) == Catch::Approx(2.5).margin(1e-9));
    // 1-Lipschitz on a fine grid spanning the transition band.
    double prev_x = -6.0, prev_v = clip(-6.0);
    for (int i = 1; i <= 4000; ++i) {
        const double x = -6.0 + 12.0 * i / 4000.0;
        const double v = clip(x);
        CHECK(std::abs(v - prev_v) <= std::abs(x - prev_x) + 1e-9);
        CHECK(v >= prev_v - 1e-12);  // monotone
        prev_x = x;
        prev_v = v;
    }
}

TEST_CASE("forward: trivial nets") {
    // Zero-weight net: clip(0) = 0 for any input.
    Layer l{Eigen::MatrixXd::Zero(1, 2), Eigen::VectorXd::Zero(1)};
    SmoothNet zero({l}, ClipSpec{1.0, 2.0});
    Eigen::VectorXd x(2);
    x << 0.7, -0.3;
    CHECK(zero.forward(x) == 0.0);

    // Affine identity through the clip's identity region.
    Layer id{Eigen::MatrixXd::Constant(1, 1, 1.0), Eigen::VectorXd::Zero(1)};
    SmoothNet ident({id}, ClipSpec{1.0, 2.0});
    CHECK(ident.forward1d(0.3) == 0.3);

    CHECK_THROWS_AS(ident.forward(x), ContractError);  // dimension mismatch
}

TEST_CASE("forward matches a scalar re-evaluation of the composition") {
    Rng rng(5);
    SmoothNet net = random_net(1, {3, 1}, rng, ClipSpec{4.0, 5.0});
    const auto& L = net.layers();
    for (double x : {-0.9, -0.2, 0.0, 0.4, 1.3}) {
        // Brute-force: hidden h_j = sigma(w_j x + b_j); out = clip(sum v_j h_j + c).
        double acc = L[1].b[0];
        for (int j = 0; j < 3; ++j)
            acc += L[1].w(0, j) / (1.0 + std::exp(-(L[0].w(j, 0) * x + L[0].b[j])));
        const double want = net.clip()(acc);
        CHECK(std::abs(net.forward1d(x) - want) <= 1e-15);
    }
}

TEST_CASE("forward output is always within the clip bound") {
    Rng rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        SmoothNet net = random_net(2, {8, 8, 1}, rng, ClipSpec{0.5, 1.0});
        for (int t = 0; t < 100; ++t) {
            Eigen::VectorXd x(2);
            x << rng.uniform(-3, 3), rng.uniform(-3, 3);
            CHECK(std::abs(net.forward(x)) <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("backward matches central finite differences") {
    Rng rng(42);
    for (int trial = 0; trial < 10; ++trial) {
        const int in_dim = 1 + static_cast<int>(rng.below(3));
        std::vector<int> widths;
        const int depth = 2 + static_cast<int>(rng.below(3));  // up to L = 4
        for (int i = 0; i + 1 < depth; ++i) widths.push_back(4 + static_cast<int>(rng.below(61)));
        widths.push_back(1);
        SmoothNet net = random_net(in_dim, widths, rng, ClipSpec{1.2, 2.2});

        Eigen::VectorXd x(in_dim);
        for (int i = 0; i < in_dim; ++i) x[i] = rng.uniform(-1, 1);

        NetGrad g = net.zero_grad();
        net.backward(x, 1.0, g);

        // Compare a random handful of parameter derivatives per net.
        auto layers = net.layers();
        const double step = 1e-5;
        double max_rel = 0.0;
        for (int probe = 0; probe < 12; ++probe) {
            const std::size_t li = rng.below(layers.size());
            const auto& lw = layers[li].w;
            const Eigen::Index idx = static_cast<Eigen::Index>(rng.below(lw.size()));
            auto perturbed = [&](double d) {
                auto ls = layers;
                ls[li].w.data()[idx] += d;
                return SmoothNet(ls, net.clip()).forward(x);
            };
            const double fd = (perturbed(step) - perturbed(-step)) / (2 * step);
            const double an = g.dw[li].data()[idx];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
            max_rel = std::max(max_rel, std::abs(fd - an) / denom);
        }
        // Input gradient against finite differences.
        for (int i = 0; i < in_dim; ++i) {
            auto shift = [&](double d) {
                Eigen::VectorXd xx = x;
                xx[i] += d;
                return net.forward(xx);
            };
            const double fd = (shift(step) - shift(-step)) / (2 * step);
            const double denom = std::max({std::abs(fd), std::abs(g.dx[i]), 1e-6});
            max_rel = std::max(max_rel, std::abs(fd - g.dx[i]) / denom);
        }
        CHECK(max_rel <= 1e-5);
    }
}

TEST_CASE("backward: affine net input gradient is the weight vector") {
    Layer l{Eigen::MatrixXd(1, 3), Eigen::VectorXd::Zero(1)};
    l.w << 0.2, -0.7, 1.1;
    SmoothNet net({l}, ClipSpec{10.0, 11.0});
    Eigen::VectorXd x(3);
    x << 0.1, 0.2, 0.3;
    NetGrad g = net.zero_grad();
    net.backward(x, 1.0, g);
    CHECK(g.dx[0] == Catch::Approx(0.2));
    CHECK(g.dx[1] == Catch::Approx(-0.7));
    CHECK(g.dx[2] == Catch::Approx(1.1));
}

TEST_CASE("backward through a saturated clip is contractive") {
    // Pre-clip output far beyond c_max: the clip derivative vanishes, so the
    // parameter gradient magnitude is bounded by the unclipped one.
    Layer l{Eigen::MatrixXd::Constant(1, 1, 1.0), Eigen::VectorXd::Constant(1, 50.0)};
    SmoothNet net({l}, ClipSpec{1.0, 2.0});
    NetGrad g = net.zero_grad();
    Eigen::VectorXd x(1);
    x << 0.0;
    net.backward(x, 1.0, g);
    CHECK(std::abs(g.dx[0]) <= 1.0 + 1e-12);
    CHECK(std::abs(g.db[0][0]) <= 1.0 + 1e-12);
}

TEST_CASE("meta accounting recomputes exactly") {
    Rng rng(9);
    SmoothNet net = random_net(2, {5, 1}, rng, ClipSpec{1.0, 2.0});
    NetMeta m = net.meta();
    CHECK(m.depth == 2);
    CHECK(m.width == 5);
    CHECK(m.nonzeros == 5 * 2 + 5 + 5 + 1);
    // Zeroing one weight decreases S by exactly one and leaves forward
    // unchanged wherever that path contributed nothing.
    auto layers = net.layers();
    layers[0].w(2, 1) = 0.0;
    SmoothNet pruned(layers, net.clip());
    CHECK(pruned.meta().nonzeros == m.nonzeros - 1);
    Eigen::VectorXd x(2);
    x << 0.9, 0.0;  // dead path: second input is zero
    CHECK(pruned.forward(x) == Catch::Approx(net.forward(x)).epsilon(1e-15));
    CHECK(pruned.meta().max_abs <= m.max_abs);
}

TEST_CASE("bundle evaluates members on a shared input") {
    Rng rng(11);
    NetBundle b;
    b.nets.push_back(random_net(1, {3, 1}, rng, ClipSpec{2.0, 3.0}));
    b.nets.push_back(random_net(1, {4, 1}, rng, ClipSpec{2.0, 3.0}));
    b.validate();
    const auto v = b.eval1d(0.4);
    CHECK(v.size() == 2);
    CHECK(v[0] == Catch::Approx(b.nets[0].forward1d(0.4)));
    CHECK(v[1] == Catch::Approx(b.nets[1].forward1d(0.4)));
}

TEST_CASE("covering bound formula and monotonicity") {
    CHECK(covering_bound(2, 4, 0, 4.0, 0.1) == 0.0);
    // (2+3) * 10 * ln(16) + 10 * ln(10)
    CHECK(covering_bound(2, 4, 10, 4.0, 0.1) ==
          Catch::Approx(50.0 * std::log(16.0) + 10.0 * std::log(10.0)).epsilon(1e-12));
    CHECK(covering_bound(2, 4, 10, 4.0, 0.1) == Catch::Approx(161.6552870).epsilon(1e-6));

    const double base = covering_bound(3, 8, 20, 5.0, 0.05);
    CHECK(covering_bound(4, 8, 20, 5.0, 0.05) >= base);
    CHECK(covering_bound(3, 9, 20, 5.0, 0.05) >= base);
    CHECK(covering_bound(3, 8, 21, 5.0, 0.05) >= base);
    CHECK(covering_bound(3, 8, 20, 6.0, 0.05) >= base);
    CHECK(covering_bound(3, 8, 20, 5.0, 0.01) >= base);

    CHECK_THROWS_AS(covering_bound(2, 4, 10, 3.9, 0.1), ContractError);
}
