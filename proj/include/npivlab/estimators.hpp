#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <vector>

#include "npivlab/besov.hpp"
#include "npivlab/bspline.hpp"
#include "npivlab/common.hpp"
#include "npivlab/netbuilders.hpp"
#include "npivlab/simulator.hpp"
#include "npivlab/smoothnet.hpp"

namespace npivlab::fit {

using sim::StageOneData;
using sim::StageTwoData;

/// A vector feature map on [0,1] (the simulator is univariate on both sides).
struct FeatureMap {
    int dim = 0;
    std::function<void(double, Eigen::Ref<Eigen::VectorXd>)> fill;

    Eigen::VectorXd eval(double t) const {
        Eigen::VectorXd v(dim);
        fill(t, v);
        return v;
    }
};

inline Eigen::MatrixXd design_matrix(const FeatureMap& map, const std::vector<double>& pts) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(pts.size()), map.dim);
    Eigen::VectorXd row(map.dim);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        map.fill(pts[i], row);
        out.row(static_cast<Eigen::Index>(i)) = row.transpose();
    }
    return out;
}

/**
 * Stage-1 ridge solve: V = Psi^T Phi (Phi^T Phi + m lambda1 I)^{-1},
 * the unique minimizer of (1/m) sum ||psi_i - V phi_i||^2 + lambda1 ||V||_F^2.
 */
inline Eigen::MatrixXd stage1_solve(const Eigen::MatrixXd& psi, const Eigen::MatrixXd& phi,
                                    double lambda1) {
    require(lambda1 > 0.0, "stage-1 ridge strength must be positive");
    require(psi.rows() == phi.rows() && psi.rows() > 0, "stage-1 design shapes disagree");
    const double m = static_cast<double>(phi.rows());
    Eigen::MatrixXd gram = phi.transpose() * phi;
    gram.diagonal().array() += m * lambda1;
    // Solve gram X = Phi^T Psi, then V = X^T.
    return gram.ldlt().solve(phi.transpose() * psi).transpose();
}

/**
 * Stage-2 ridge solve: with rows w_i = (V phi(z_i))^T stacked into W,
 * u = (W^T W + n lambda2 I)^{-1} W^T y.
 */
inline Eigen::VectorXd stage2_solve(const Eigen::MatrixXd& w, const Eigen::VectorXd& y,
                                    double lambda2) {
    require(lambda2 > 0.0, "stage-2 ridge strength must be positive");
    require(w.rows() == y.size() && w.rows() > 0, "stage-2 design shapes disagree");
    const double n = static_cast<double>(w.rows());
    Eigen::MatrixXd gram = w.transpose() * w;
    gram.diagonal().array() += n * lambda2;
    return gram.ldlt().solve(w.transpose() * y);
}

/// A fitted two-stage model: feature maps, ridge heads, and the estimate
/// f_hat(x) = u . psi(x).
struct TwoStageModel {
    FeatureMap psi, phi;
    Eigen::MatrixXd v;
    Eigen::VectorXd u;
    double lambda1 = 0.0, lambda2 = 0.0;
    double lambda_reg = 0.0, q_bar = 4.0;

    // Populated by dfiv_fit; empty for fixed-feature baselines.
    std::shared_ptr<nets::NetBundle> psi_nets, phi_nets;

    double f_hat(double x) const { return u.dot(psi.eval(x)); }
    std::function<double(double)> f_hat_fn() const {
        return [*this](double x) { return f_hat(x); };
    }
};

// ---------------------------------------------------------------------------
// Fixed feature dictionaries
// ---------------------------------------------------------------------------

/// All B-splines of resolution k and order r on [0,1]: the span of the
/// hierarchical system up to that resolution.
inline FeatureMap spline_features(int k, int r) {
    const int dim = (1 << k) + r + 1;
    const double scale = std::ldexp(1.0, k);
    return FeatureMap{dim, [k, r, dim, scale](double x, Eigen::Ref<Eigen::VectorXd> out) {
                          (void)k;
                          for (int j = 0; j < dim; ++j)
                              out[j] = splines::cardinal_bspline(
                                  r, scale * x - static_cast<double>(j - r));
                      }};
}

/// Constant plus Haar wavelets up to scale kz (an orthonormal family).
inline FeatureMap haar_features(int kz) {
    const int dim = 1 << (kz + 1);
    return FeatureMap{dim, [kz](double z, Eigen::Ref<Eigen::VectorXd> out) {
                          out.setZero();
                          out[0] = 1.0;
                          int pos = 1;
                          for (int k = 0; k <= kz; ++k) {
                              const int l = sim::cell_of(z, k);
                              out[pos + l] = sim::haar(k, l, z);
                              pos += 1 << k;
                          }
                      }};
}

/// Gaussian bumps at fixed uniform grid centers (a Nystroem-style dictionary).
inline FeatureMap gaussian_features(int centers, double bandwidth) {
    require(centers >= 1 && bandwidth > 0.0, "invalid kernel feature request");
    return FeatureMap{centers, [centers, bandwidth](double x, Eigen::Ref<Eigen::VectorXd> out) {
                          for (int j = 0; j < centers; ++j) {
                              const double c = (j + 0.5) / static_cast<double>(centers);
                              out[j] = std::exp(-0.5 * sqr((x - c) / bandwidth));
                          }
                      }};
}

// ---------------------------------------------------------------------------
// Sieve and kernel baselines
// ---------------------------------------------------------------------------

struct SieveConfig {
    int kx = 2;
    int kz = 3;
    int order = 2;
    double lambda1 = 1e-5;
    double lambda2 = 1e-5;
    enum class ZFamily { spline, haar } z_family = ZFamily::spline;
};

inline TwoStageModel sieve_2sls_fit(const StageOneData& d1, const StageTwoData& d2,
                                    const SieveConfig& cfg) {
    require(cfg.kx >= 0 && cfg.kz >= 0, "resolutions must be >= 0");
    TwoStageModel model;
    model.psi = spline_features(cfg.kx, cfg.order);
    model.phi = cfg.z_family == SieveConfig::ZFamily::spline
                    ? spline_features(cfg.kz, cfg.order)
                    : haar_features(cfg.kz);
    model.lambda1 = cfg.lambda1;
    model.lambda2 = cfg.lambda2;
    const Eigen::MatrixXd psi_x = design_matrix(model.psi, d1.x);
    const Eigen::MatrixXd phi_z = design_matrix(model.phi, d1.z);
    model.v = stage1_solve(psi_x, phi_z, cfg.lambda1);
    const Eigen::MatrixXd phi_z2 = design_matrix(model.phi, d2.z);
    const Eigen::MatrixXd w = phi_z2 * model.v.transpose();
    model.u = stage2_solve(w, Eigen::Map<const Eigen::VectorXd>(d2.y.data(),
                                                                static_cast<Eigen::Index>(
                                                                    d2.y.size())),
                           cfg.lambda2);
    return model;
}

/// The sieve estimate as an explicit single-level spline expansion.
inline splines::SplineExpansion sieve_expansion(const TwoStageModel& model, int kx, int order) {
    splines::SplineExpansion f;
    f.order = order;
    f.dim = 1;
    for (int j = 0; j < model.u.size(); ++j) {
        if (model.u[j] == 0.0) continue;
        f.add(splines::BSplineIndex{kx, {j - order}}, model.u[j]);
    }
    return f;
}

struct KernelConfig {
    int centers_x = 16;
    int centers_z = 16;
    double bandwidth = 0.15;
    double lambda1 = 1e-5;
    double lambda2 = 1e-5;
};

inline TwoStageModel kernel_2sls_fit(const StageOneData& d1, const StageTwoData& d2,
                                     const KernelConfig& cfg) {
    require(cfg.bandwidth > 0.0, "bandwidth must be positive");
    TwoStageModel model;
    model.psi = gaussian_features(cfg.centers_x, cfg.bandwidth);
    model.phi = gaussian_features(cfg.centers_z, cfg.bandwidth);
    model.lambda1 = cfg.lambda1;
    model.lambda2 = cfg.lambda2;
    const Eigen::MatrixXd psi_x = design_matrix(model.psi, d1.x);
    const Eigen::MatrixXd phi_z = design_matrix(model.phi, d1.z);
    model.v = stage1_solve(psi_x, phi_z, cfg.lambda1);
    const Eigen::MatrixXd w = design_matrix(model.phi, d2.z) * model.v.transpose();
    model.u = stage2_solve(w, Eigen::Map<const Eigen::VectorXd>(d2.y.data(),
                                                                static_cast<Eigen::Index>(
                                                                    d2.y.size())),
                           cfg.lambda2);
    return model;
}

/// Deterministic 80/20 split of stage-2 indices under a fixed seed.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> validation_split(
    std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed, 99);
    for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const std::size_t nval = std::max<std::size_t>(1, n / 5);
    std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<long>(nval));
    std::vector<std::size_t> train(idx.begin() + static_cast<long>(nval), idx.end());
    return {train, val};
}

/// Predictive validation error of a fitted model on held-out stage-2 pairs.
inline double stage2_validation_mse(const TwoStageModel& model, const StageTwoData& d2,
                                    const std::vector<std::size_t>& val_idx) {
    double acc = 0.0;
    for (std::size_t i : val_idx) {
        const double pred = model.u.dot(model.v * model.phi.eval(d2.z[i]));
        acc += sqr(d2.y[i] - pred);
    }
    return acc / static_cast<double>(val_idx.size());
}

/**
 * Oracle-style tuning for the sieve baseline: fits every (kx, kz) in the
 * grid on four fifths of the stage-2 data and returns the configuration
 * minimizing validation MSE on the held-out fifth; ties go to the
 * lexicographically smallest pair within 1e-12.
 */
inline SieveConfig sieve_resolution_select(const StageOneData& d1, const StageTwoData& d2,
                                           const std::vector<std::pair<int, int>>& grid,
                                           SieveConfig base, std::uint64_t seed = 0) {
    require(!grid.empty(), "resolution grid must be nonempty");
    const auto [train_idx, val_idx] = validation_split(d2.size(), seed);
    StageTwoData train;
    for (std::size_t i : train_idx) {
        train.y.push_back(d2.y[i]);
        train.z.push_back(d2.z[i]);
    }
    double best = std::numeric_limits<double>::infinity();
    std::pair<int, int> best_pair = grid.front();
    for (const auto& [kx, kz] : grid) {
        SieveConfig cfg = base;
        cfg.kx = kx;
        cfg.kz = kz;
        const auto model = sieve_2sls_fit(d1, train, cfg);
        const double mse = stage2_validation_mse(model, d2, val_idx);
        const bool better = mse < best - 1e-12 ||
                            (std::abs(mse - best) <= 1e-12 &&
                             std::make_pair(kx, kz) < best_pair);
        if (better) {
            best = mse;
            best_pair = {kx, kz};
        }
    }
    SieveConfig out = base;
    out.kx = best_pair.first;
    out.kz = best_pair.second;
    return out;
}

// ---------------------------------------------------------------------------
// DFIV
// ---------------------------------------------------------------------------

/// Besov regularizer parameters used during training and filtering.
struct RegSpec {
    double s = 2.0;
    double p = 2.0;
    double q = 2.0;
    int r = 3;
    int mesh = 257;
    int kmax = 4;
};

struct TrainConfig {
    int dx = 8;                 // feature count, random-feature mode
    int dz = 10;
    int depth = 2;              // net shape, random-feature mode
    int width = 16;
    double step = 0.5;          // gradient step scale (calibrated once at start)
    int steps_per_phase = 2;    // g
    int epochs = 4;             // E
    double lambda1 = 1e-4;
    double lambda2 = 1e-4;
    double lambda_reg = 0.0;
    double q_bar = 4.0;
    RegSpec reg;
    double restriction_bound = std::numeric_limits<double>::infinity();  // C_W
    double output_bound = 2.0;  // C of the structural class; sets the clips
    std::uint64_t seed = 0;

    bool warm_start = true;
    int warm_budget = 0;        // 0: derived from n
    double warm_eps = 1e-3;     // spline-net gate for warm features
    int warm_order = 2;
    int pilot_kx_max = 4;
};

struct TrainTraceRow {
    int epoch = 0;
    double stage1_loss = 0.0;
    double stage2_loss = 0.0;
    double seminorm = 0.0;
};

struct DfivResult {
    TwoStageModel model;
    std::vector<TrainTraceRow> trace;
    bool aborted = false;
    std::string abort_reason;
};

namespace detail {

inline nets::SmoothNet random_feature_net(int depth, int width, double c_id, double c_max,
                                          Rng& rng) {
    std::vector<nets::Layer> layers;
    int prev = 1;
    for (int i = 0; i < depth; ++i) {
        const int rows = (i + 1 == depth) ? 1 : width;
        nets::Layer l{Eigen::MatrixXd(rows, prev), Eigen::VectorXd(rows)};
        const double scale = 0.5 / std::sqrt(static_cast<double>(prev));
        for (int a = 0; a < rows; ++a) {
            for (int b = 0; b < prev; ++b) l.w(a, b) = rng.uniform(-scale, scale);
            l.b[a] = rng.uniform(-scale, scale);
        }
        layers.push_back(std::move(l));
        prev = rows;
    }
    return nets::SmoothNet(layers, nets::ClipSpec{c_id, c_max});
}

/// Evaluate a bundle on a list of points into a design matrix.
inline Eigen::MatrixXd bundle_design(const nets::NetBundle& bundle,
                                     const std::vector<double>& pts) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(pts.size()), bundle.size());
    Eigen::VectorXd x(1);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        x[0] = pts[i];
        for (int j = 0; j < bundle.size(); ++j)
            out(static_cast<Eigen::Index>(i), j) = bundle.nets[static_cast<std::size_t>(j)].forward(x);
    }
    return out;
}

/// Apply an accumulated gradient step to every net in a bundle.
inline void apply_step(nets::NetBundle& bundle, const std::vector<nets::NetGrad>& grads,
                       double step) {
    for (std::size_t j = 0; j < bundle.nets.size(); ++j) {
        auto layers = bundle.nets[j].layers();
        for (std::size_t li = 0; li < layers.size(); ++li) {
            layers[li].w -= step * grads[j].dw[li];
            layers[li].b -= step * grads[j].db[li];
        }
        bundle.nets[j] = nets::SmoothNet(layers, bundle.nets[j].clip());
    }
}

/**
 * One descent step with deterministic halving: starting from *step, find
 * the largest step in {step, step/2, ...} that does not increase `loss`
 * evaluated on the tentative parameters, apply it, and shrink *step for
 * subsequent calls. Returns false when no improving step exists (the
 * iterate is already stationary at this resolution).
 */
inline bool backtracked_step(nets::NetBundle& bundle, const std::vector<nets::NetGrad>& grads,
                             double* step, double current_loss,
                             const std::function<double(const nets::NetBundle&)>& loss) {
    for (int halving = 0; halving < 40; ++halving) {
        nets::NetBundle tentative = bundle;
        apply_step(tentative, grads, *step);
        const double l = loss(tentative);
        if (std::isfinite(l) && l <= current_loss + 1e-14 * (1.0 + std::abs(current_loss))) {
            bundle = std::move(tentative);
            return true;
        }
        *step *= 0.5;
    }
    return false;
}

inline double grad_inf_norm(const std::vector<nets::NetGrad>& grads) {
    double m = 0.0;
    for (const auto& g : grads) {
        for (const auto& w : g.dw) m = std::max(m, w.cwiseAbs().maxCoeff());
        for (const auto& b : g.db)
            if (b.size() > 0) m = std::max(m, b.cwiseAbs().maxCoeff());
    }
    return m;
}

/// Discretized Besov seminorm of f_hat = u . psi on the training mesh plus
/// the adjoints d(seminorm)/d f_hat(mesh point), for regularizer gradients.
struct SeminormWithAdjoints {
    double value = 0.0;
    std::vector<double> mesh;
    std::vector<double> adjoint;  // same length as mesh
};

inline SeminormWithAdjoints seminorm_on_mesh(const std::function<double(double)>& f,
                                             const RegSpec& reg) {
    SeminormWithAdjoints out;
    const int M = reg.mesh;
    require((M - 1) % (1 << reg.kmax) == 0, "mesh incompatible with kmax");
    out.mesh.resize(static_cast<std::size_t>(M));
    std::vector<double> vals(static_cast<std::size_t>(M));
    for (int i = 0; i < M; ++i) {
        out.mesh[static_cast<std::size_t>(i)] = static_cast<double>(i) / (M - 1);
        vals[static_cast<std::size_t>(i)] = f(out.mesh[static_cast<std::size_t>(i)]);
    }
    out.adjoint.assign(static_cast<std::size_t>(M), 0.0);

    const int r = reg.r;
    std::vector<double> wbin(static_cast<std::size_t>(r) + 1);
    for (int j = 0; j <= r; ++j)
        wbin[static_cast<std::size_t>(j)] = (((r - j) % 2 == 0) ? 1.0 : -1.0) * splines::binom(r, j);

    // Forward pass: level norms T_k = 2^{ks} W_k with
    // W_k = ((1/M) sum |Delta|^p)^{1/p}; then S = (sum T_k^q)^{1/q}.
    struct LevelData {
        double w = 0.0;
        std::vector<std::pair<int, double>> diffs;  // (start index, Delta)
    };
    std::vector<LevelData> levels(static_cast<std::size_t>(reg.kmax) + 1);
    for (int k = 0; k <= reg.kmax; ++k) {
        const int stride = (M - 1) / (1 << k);
        auto& ld = levels[static_cast<std::size_t>(k)];
        double acc = 0.0;
        for (int i = 0; i + r * stride < M; ++i) {
            double diff = 0.0;
            for (int j = 0; j <= r; ++j)
                diff += wbin[static_cast<std::size_t>(j)] *
                        vals[static_cast<std::size_t>(i + j * stride)];
            ld.diffs.emplace_back(i, diff);
            acc += std::pow(std::abs(diff), reg.p);
        }
        ld.w = std::pow(acc / M, 1.0 / reg.p);
    }
    double sq = 0.0;
    for (int k = 0; k <= reg.kmax; ++k)
        sq += std::pow(std::pow(2.0, reg.s * k) * levels[static_cast<std::size_t>(k)].w, reg.q);
    out.value = std::pow(sq, 1.0 / reg.q);
    if (out.value <= 1e-300) return out;  // constant function, zero gradient

    // Backward pass to mesh values.
    for (int k = 0; k <= reg.kmax; ++k) {
        const auto& ld = levels[static_cast<std::size_t>(k)];
        if (ld.w <= 1e-300) continue;
        const double t_k = std::pow(2.0, reg.s * k) * ld.w;
        // dS/dW_k = S^{1-q} T_k^{q-1} 2^{ks}
        const double ds_dw = std::pow(out.value, 1.0 - reg.q) * std::pow(t_k, reg.q - 1.0) *
                             std::pow(2.0, reg.s * k);
        const int stride = (M - 1) / (1 << k);
        const double w_pow = std::pow(ld.w, 1.0 - reg.p) / M;
        for (const auto& [i, diff] : ld.diffs) {
            if (std::abs(diff) <= 1e-300) continue;
            const double dd = w_pow * std::pow(std::abs(diff), reg.p - 1.0) *
                              (diff > 0 ? 1.0 : -1.0) * ds_dw;
            for (int j = 0; j <= r; ++j)
                out.adjoint[static_cast<std::size_t>(i + j * stride)] +=
                    dd * wbin[static_cast<std::size_t>(j)];
        }
    }
    return out;
}

}  // namespace detail

/// Domain-restriction filter: accept a trained model iff the discretized
/// Besov seminorm of f_hat is at most the bound (closed constraint).
inline bool restriction_filter(const TwoStageModel& model, double c_w, const RegSpec& reg) {
    if (!std::isfinite(c_w)) return true;
    splines::BesovParams prm{reg.s, reg.p, reg.q, 1};
    const double sem = splines::estimate_besov_seminorm(
        [&model](double x) { return model.f_hat(x); }, prm, reg.r,
        splines::MeshSpec{reg.mesh}, reg.kmax);
    return sem <= c_w;
}

/**
 * DFIV: alternating two-stage training around closed-form ridge heads.
 *
 * Each epoch runs g gradient steps on the instrument nets phi (stage-1
 * empirical loss, with V re-solved before every step and frozen through the
 * step), then g gradient steps on the treatment nets psi (stage-2 empirical
 * loss plus the Besov penalty lambda_reg * seminorm^{q_bar}); the data term
 * reaches theta_x through the closed form V(theta_x) = Psi^T Phi G while u
 * stays frozen during the step, following the partial-backpropagation
 * scheme of the underlying algorithm. Feature nets start either from small
 * random weights or, with warm_start, from spline-net blocks placed at the
 * terms of an adaptive approximation of a pilot sieve fit.
 *
 * The stage-1 ridge objective must not increase across the steps of a
 * phase; a violation aborts training with the partial trace preserved.
 */
inline DfivResult dfiv_fit(const StageOneData& d1, const StageTwoData& d2,
                           const TrainConfig& cfg) {
    require(d1.size() >= 2 && d2.size() >= 2, "training data must be nonempty");
    require(cfg.q_bar > 2.0, "penalty exponent must exceed 2");
    require(cfg.lambda1 > 0.0 && cfg.lambda2 > 0.0, "ridge strengths must be positive");
    const std::size_t m = d1.size(), n = d2.size();

    DfivResult res;
    auto psi = std::make_shared<nets::NetBundle>();
    auto phi = std::make_shared<nets::NetBundle>();
    // Stage-1 nets clip strictly above the stage-2 clip band.
    const double c_id_x = cfg.output_bound + 1.0, c_max_x = cfg.output_bound + 2.0;
    const double c_id_z = cfg.output_bound + 2.25, c_max_z = cfg.output_bound + 3.25;

    if (cfg.warm_start) {
        // Pilot sieve fit tuned on a validation fifth, then an adaptive
        // approximation of it; its terms become the treatment features.
        std::vector<std::pair<int, int>> grid;
        for (int k = 1; k <= cfg.pilot_kx_max; ++k) grid.emplace_back(k, k + 1);
        SieveConfig base;
        base.order = cfg.warm_order;
        base.lambda1 = cfg.lambda1;
        base.lambda2 = cfg.lambda2;
        const SieveConfig pilot_cfg = sieve_resolution_select(d1, d2, grid, base, cfg.seed);
        const auto pilot = sieve_2sls_fit(d1, d2, pilot_cfg);
        const auto pilot_expansion = sieve_expansion(pilot, pilot_cfg.kx, cfg.warm_order);

        const std::size_t budget =
            cfg.warm_budget > 0
                ? static_cast<std::size_t>(cfg.warm_budget)
                : std::max<std::size_t>(
                      8, static_cast<std::size_t>(std::lround(1.6 * std::cbrt(double(n)))));
        splines::BesovParams prm{cfg.reg.s, cfg.reg.p, cfg.reg.q, 1};
        splines::SplineExpansion terms;
        try {
            terms = splines::adaptive_approximation(
                [&pilot_expansion](double x) { return pilot_expansion.eval1d(x); }, budget, prm,
                cfg.warm_order);
        } catch (const ContractError&) {
            terms = pilot_expansion;  // budget smaller than level 0: keep the pilot
        }
        if (terms.terms.empty()) terms.add(splines::BSplineIndex{0, {0}}, 0.0);

        const auto& tmpl = nets::spline_net_template(cfg.warm_order, 1, cfg.warm_eps);
        int kz_feat = 0;
        for (const auto& [idx, beta] : terms.terms) kz_feat = std::max(kz_feat, idx.k);
        for (const auto& [idx, beta] : terms.terms) {
            auto blk = nets::rescale_spline_net(tmpl.net, idx.k, idx.loc);
            auto layers = blk.layers();
            psi->nets.emplace_back(layers, nets::ClipSpec{c_id_x, c_max_x});
        }
        // Instrument features: a dense spline-net level matching the pilot.
        const int kz = std::min(pilot_cfg.kz, kz_feat + 1);
        for (const auto& loc : splines::level_locations(kz, cfg.warm_order, 1)) {
            auto blk = nets::rescale_spline_net(tmpl.net, kz, loc);
            auto layers = blk.layers();
            phi->nets.emplace_back(layers, nets::ClipSpec{c_id_z, c_max_z});
        }
    } else {
        Rng rng(cfg.seed, 17);
        for (int j = 0; j < cfg.dx; ++j)
            psi->nets.push_back(
                detail::random_feature_net(cfg.depth, cfg.width, c_id_x, c_max_x, rng));
        for (int j = 0; j < cfg.dz; ++j)
            phi->nets.push_back(
                detail::random_feature_net(cfg.depth, cfg.width, c_id_z, c_max_z, rng));
    }

    const int dx = psi->size(), dz = phi->size();
    const Eigen::Map<const Eigen::VectorXd> y(d2.y.data(), static_cast<Eigen::Index>(n));

    Eigen::MatrixXd psi_x = detail::bundle_design(*psi, d1.x);
    Eigen::MatrixXd phi_z = detail::bundle_design(*phi, d1.z);
    Eigen::MatrixXd phi_z2 = detail::bundle_design(*phi, d2.z);

    const auto stage1_objective = [&](const Eigen::MatrixXd& v) {
        const Eigen::MatrixXd r_mat = psi_x - phi_z * v.transpose();
        return r_mat.squaredNorm() / static_cast<double>(m) +
               cfg.lambda1 * v.squaredNorm();
    };

    double step_z = 0.0, step_x = 0.0;  // calibrated on first use, then only shrink
    Eigen::MatrixXd v = stage1_solve(psi_x, phi_z, cfg.lambda1);
    Eigen::VectorXd u = stage2_solve(phi_z2 * v.transpose(), y, cfg.lambda2);

    for (int epoch = 1; epoch <= cfg.epochs && !res.aborted; ++epoch) {
        // ---- Phase A: instrument nets -------------------------------------
        double j_prev = std::numeric_limits<double>::infinity();
        for (int step = 0; step < cfg.steps_per_phase; ++step) {
            phi_z = detail::bundle_design(*phi, d1.z);
            v = stage1_solve(psi_x, phi_z, cfg.lambda1);
            const double j_now = stage1_objective(v);
            if (!std::isfinite(j_now)) {
                res.aborted = true;
                res.abort_reason = "non-finite stage-1 loss";
                break;
            }
            if (j_now > j_prev * (1.0 + 1e-9) + 1e-12) {
                res.aborted = true;
                std::ostringstream oss;
                oss << "stage-1 objective increased: " << j_prev << " -> " << j_now;
                res.abort_reason = oss.str();
                break;
            }
            j_prev = j_now;
            // dL/dPhi = -(2/m) (Psi - Phi V^T) V, with V frozen through the
            // step. Descending the frozen-V loss also descends the solved
            // objective, which it majorizes.
            const Eigen::MatrixXd resid = psi_x - phi_z * v.transpose();
            const Eigen::MatrixXd dphi = (-2.0 / static_cast<double>(m)) * resid * v;
            std::vector<nets::NetGrad> grads;
            for (const auto& net : phi->nets) grads.push_back(net.zero_grad());
            Eigen::VectorXd zin(1);
            for (std::size_t i = 0; i < m; ++i) {
                zin[0] = d1.z[i];
                for (int j = 0; j < dz; ++j) {
                    const double seed = dphi(static_cast<Eigen::Index>(i), j);
                    if (seed != 0.0)
                        phi->nets[static_cast<std::size_t>(j)].backward(
                            zin, seed, grads[static_cast<std::size_t>(j)]);
                }
            }
            if (step_z == 0.0)
                step_z = cfg.step / (1.0 + detail::grad_inf_norm(grads));
            const Eigen::MatrixXd v_frozen = v;
            detail::backtracked_step(
                *phi, grads, &step_z, j_now, [&](const nets::NetBundle& cand) {
                    const Eigen::MatrixXd cand_design = detail::bundle_design(cand, d1.z);
                    return (psi_x - cand_design * v_frozen.transpose()).squaredNorm() /
                               static_cast<double>(m) +
                           cfg.lambda1 * v_frozen.squaredNorm();
                });
        }
        if (res.aborted) break;
        phi_z = detail::bundle_design(*phi, d1.z);
        phi_z2 = detail::bundle_design(*phi, d2.z);

        // ---- Phase B: treatment nets --------------------------------------
        // G is fixed through the phase (phi frozen); V and u are re-solved
        // before each step and frozen through the step's gradient.
        Eigen::MatrixXd gram = phi_z.transpose() * phi_z;
        gram.diagonal().array() += static_cast<double>(m) * cfg.lambda1;
        const Eigen::LDLT<Eigen::MatrixXd> g_fact(gram);
        double last_stage2 = 0.0, last_sem = 0.0;
        for (int step = 0; step < cfg.steps_per_phase; ++step) {
            psi_x = detail::bundle_design(*psi, d1.x);
            v = psi_x.transpose() * g_fact.solve(phi_z.transpose()).transpose();
            const Eigen::MatrixXd w = phi_z2 * v.transpose();
            u = stage2_solve(w, y, cfg.lambda2);
            const Eigen::VectorXd resid = w * u - y;
            const double data_loss = resid.squaredNorm() / static_cast<double>(n);

            detail::SeminormWithAdjoints sem;
            if (cfg.lambda_reg > 0.0) {
                sem = detail::seminorm_on_mesh(
                    [&](double x) {
                        Eigen::VectorXd xin(1);
                        xin[0] = x;
                        double acc = 0.0;
                        for (int j = 0; j < dx; ++j)
                            acc += u[j] * psi->nets[static_cast<std::size_t>(j)].forward(xin);
                        return acc;
                    },
                    cfg.reg);
            }
            last_stage2 = data_loss + cfg.lambda2 * u.squaredNorm() +
                          cfg.lambda_reg * std::pow(sem.value, cfg.q_bar);
            last_sem = sem.value;
            if (!std::isfinite(last_stage2)) {
                res.aborted = true;
                res.abort_reason = "non-finite stage-2 loss";
                break;
            }

            // Data gradient through V(theta_x): dL/d f_hat(x_a).
            const Eigen::VectorXd dl_dfhat =
                (2.0 / static_cast<double>(n)) *
                (phi_z * g_fact.solve(phi_z2.transpose() * resid));
            std::vector<nets::NetGrad> grads;
            for (const auto& net : psi->nets) grads.push_back(net.zero_grad());
            Eigen::VectorXd xin(1);
            for (std::size_t a = 0; a < m; ++a) {
                if (dl_dfhat[static_cast<Eigen::Index>(a)] == 0.0) continue;
                xin[0] = d1.x[a];
                for (int j = 0; j < dx; ++j) {
                    const double seed = dl_dfhat[static_cast<Eigen::Index>(a)] * u[j];
                    if (seed != 0.0)
                        psi->nets[static_cast<std::size_t>(j)].backward(
                            xin, seed, grads[static_cast<std::size_t>(j)]);
                }
            }
            if (cfg.lambda_reg > 0.0 && sem.value > 0.0) {
                const double outer =
                    cfg.lambda_reg * cfg.q_bar * std::pow(sem.value, cfg.q_bar - 1.0);
                for (std::size_t t = 0; t < sem.mesh.size(); ++t) {
                    if (sem.adjoint[t] == 0.0) continue;
                    xin[0] = sem.mesh[t];
                    for (int j = 0; j < dx; ++j) {
                        const double seed = outer * sem.adjoint[t] * u[j];
                        if (seed != 0.0)
                            psi->nets[static_cast<std::size_t>(j)].backward(
                                xin, seed, grads[static_cast<std::size_t>(j)]);
                    }
                }
            }
            if (step_x == 0.0)
                step_x = cfg.step / (1.0 + detail::grad_inf_norm(grads));
            // Tentative objective: u frozen, V re-solved through the closed form.
            const Eigen::VectorXd u_frozen = u;
            const double current =
                data_loss + cfg.lambda2 * u.squaredNorm() +
                cfg.lambda_reg * std::pow(sem.value, cfg.q_bar);
            detail::backtracked_step(
                *psi, grads, &step_x, current, [&](const nets::NetBundle& cand) {
                    const Eigen::MatrixXd cand_psi = detail::bundle_design(cand, d1.x);
                    const Eigen::MatrixXd cand_v =
                        cand_psi.transpose() * g_fact.solve(phi_z.transpose()).transpose();
                    const Eigen::VectorXd cand_res = phi_z2 * cand_v.transpose() * u_frozen - y;
                    double obj = cand_res.squaredNorm() / static_cast<double>(n) +
                                 cfg.lambda2 * u_frozen.squaredNorm();
                    if (cfg.lambda_reg > 0.0) {
                        const auto cand_sem = detail::seminorm_on_mesh(
                            [&](double x) {
                                Eigen::VectorXd xi(1);
                                xi[0] = x;
                                double acc = 0.0;
                                for (int j = 0; j < dx; ++j)
                                    acc += u_frozen[j] *
                                           cand.nets[static_cast<std::size_t>(j)].forward(xi);
                                return acc;
                            },
                            cfg.reg);
                        obj += cfg.lambda_reg * std::pow(cand_sem.value, cfg.q_bar);
                    }
                    return obj;
                });
        }
        if (res.aborted) break;
        psi_x = detail::bundle_design(*psi, d1.x);
        v = stage1_solve(psi_x, phi_z, cfg.lambda1);
        u = stage2_solve(phi_z2 * v.transpose(), y, cfg.lambda2);
        res.trace.push_back({epoch, stage1_objective(v), last_stage2, last_sem});
    }

    // Final closed-form heads on the trained features.
    psi_x = detail::bundle_design(*psi, d1.x);
    phi_z = detail::bundle_design(*phi, d1.z);
    phi_z2 = detail::bundle_design(*phi, d2.z);
    v = stage1_solve(psi_x, phi_z, cfg.lambda1);
    u = stage2_solve(phi_z2 * v.transpose(), y, cfg.lambda2);

    TwoStageModel model;
    model.psi = FeatureMap{dx, [psi](double x, Eigen::Ref<Eigen::VectorXd> out) {
                               out = psi->eval1d(x);
                           }};
    model.phi = FeatureMap{dz, [phi](double z, Eigen::Ref<Eigen::VectorXd> out) {
                               out = phi->eval1d(z);
                           }};
    model.v = v;
    model.u = u;
    model.lambda1 = cfg.lambda1;
    model.lambda2 = cfg.lambda2;
    model.lambda_reg = cfg.lambda_reg;
    model.q_bar = cfg.q_bar;
    model.psi_nets = psi;
    model.phi_nets = phi;
    res.model = std::move(model);
    return res;
}

}  // namespace npivlab::fit
