#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "npivlab/common.hpp"
#include "npivlab/simulator.hpp"

namespace npivlab::ev {

using sim::StageOneData;
using sim::StageTwoData;

// ---------------------------------------------------------------------------
// Error metrics
// ---------------------------------------------------------------------------

/// Mean squared difference over the uniform dyadic grid of 2^depth midpoints
/// (P_X is uniform in the simulator).
inline double full_mse(const std::function<double(double)>& f_hat,
                       const std::function<double(double)>& f_star, int grid_depth) {
    require(grid_depth >= 10, "metric grid depth must be >= 10");
    const std::size_t n = std::size_t{1} << grid_depth;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
        acc += sqr(f_hat(x) - f_star(x));
    }
    return acc / static_cast<double>(n);
}

/**
 * Projected error ||T(f_hat - f_star)||^2 under the instrument marginal,
 * computed exactly through the simulator's diagonal form: the grid mean of
 * the difference plus its Haar coefficients up to scale K, weighted by c_k^2.
 */
inline double projected_mse(const std::function<double(double)>& f_hat,
                            const std::function<double(double)>& f_star,
                            const sim::NPIVInstance& inst, int grid_depth) {
    require(grid_depth >= inst.K + 4, "metric grid depth must be >= K + 4");
    const std::size_t n = std::size_t{1} << grid_depth;
    std::vector<double> g(n);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
        g[i] = f_hat(x) - f_star(x);
        mean += g[i];
    }
    mean /= static_cast<double>(n);
    double acc = mean * mean;
    for (int k = 0; k <= inst.K; ++k) {
        const double w = std::pow(2.0, 0.5 * k);
        const std::size_t half = n >> (k + 1);
        for (int l = 0; l < (1 << k); ++l) {
            const std::size_t base = static_cast<std::size_t>(l) * (n >> k);
            double left = 0.0, right = 0.0;
            for (std::size_t i = 0; i < half; ++i) {
                left += g[base + i];
                right += g[base + half + i];
            }
            const double coef = w * (left - right) / static_cast<double>(n);
            acc += sqr(inst.c[static_cast<std::size_t>(k)] * coef);
        }
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Exact rational exponent calculator
// ---------------------------------------------------------------------------

/// Exact rational arithmetic for the rate exponents.
struct Rat {
    long long num = 0;
    long long den = 1;

    Rat() = default;
    Rat(long long n, long long d = 1) : num(n), den(d) { normalize(); }

    static long long gcd(long long a, long long b) {
        while (b) {
            const long long t = a % b;
            a = b;
            b = t;
        }
        return a < 0 ? -a : a;
    }

    void normalize() {
        require(den != 0, "rational with zero denominator");
        if (den < 0) {
            num = -num;
            den = -den;
        }
        const long long g = gcd(num < 0 ? -num : num, den);
        if (g > 1) {
            num /= g;
            den /= g;
        }
        if (num == 0) den = 1;
    }

    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    std::string str() const {
        std::ostringstream oss;
        oss << num;
        if (den != 1) oss << "/" << den;
        return oss.str();
    }

    friend Rat operator+(Rat a, Rat b) { return Rat(a.num * b.den + b.num * a.den, a.den * b.den); }
    friend Rat operator-(Rat a, Rat b) { return Rat(a.num * b.den - b.num * a.den, a.den * b.den); }
    friend Rat operator*(Rat a, Rat b) { return Rat(a.num * b.num, a.den * b.den); }
    friend Rat operator/(Rat a, Rat b) {
        require(b.num != 0, "rational division by zero");
        return Rat(a.num * b.den, a.den * b.num);
    }
    friend bool operator==(const Rat& a, const Rat& b) { return a.num == b.num && a.den == b.den; }
    friend bool operator<(const Rat& a, const Rat& b) { return a.num * b.den < b.num * a.den; }
    friend bool operator<=(const Rat& a, const Rat& b) { return a == b || a < b; }

    /// Recover an exact rational from a double that is one (denominator up
    /// to 10^6); rejects values that are not recognizably rational.
    static Rat from_double(double v) {
        require(std::isfinite(v), "exponent inputs must be finite rationals");
        long long best_n = 0, best_d = 1;
        double best_err = std::numeric_limits<double>::infinity();
        for (long long d = 1; d <= 1000000; d = d < 10 ? d + 1 : d * 10) {
            const long long n = static_cast<long long>(std::llround(v * static_cast<double>(d)));
            const double err = std::abs(v - static_cast<double>(n) / static_cast<double>(d));
            if (err < best_err) {
                best_err = err;
                best_n = n;
                best_d = d;
            }
            if (err <= 1e-12 * std::max(1.0, std::abs(v))) break;
        }
        require(best_err <= 1e-9 * std::max(1.0, std::abs(v)),
                "exponent input is not a small rational");
        return Rat(best_n, best_d);
    }
};

inline Rat rat_max(Rat a, Rat b) { return a < b ? b : a; }

/// Inputs of the rate formulas. Delta and d' are derived on demand.
struct ExponentInputs {
    Rat s{2, 1};
    Rat p{2, 1};
    Rat gamma0{1, 2};
    Rat gamma1{1, 2};
    Rat s_prime{0, 1};  // 0 means "maximal smoothness": s' = d_z (s + gamma0) / d_x
    int d_x = 1;
    int d_z = 1;

    Rat delta() const {
        // d_x (1/p - 1/2)_+
        const Rat inv_p = Rat(1) / p;
        const Rat gap = inv_p - Rat(1, 2);
        return Rat(0) < gap ? Rat(d_x) * gap : Rat(0);
    }

    Rat effective_s_prime() const {
        if (s_prime.num == 0) return Rat(d_z) * (s + gamma0) / Rat(d_x);
        return s_prime;
    }

    Rat d_prime() const {
        // max(d_z, d_x - 2 (s - Delta))
        return rat_max(Rat(d_z), Rat(d_x) - Rat(2) * (s - delta()));
    }

    void validate() const {
        require(Rat(0) <= gamma1 && gamma1 <= gamma0, "need gamma0 >= gamma1 >= 0");
        require(delta() < s, "need s > d_x (1/p - 1/2)_+");
        // Lemma constraint: s'/d_z <= (s + gamma0)/d_x.
        require(effective_s_prime() / Rat(d_z) <= (s + gamma0) / Rat(d_x),
                "stage-1 smoothness exceeds the attainable bound");
    }
};

enum class RateKind {
    dfiv_proj_m,
    dfiv_proj_n,
    dfiv_full_m,
    dfiv_full_n,
    optimal_proj,
    optimal_full,
    fixed_proj,
    fixed_full,
};

inline const char* rate_kind_name(RateKind k) {
    switch (k) {
        case RateKind::dfiv_proj_m: return "dfiv_proj_m";
        case RateKind::dfiv_proj_n: return "dfiv_proj_n";
        case RateKind::dfiv_full_m: return "dfiv_full_m";
        case RateKind::dfiv_full_n: return "dfiv_full_n";
        case RateKind::optimal_proj: return "optimal_proj";
        case RateKind::optimal_full: return "optimal_full";
        case RateKind::fixed_proj: return "fixed_proj";
        case RateKind::fixed_full: return "fixed_full";
    }
    return "?";
}

inline RateKind rate_kind_from_name(const std::string& s) {
    for (RateKind k : {RateKind::dfiv_proj_m, RateKind::dfiv_proj_n, RateKind::dfiv_full_m,
                       RateKind::dfiv_full_n, RateKind::optimal_proj, RateKind::optimal_full,
                       RateKind::fixed_proj, RateKind::fixed_full})
        if (s == rate_kind_name(k)) return k;
    throw ContractError("unknown rate kind: " + s);
}

/**
 * The eight rate exponents of the summary table, as exact rationals.
 * Each value e means the corresponding MSE scales as (sample size)^{-e}.
 * The DFIV n-exponents assume maximal stage-1 smoothness unless s_prime
 * is set explicitly.
 */
inline Rat theory_exponent(RateKind kind, const ExponentInputs& in) {
    in.validate();
    const Rat s = in.s, g0 = in.gamma0, g1 = in.gamma1;
    const Rat dx(in.d_x), dz(in.d_z);
    const Rat two(2);
    const Rat delta = in.delta();
    const Rat sp = in.effective_s_prime();
    switch (kind) {
        case RateKind::dfiv_proj_m:
            return (two * s + two * g1) / (two * s + two * g1 + dx);
        case RateKind::dfiv_proj_n:
            // (2 s') / (2 s' + d_z); equals (2s + 2 gamma0)/(2s + 2 gamma0 + d_x)
            // under maximal smoothness.
            return (two * sp) / (two * sp + dz);
        case RateKind::dfiv_full_m:
            return two * (s - g0 + g1) / (two * s + two * g1 + dx);
        case RateKind::dfiv_full_n:
            return (two * sp) / (two * sp + dz) * (s - g0 + g1) / (s + g1);
        case RateKind::optimal_proj:
            return (two * s + two * g0) / (two * s + two * g1 + dx);
        case RateKind::optimal_full:
            return two * s / (two * s + two * g1 + dx);
        case RateKind::fixed_proj:
            return (two * (s - delta) + two * g0) /
                   (two * (s - delta) + two * g1 + in.d_prime());
        case RateKind::fixed_full:
            return two * (s - delta) / (two * (s - delta) + two * g1 + dx);
    }
    throw ContractError("unreachable rate kind");
}

// ---------------------------------------------------------------------------
// Rate sweeps
// ---------------------------------------------------------------------------

/// One grid point of a sweep with its per-replication errors.
struct SweepPoint {
    std::size_t m = 0, n = 0;
    std::vector<double> full;       // per completed replication
    std::vector<double> projected;
    std::vector<std::string> failures;  // abort messages, one per failed rep
    bool complete = false;
    double median_full = 0.0, median_projected = 0.0;
    double iqr_full = 0.0, iqr_projected = 0.0;
};

struct RateVerdict {
    double slope = 0.0, intercept = 0.0, r2 = 0.0;
    double exponent = 0.0;  // theoretical value (positive)
    double tolerance = 0.0;
    bool pass = false;
};

struct RateReport {
    std::vector<SweepPoint> points;
    RateVerdict full, projected;
    std::string estimator;
    std::uint64_t seed = 0;
    int reps = 0;
    bool fit_valid = false;  // >= 4 complete points
};

/// Callable fitting an estimator on one replication and returning f_hat.
using FitFn = std::function<std::function<double(double)>(
    const StageOneData&, const StageTwoData&, std::size_t point_index, std::uint64_t rep_seed)>;

struct SweepSpec {
    std::vector<std::pair<std::size_t, std::size_t>> grid;  // (m, n), sorted by n
    int reps = 3;
    std::uint64_t seed = 0;
    int grid_depth = 14;
    double tol_full = 0.15;
    double tol_projected = 0.15;
    RateKind kind_full = RateKind::optimal_full;
    RateKind kind_projected = RateKind::optimal_proj;
    ExponentInputs exponent_inputs;
    int threads = 1;
    std::string estimator_name = "estimator";
};

namespace detail {

inline double iqr(std::vector<double> v) {
    if (v.size() < 2) return 0.0;
    std::sort(v.begin(), v.end());
    const auto q = [&](double f) {
        const double pos = f * static_cast<double>(v.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const double w = pos - static_cast<double>(lo);
        return lo + 1 < v.size() ? (1.0 - w) * v[lo] + w * v[lo + 1] : v[lo];
    };
    return q(0.75) - q(0.25);
}

/// Runs tasks 0..count-1 over a small worker pool; results must be written
/// into preallocated slots so aggregation order is deterministic.
inline void parallel_for(int count, int threads, const std::function<void(int)>& task) {
    threads = std::max(1, threads);
    if (threads == 1) {
        for (int i = 0; i < count; ++i) task(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) task(i);
        });
    for (auto& th : pool) th.join();
}

}  // namespace detail

/**
 * Runs an estimator over a grid of (m, n) with replications, records full
 * and projected MSE, and fits an ordinary least-squares line to
 * (log n, log median MSE). Replication r of grid point i draws its data
 * from independent streams of (seed, i, r). Failures are recorded and the
 * point marked incomplete; the fit requires at least four complete points.
 */
inline RateReport rate_sweep(const sim::NPIVInstance& inst, const FitFn& fit,
                             const SweepSpec& spec) {
    require(spec.grid.size() >= 4, "need at least four grid points");
    require(spec.reps >= 3, "need at least three replications");
    RateReport report;
    report.estimator = spec.estimator_name;
    report.seed = spec.seed;
    report.reps = spec.reps;
    report.points.resize(spec.grid.size());
    for (std::size_t i = 0; i < spec.grid.size(); ++i) {
        report.points[i].m = spec.grid[i].first;
        report.points[i].n = spec.grid[i].second;
    }

    const int total = static_cast<int>(spec.grid.size()) * spec.reps;
    struct Slot {
        double full = 0.0, projected = 0.0;
        bool ok = false;
        std::string error;
    };
    std::vector<Slot> slots(static_cast<std::size_t>(total));
    const auto f_star = [&inst](double x) { return inst.f_star.eval1d(x); };

    detail::parallel_for(total, spec.threads, [&](int t) {
        const std::size_t pi = static_cast<std::size_t>(t) / static_cast<std::size_t>(spec.reps);
        const std::size_t rep = static_cast<std::size_t>(t) % static_cast<std::size_t>(spec.reps);
        auto& slot = slots[static_cast<std::size_t>(t)];
        try {
            const std::uint64_t stream = (pi << 20) + rep + 1;
            Rng r1(spec.seed, 2 * stream);
            Rng r2(spec.seed, 2 * stream + 1);
            const auto d1 = sim::sample_stage1(inst, spec.grid[pi].first, r1);
            const auto d2 = sim::sample_stage2(inst, spec.grid[pi].second, r2);
            const auto f_hat = fit(d1, d2, pi, spec.seed + stream);
            slot.full = full_mse(f_hat, f_star, spec.grid_depth);
            slot.projected = projected_mse(f_hat, f_star, inst, spec.grid_depth);
            slot.ok = true;
        } catch (const std::exception& e) {
            slot.error = e.what();
        }
    });

    for (std::size_t pi = 0; pi < spec.grid.size(); ++pi) {
        auto& pt = report.points[pi];
        for (int rep = 0; rep < spec.reps; ++rep) {
            const auto& slot = slots[pi * static_cast<std::size_t>(spec.reps) +
                                     static_cast<std::size_t>(rep)];
            if (slot.ok) {
                pt.full.push_back(slot.full);
                pt.projected.push_back(slot.projected);
            } else {
                pt.failures.push_back(slot.error);
            }
        }
        pt.complete = pt.failures.empty() && !pt.full.empty();
        if (!pt.full.empty()) {
            pt.median_full = median(pt.full);
            pt.median_projected = median(pt.projected);
            pt.iqr_full = detail::iqr(pt.full);
            pt.iqr_projected = detail::iqr(pt.projected);
        }
    }

    std::vector<double> lx, ly_full, ly_proj;
    for (const auto& pt : report.points) {
        if (!pt.complete) continue;
        lx.push_back(std::log(static_cast<double>(pt.n)));
        ly_full.push_back(std::log(std::max(pt.median_full, 1e-300)));
        ly_proj.push_back(std::log(std::max(pt.median_projected, 1e-300)));
    }
    report.fit_valid = lx.size() >= 4;
    if (report.fit_valid) {
        const auto ff = fit_line(lx, ly_full);
        const auto fp = fit_line(lx, ly_proj);
        report.full = {ff.slope, ff.intercept, ff.r2,
                       theory_exponent(spec.kind_full, spec.exponent_inputs).value(),
                       spec.tol_full, false};
        report.projected = {fp.slope, fp.intercept, fp.r2,
                            theory_exponent(spec.kind_projected, spec.exponent_inputs).value(),
                            spec.tol_projected, false};
        report.full.pass = std::abs(report.full.slope + report.full.exponent) <=
                           report.full.tolerance;
        report.projected.pass = std::abs(report.projected.slope + report.projected.exponent) <=
                                report.projected.tolerance;
    }
    return report;
}

// ---------------------------------------------------------------------------
// Separation experiment
// ---------------------------------------------------------------------------

struct SeparationReport {
    std::vector<double> mse_a, mse_b;  // full MSE per replication, same data
    double median_a = 0.0, median_b = 0.0;
    double median_ratio = 0.0;  // median_a / median_b
    int reps = 0;
};

/// Runs two estimators on identical replicated datasets and reports their
/// full-MSE pairs plus the ratio of medians.
inline SeparationReport separation_experiment(const sim::NPIVInstance& inst, std::size_t m,
                                              std::size_t n, int reps, const FitFn& fit_a,
                                              const FitFn& fit_b, std::uint64_t seed,
                                              int grid_depth = 14, int threads = 1) {
    require(reps >= 1, "need at least one replication");
    SeparationReport rep;
    rep.reps = reps;
    rep.mse_a.resize(static_cast<std::size_t>(reps));
    rep.mse_b.resize(static_cast<std::size_t>(reps));
    const auto f_star = [&inst](double x) { return inst.f_star.eval1d(x); };
    detail::parallel_for(reps, threads, [&](int r) {
        Rng r1(seed, 2 * static_cast<std::uint64_t>(r) + 11);
        Rng r2(seed, 2 * static_cast<std::uint64_t>(r) + 12);
        const auto d1 = sim::sample_stage1(inst, m, r1);
        const auto d2 = sim::sample_stage2(inst, n, r2);
        const auto fa = fit_a(d1, d2, 0, seed + static_cast<std::uint64_t>(r));
        const auto fb = fit_b(d1, d2, 0, seed + static_cast<std::uint64_t>(r));
        rep.mse_a[static_cast<std::size_t>(r)] = full_mse(fa, f_star, grid_depth);
        rep.mse_b[static_cast<std::size_t>(r)] = full_mse(fb, f_star, grid_depth);
    });
    rep.median_a = median(rep.mse_a);
    rep.median_b = median(rep.mse_b);
    rep.median_ratio = rep.median_a / rep.median_b;
    return rep;
}

}  // namespace npivlab::ev
