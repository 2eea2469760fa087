#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "npivlab/io.hpp"
#include "npivlab/netbuilders.hpp"

namespace npivlab::harness {

using io::json;

// Exit codes shared by every command.
inline constexpr int kOk = 0;
inline constexpr int kConfigError = 1;
inline constexpr int kRuntimeAbort = 2;
inline constexpr int kVerdictFailure = 3;

// ---------------------------------------------------------------------------
// Config fragments
// ---------------------------------------------------------------------------

inline io::Schema target_schema() {
    using S = io::Schema;
    return S::obj({{"style", S::str()},
                   {"s", S::num()},
                   {"p", S::num()},
                   {"q", S::num()},
                   {"C", S::num()},
                   {"order", S::integer_()},
                   {"max_level", S::integer_()},
                   {"n_spikes", S::integer_()},
                   {"spike_level", S::integer_()},
                   {"smooth_levels", S::integer_()}});
}

inline io::Schema instance_schema() {
    using S = io::Schema;
    return S::obj({{"gamma", S::num()},
                   {"K", S::integer_()},
                   {"tau", S::num()},
                   {"sigma_eta", S::num()},
                   {"seed", S::integer_()},
                   {"target", target_schema()}});
}

inline io::Schema estimator_schema() {
    using S = io::Schema;
    return S::obj({{"type", S::str()},
                   {"kx", S::integer_()},
                   {"kz", S::integer_()},
                   {"order", S::integer_()},
                   {"lambda1", S::num()},
                   {"lambda2", S::num()},
                   {"z_family", S::str()},
                   {"oracle_schedule", S::boolean_()},
                   {"select_grid_kx", S::arr()},
                   {"centers", S::integer_()},
                   {"bandwidth", S::num()},
                   {"dx", S::integer_()},
                   {"dz", S::integer_()},
                   {"depth", S::integer_()},
                   {"width", S::integer_()},
                   {"step", S::num()},
                   {"steps_per_phase", S::integer_()},
                   {"epochs", S::integer_()},
                   {"lambda_reg", S::num()},
                   {"q_bar", S::num()},
                   {"warm_start", S::boolean_()},
                   {"warm_budget", S::integer_()},
                   {"warm_eps", S::num()},
                   {"pilot_kx_max", S::integer_()},
                   {"restriction_bound", S::num()},
                   {"reg_kmax", S::integer_()},
                   {"reg_mesh", S::integer_()},
                   {"reg_r", S::integer_()}});
}

struct TargetSpec {
    splines::BesovParams params{2.0, 2.0, 2.0, 1};
    sim::TargetStyle style;
    double bound = 1.0;
    int order = 2;

    static TargetSpec from_json(const json& j) {
        TargetSpec t;
        t.params.s = j.value("s", 2.0);
        t.params.p = j.value("p", 2.0);
        t.params.q = j.value("q", 2.0);
        t.bound = j.value("C", 1.0);
        t.order = j.value("order", 2);
        const std::string style = j.value("style", "smooth");
        if (style == "smooth") {
            t.style.kind = sim::TargetStyle::smooth;
        } else if (style == "spiky") {
            t.style.kind = sim::TargetStyle::spiky;
        } else {
            throw ContractError("target style must be 'smooth' or 'spiky'");
        }
        t.style.max_level = j.value("max_level", 5);
        t.style.n_spikes = j.value("n_spikes", 4);
        t.style.spike_level = j.value("spike_level", 6);
        t.style.smooth_levels = j.value("smooth_levels", 2);
        return t;
    }
};

struct InstanceSpec {
    double gamma = 0.5;
    int K = 7;
    double tau = 0.025;
    double sigma_eta = 0.1;
    std::uint64_t seed = 0;
    TargetSpec target;

    static InstanceSpec from_json(const json& j) {
        io::validate_schema(j, instance_schema(), "instance");
        InstanceSpec s;
        s.gamma = j.value("gamma", 0.5);
        s.K = j.value("K", 7);
        s.tau = j.value("tau", 0.025);
        s.sigma_eta = j.value("sigma_eta", 0.1);
        s.seed = j.value("seed", std::uint64_t{0});
        if (j.contains("target")) s.target = TargetSpec::from_json(j.at("target"));
        return s;
    }

    sim::NPIVInstance build() const {
        const auto f_star = sim::make_besov_target(target.params, target.style, seed,
                                                   target.bound, target.order);
        // Frequency guard on the target itself: its content must stay at
        // least two octaves below the truncation depth.
        int deepest = 0;
        for (const auto& [idx, beta] : f_star.terms) deepest = std::max(deepest, idx.k);
        require(deepest <= K - 2,
                "target resolution exceeds the frequency guard (need max level <= K - 2)");
        return sim::make_instance(gamma, K, tau, f_star, sigma_eta, seed, target.bound);
    }
};

struct EstimatorSpec {
    enum class Kind { sieve, sieve_select, kernel, dfiv, zero } kind = Kind::sieve;
    fit::SieveConfig sieve;
    std::vector<int> select_grid_kx;  // sieve_select: candidate x-resolutions
    fit::KernelConfig kernel;
    fit::TrainConfig dfiv;
    bool oracle_schedule = false;  // sieve: kx(n) = round(log2 n / (2s + 2 gamma + 1))
    std::string name = "sieve";

    static EstimatorSpec from_json(const json& j) {
        io::validate_schema(j, estimator_schema(), "estimator");
        EstimatorSpec e;
        const std::string type = j.value("type", "sieve");
        e.name = type;
        if (type == "sieve") {
            e.kind = Kind::sieve;
        } else if (type == "sieve_select") {
            e.kind = Kind::sieve_select;
        } else if (type == "kernel") {
            e.kind = Kind::kernel;
        } else if (type == "dfiv") {
            e.kind = Kind::dfiv;
        } else if (type == "zero") {
            e.kind = Kind::zero;
        } else {
            throw ContractError("unknown estimator type: " + type);
        }
        e.sieve.kx = j.value("kx", 2);
        e.sieve.kz = j.value("kz", e.sieve.kx + 1);
        e.sieve.order = j.value("order", 2);
        e.sieve.lambda1 = j.value("lambda1", 1e-5);
        e.sieve.lambda2 = j.value("lambda2", 1e-5);
        if (j.value("z_family", "spline") == std::string("haar"))
            e.sieve.z_family = fit::SieveConfig::ZFamily::haar;
        if (j.contains("select_grid_kx"))
            for (const auto& v : j.at("select_grid_kx")) e.select_grid_kx.push_back(v.get<int>());
        e.oracle_schedule = j.value("oracle_schedule", false);

        e.kernel.centers_x = e.kernel.centers_z = j.value("centers", 16);
        e.kernel.bandwidth = j.value("bandwidth", 0.15);
        e.kernel.lambda1 = e.sieve.lambda1;
        e.kernel.lambda2 = e.sieve.lambda2;

        e.dfiv.dx = j.value("dx", 8);
        e.dfiv.dz = j.value("dz", 10);
        e.dfiv.depth = j.value("depth", 2);
        e.dfiv.width = j.value("width", 16);
        e.dfiv.step = j.value("step", 0.5);
        e.dfiv.steps_per_phase = j.value("steps_per_phase", 2);
        e.dfiv.epochs = j.value("epochs", 4);
        e.dfiv.lambda1 = j.value("lambda1", 1e-4);
        e.dfiv.lambda2 = j.value("lambda2", 1e-4);
        e.dfiv.lambda_reg = j.value("lambda_reg", 0.0);
        e.dfiv.q_bar = j.value("q_bar", 4.0);
        e.dfiv.warm_start = j.value("warm_start", true);
        e.dfiv.warm_budget = j.value("warm_budget", 0);
        e.dfiv.warm_eps = j.value("warm_eps", 1e-3);
        e.dfiv.pilot_kx_max = j.value("pilot_kx_max", 4);
        e.dfiv.restriction_bound =
            j.value("restriction_bound", std::numeric_limits<double>::infinity());
        e.dfiv.reg.kmax = j.value("reg_kmax", 4);
        e.dfiv.reg.mesh = j.value("reg_mesh", 257);
        e.dfiv.reg.r = j.value("reg_r", 3);
        return e;
    }
};

/// The oracle sieve resolution schedule used by the rate experiments.
inline int oracle_kx(std::size_t n, double s, double gamma) {
    return std::max(
        0, static_cast<int>(std::lround(std::log2(static_cast<double>(n)) /
                                        (2.0 * s + 2.0 * gamma + 1.0))));
}

/**
 * Enforces the simulator's frequency guard: features whose resolution
 * exceeds K - 2 would probe annihilated frequencies.
 */
inline void check_frequency_guard(int resolution, int K, const std::string& what) {
    if (resolution > K - 2) {
        std::ostringstream oss;
        oss << what << " resolution " << resolution << " exceeds the frequency guard K - 2 = "
            << K - 2 << "; raise K or lower the resolution";
        throw ContractError(oss.str());
    }
}

/// Builds the replication-level fitting callable for a configured estimator.
/// target_s feeds the oracle resolution schedule when one is requested.
inline ev::FitFn make_fit_fn(const EstimatorSpec& spec, const sim::NPIVInstance& inst,
                             double target_s) {
    switch (spec.kind) {
        case EstimatorSpec::Kind::zero:
            return [](const sim::StageOneData&, const sim::StageTwoData&, std::size_t,
                      std::uint64_t) { return [](double) { return 0.0; }; };
        case EstimatorSpec::Kind::sieve: {
            fit::SieveConfig cfg = spec.sieve;
            const bool oracle = spec.oracle_schedule;
            const int K = inst.K;
            const double gamma = inst.gamma;
            if (!oracle) check_frequency_guard(std::max(cfg.kx, cfg.kz), K, "sieve feature");
            return [cfg, oracle, K, gamma, target_s](const sim::StageOneData& d1,
                                                     const sim::StageTwoData& d2, std::size_t,
                                                     std::uint64_t) {
                fit::SieveConfig local = cfg;
                if (oracle) {
                    local.kx = oracle_kx(d2.size(), target_s, gamma);
                    local.kz = local.kx + 1;
                    check_frequency_guard(std::max(local.kx, local.kz), K,
                                          "oracle-schedule sieve feature");
                }
                const auto model = fit::sieve_2sls_fit(d1, d2, local);
                return model.f_hat_fn();
            };
        }
        case EstimatorSpec::Kind::sieve_select: {
            fit::SieveConfig base = spec.sieve;
            std::vector<std::pair<int, int>> grid;
            for (int kx : spec.select_grid_kx) grid.emplace_back(kx, kx + 1);
            if (grid.empty())
                for (int kx = 1; kx <= inst.K - 2; ++kx) grid.emplace_back(kx, kx + 1);
            for (const auto& [kx, kz] : grid)
                check_frequency_guard(std::max(kx, kz), inst.K, "sieve-select feature");
            return [base, grid](const sim::StageOneData& d1, const sim::StageTwoData& d2,
                                std::size_t, std::uint64_t rep_seed) {
                const auto chosen = fit::sieve_resolution_select(d1, d2, grid, base, rep_seed);
                const auto model = fit::sieve_2sls_fit(d1, d2, chosen);
                return model.f_hat_fn();
            };
        }
        case EstimatorSpec::Kind::kernel: {
            fit::KernelConfig cfg = spec.kernel;
            return [cfg](const sim::StageOneData& d1, const sim::StageTwoData& d2, std::size_t,
                         std::uint64_t) {
                const auto model = fit::kernel_2sls_fit(d1, d2, cfg);
                return model.f_hat_fn();
            };
        }
        case EstimatorSpec::Kind::dfiv: {
            fit::TrainConfig cfg = spec.dfiv;
            check_frequency_guard(cfg.pilot_kx_max + 1, inst.K, "dfiv pilot feature");
            return [cfg](const sim::StageOneData& d1, const sim::StageTwoData& d2, std::size_t,
                         std::uint64_t rep_seed) {
                fit::TrainConfig local = cfg;
                local.seed = rep_seed;
                const auto res = fit::dfiv_fit(d1, d2, local);
                if (res.aborted) throw ContractError("dfiv aborted: " + res.abort_reason);
                return res.model.f_hat_fn();
            };
        }
    }
    throw ContractError("unreachable estimator kind");
}

}  // namespace npivlab::harness
