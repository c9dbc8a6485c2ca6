// SPDX-License-Identifier: Apache-2.0

#include "ldeq/solver.hpp"

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <ostream>

#include "ldeq/errors.hpp"

namespace ldeq {

void SolverConfig::validate() const {
    if (!(tol > 0.0)) throw ConfigError("solver: tol must be > 0");
    if (max_iter < 1) throw ConfigError("solver: max_iter must be >= 1");
    if (anderson_m < 1) throw ConfigError("solver: anderson memory must be >= 1");
    if (anderson_lambda < 0.0) throw ConfigError("solver: anderson lambda must be >= 0");
    if (!(anderson_beta > 0.0 && anderson_beta <= 1.0)) throw ConfigError("solver: damping must lie in (0,1]");
}

namespace {

constexpr double kDenFloor = 1e-12;

struct Residuals {
    double rel_mean = 0.0;
    double rel_max = 0.0;
    double abs_mean = 0.0;
};

template <class Real>
Residuals batch_residuals(const StateT<Real>& fz, const StateT<Real>& z) {
    if (!fz.same_shape(z)) throw StructuralError("residual: state shapes differ");
    const auto num = state_norm_per_sample(state_sub(fz, z));
    const auto den = state_norm_per_sample(fz);
    Residuals r;
    for (std::size_t s = 0; s < num.size(); ++s) {
        const double rel = num[s] / std::max(den[s], kDenFloor);
        r.rel_mean += rel;
        r.abs_mean += num[s];
        r.rel_max = std::max(r.rel_max, rel);
    }
    r.rel_mean /= static_cast<double>(num.size());
    r.abs_mean /= static_cast<double>(num.size());
    return r;
}

template <class Real>
void record(SolverReportT<Real>& rep, const Residuals& r, ResidualMetric metric) {
    rep.rel_trace.push_back(r.rel_mean);
    rep.rel_max_trace.push_back(r.rel_max);
    rep.abs_trace.push_back(r.abs_mean);
    rep.residual_trace.push_back(metric == ResidualMetric::Relative ? r.rel_mean : r.abs_mean);
}

class Stopwatch {
public:
    Stopwatch() : t0_(std::chrono::steady_clock::now()) {}
    double ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0_).count();
    }

private:
    std::chrono::steady_clock::time_point t0_;
};

}  // namespace

template <class Real>
double relative_residual(const StateT<Real>& fz, const StateT<Real>& z) {
    return batch_residuals(fz, z).rel_mean;
}

template <class Real>
double absolute_residual(const StateT<Real>& fz, const StateT<Real>& z) {
    return batch_residuals(fz, z).abs_mean;
}

template <class Real>
SolverReportT<Real> banach_solve(const StateMap<Real>& f, StateT<Real> z0, const SolverConfig& cfg) {
    cfg.validate();
    Stopwatch sw;
    SolverReportT<Real> rep;
    StateT<Real> z = std::move(z0);
    for (int t = 0; t < cfg.max_iter; ++t) {
        StateT<Real> fz = f(z);
        ++rep.nfes;
        if (!all_finite(fz)) throw DivergenceError("banach solve produced non-finite values", t);
        const Residuals r = batch_residuals(fz, z);
        record(rep, r, cfg.metric);
        z = std::move(fz);
        if (rep.residual_trace.back() <= cfg.tol) {
            rep.converged = true;
            break;
        }
    }
    rep.z_star = std::move(z);
    rep.elapsed_ms = sw.ms();
    return rep;
}

template <class Real>
SolverReportT<Real> anderson_solve(const StateMap<Real>& f, StateT<Real> z0, const SolverConfig& cfg) {
    cfg.validate();
    Stopwatch sw;
    SolverReportT<Real> rep;
    StateT<Real> z = std::move(z0);

    std::deque<StateT<Real>> hist_z;
    std::deque<StateT<Real>> hist_g;  // g = f(z) - z, aligned with hist_z

    for (int t = 0; t < cfg.max_iter; ++t) {
        StateT<Real> fz = f(z);
        ++rep.nfes;
        if (!all_finite(fz)) throw DivergenceError("anderson solve produced non-finite values", t);
        const Residuals r = batch_residuals(fz, z);
        record(rep, r, cfg.metric);
        if (rep.residual_trace.back() <= cfg.tol) {
            rep.converged = true;
            rep.z_star = std::move(fz);
            rep.elapsed_ms = sw.ms();
            return rep;
        }

        StateT<Real> g = state_sub(fz, z);
        hist_z.push_back(z);
        hist_g.push_back(std::move(g));
        while (static_cast<int>(hist_z.size()) > cfg.anderson_m) {
            hist_z.pop_front();
            hist_g.pop_front();
        }

        const int k = static_cast<int>(hist_z.size());
        if (k == 1) {
            z = std::move(fz);  // plain Banach step
            continue;
        }

        // The mixing coefficients minimize ||sum_a alpha_a g_a||^2 + ridge,
        // subject to sum alpha = 1. Solved in the unconstrained difference
        // parameterization, which degenerates gracefully when the residual
        // window loses rank: gamma_j are the coefficients on the columns
        // dG_j = g_{j+1} - g_j.
        const int cols = k - 1;
        const auto& g_new = hist_g.back();
        Eigen::MatrixXd H(cols, cols);
        Eigen::VectorXd rhs(cols);
        auto dg = [&](int j, int which) -> const StateT<Real>& {
            return which == 0 ? hist_g[static_cast<std::size_t>(j)] : hist_g[static_cast<std::size_t>(j + 1)];
        };
        // Gram of difference columns assembled from pairwise inner products.
        std::vector<std::vector<double>> gg(static_cast<std::size_t>(k), std::vector<double>(static_cast<std::size_t>(k)));
        for (int a = 0; a < k; ++a)
            for (int b = a; b < k; ++b) {
                const double v = state_dot(hist_g[static_cast<std::size_t>(a)], hist_g[static_cast<std::size_t>(b)]);
                gg[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = v;
                gg[static_cast<std::size_t>(b)][static_cast<std::size_t>(a)] = v;
            }
        auto ip = [&](int a, int b) { return gg[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)]; };
        for (int a = 0; a < cols; ++a) {
            for (int b = a; b < cols; ++b) {
                const double v = ip(a + 1, b + 1) - ip(a + 1, b) - ip(a, b + 1) + ip(a, b);
                H(a, b) = v;
                H(b, a) = v;
            }
            rhs(a) = ip(a + 1, k - 1) - ip(a, k - 1);
        }
        const double scale = std::max(H.trace() / cols, kDenFloor * kDenFloor);
        H.diagonal().array() += std::max(cfg.anderson_lambda, 1e-14) * scale;
        Eigen::VectorXd gamma = H.ldlt().solve(rhs);
        if (!gamma.allFinite()) {
            z = std::move(fz);
            continue;
        }

        // z_next = z_t + beta g_t - sum_j gamma_j (dZ_j + beta dG_j)
        StateT<Real> next = hist_z.back();
        state_axpby_inplace(static_cast<Real>(cfg.anderson_beta), g_new, Real(1), next);
        for (int j = 0; j < cols; ++j) {
            const Real gj = static_cast<Real>(gamma(j));
            if (gj == Real(0)) continue;
            state_axpby_inplace(-gj, hist_z[static_cast<std::size_t>(j + 1)], Real(1), next);
            state_axpby_inplace(gj, hist_z[static_cast<std::size_t>(j)], Real(1), next);
            const Real gb = static_cast<Real>(gamma(j) * cfg.anderson_beta);
            state_axpby_inplace(-gb, dg(j, 1), Real(1), next);
            state_axpby_inplace(gb, dg(j, 0), Real(1), next);
        }
        z = std::move(next);
    }
    rep.z_star = std::move(z);
    rep.elapsed_ms = sw.ms();
    return rep;
}

template <class Real>
SolverReportT<Real> fixed_point_solve(const StateMap<Real>& f, StateT<Real> z0, const SolverConfig& cfg) {
    return cfg.kind == SolverKind::Banach ? banach_solve(f, std::move(z0), cfg)
                                          : anderson_solve(f, std::move(z0), cfg);
}

template <class Real>
void write_trace_csv(std::ostream& os, const std::string& solve_id, const SolverReportT<Real>& rep,
                     bool header) {
    if (header) os << "solve_id,iter,metric,value\n";
    char buf[64];
    auto emit = [&](const char* metric, const std::vector<double>& trace) {
        for (std::size_t i = 0; i < trace.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.6g", trace[i]);
            os << solve_id << "," << i << "," << metric << "," << buf << "\n";
        }
    };
    emit("relative", rep.rel_trace);
    emit("absolute", rep.abs_trace);
    emit("relative_max", rep.rel_max_trace);
}

#define LDEQ_INSTANTIATE_SOLVER(Real)                                                                       \
    template double relative_residual<Real>(const StateT<Real>&, const StateT<Real>&);                      \
    template double absolute_residual<Real>(const StateT<Real>&, const StateT<Real>&);                      \
    template SolverReportT<Real> banach_solve<Real>(const StateMap<Real>&, StateT<Real>, const SolverConfig&); \
    template SolverReportT<Real> anderson_solve<Real>(const StateMap<Real>&, StateT<Real>,                  \
                                                      const SolverConfig&);                                 \
    template SolverReportT<Real> fixed_point_solve<Real>(const StateMap<Real>&, StateT<Real>,               \
                                                         const SolverConfig&);                              \
    template void write_trace_csv<Real>(std::ostream&, const std::string&, const SolverReportT<Real>&, bool);

LDEQ_INSTANTIATE_SOLVER(float)
LDEQ_INSTANTIATE_SOLVER(double)

}  // namespace ldeq
