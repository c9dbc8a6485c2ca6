// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "ldeq/tensor.hpp"

namespace ldeq {

enum class SolverKind { Banach, Anderson };
enum class ResidualMetric { Relative, Absolute };

struct SolverConfig {
    SolverKind kind = SolverKind::Anderson;
    double tol = 1e-3;
    ResidualMetric metric = ResidualMetric::Relative;
    int max_iter = 18;
    int anderson_m = 5;          // history depth
    double anderson_lambda = 1e-4;  // ridge on the mixing least-squares
    double anderson_beta = 1.0;  // damping in (0,1]

    void validate() const;  // throws ConfigError
};

template <class Real>
struct SolverReportT {
    StateT<Real> z_star;
    int nfes = 0;
    bool converged = false;
    std::vector<double> residual_trace;   // stopping metric per iteration (batch mean)
    std::vector<double> abs_trace;        // batch-mean absolute residual
    std::vector<double> rel_trace;        // batch-mean relative residual
    std::vector<double> rel_max_trace;    // per-sample maximum relative residual
    double elapsed_ms = 0.0;
};

template <class Real>
using StateMap = std::function<StateT<Real>(const StateT<Real>&)>;

/// Batch-mean relative residual ||fz - z|| / max(||fz||, 1e-12).
template <class Real>
double relative_residual(const StateT<Real>& fz, const StateT<Real>& z);

/// Batch-mean absolute residual ||fz - z||.
template <class Real>
double absolute_residual(const StateT<Real>& fz, const StateT<Real>& z);

/// Iterates z <- f(z) until the metric reaches tol or max_iter evaluations.
/// Throws DivergenceError with the iteration index on non-finite iterates.
template <class Real>
SolverReportT<Real> banach_solve(const StateMap<Real>& f, StateT<Real> z0, const SolverConfig& cfg);

/// Type-II Anderson acceleration over the last m residuals; the first step is
/// a plain Banach step and the mixing coefficients solve a ridge-regularized
/// least-squares constrained to sum to 1.
template <class Real>
SolverReportT<Real> anderson_solve(const StateMap<Real>& f, StateT<Real> z0, const SolverConfig& cfg);

template <class Real>
SolverReportT<Real> fixed_point_solve(const StateMap<Real>& f, StateT<Real> z0, const SolverConfig& cfg);

/// Residual-trace CSV rows: solve_id,iter,metric,value.
template <class Real>
void write_trace_csv(std::ostream& os, const std::string& solve_id, const SolverReportT<Real>& report,
                     bool header = true);

}  // namespace ldeq
