// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <utility>

#include "ldeq/model.hpp"
#include "ldeq/rng.hpp"
#include "ldeq/solver.hpp"

namespace ldeq {

enum class BackwardKind { Implicit, Jfb };

template <class Real>
struct EquilibriumResultT {
    StateT<Real> z_star;
    SolverReportT<Real> forward;
    DropoutMasksT<Real> masks;  // frozen for this solve; reused by the backward pass
    Mode mode = Mode::Eval;
};

template <class Real>
struct GradientResultT {
    ModelT<Real> param_grads;                     // cotangents for every learnable tensor
    std::optional<SolverReportT<Real>> backward;  // absent for JFB
    StateT<Real> a_vector;                        // the solved backward cotangent
};

/// Equilibrium of z -> f_theta(z; x) from the all-zero state. In train mode
/// with active dropout, masks come from `fixed_masks` or are drawn once from
/// `mask_rng` and frozen for the whole solve.
template <class Real>
EquilibriumResultT<Real> solve_forward(const ModelT<Real>& m, const TensorT<Real>& x,
                                       const SolverConfig& solver, Mode mode, Rng* mask_rng = nullptr,
                                       const DropoutMasksT<Real>* fixed_masks = nullptr);

/// Solves the backward fixed point v = J^T v + loss_cot with the same solver
/// machinery, then forms parameter cotangents with the solved vector.
template <class Real>
GradientResultT<Real> implicit_backward(const ModelT<Real>& m, const TensorT<Real>& x,
                                        const EquilibriumResultT<Real>& result,
                                        const StateT<Real>& loss_cotangent, const SolverConfig& solver);

/// Jacobian-free shortcut: the backward cotangent is the loss cotangent itself.
template <class Real>
GradientResultT<Real> jfb_backward(const ModelT<Real>& m, const TensorT<Real>& x,
                                   const EquilibriumResultT<Real>& result,
                                   const StateT<Real>& loss_cotangent);

/// sigma_max(J_f(z)) by power iteration on J^T J; the JVP side uses central
/// finite differences of f (eval mode), the VJP side is exact.
template <class Real>
double estimate_jacobian_norm(const ModelT<Real>& m, const StateT<Real>& z, const TensorT<Real>& x,
                              int iters, Rng& rng, double fd_eps = 1e-6);

// ---- solver-level cores (model-independent) -----------------------------------

/// Fixed point of v -> vjp(v) + loss_cot from the zero state.
template <class Real>
std::pair<StateT<Real>, SolverReportT<Real>> solve_cotangent(const StateMap<Real>& vjp,
                                                             const StateT<Real>& loss_cotangent,
                                                             const SolverConfig& cfg);

/// Power iteration on J^T J for an arbitrary map given its exact VJP at z.
template <class Real>
double jacobian_norm_power_iter(const StateMap<Real>& f, const StateMap<Real>& vjp_at_z,
                                const StateT<Real>& z, int iters, Rng& rng, double fd_eps = 1e-6);

}  // namespace ldeq
