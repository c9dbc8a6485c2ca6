// SPDX-License-Identifier: Apache-2.0

#include "ldeq/equilibrium.hpp"

#include <cmath>
#include <sstream>

#include "ldeq/errors.hpp"

namespace ldeq {

template <class Real>
EquilibriumResultT<Real> solve_forward(const ModelT<Real>& m, const TensorT<Real>& x,
                                       const SolverConfig& solver, Mode mode, Rng* mask_rng,
                                       const DropoutMasksT<Real>* fixed_masks) {
    EquilibriumResultT<Real> out;
    out.mode = mode;
    const int batch = x.dim(0);
    if (mode == Mode::Train && m.cfg.lip.drop_rate > 0.0) {
        if (fixed_masks)
            out.masks = *fixed_masks;
        else if (mask_rng)
            out.masks = make_dropout_masks(m, batch, *mask_rng);
        else
            throw ConfigError("solve_forward: train mode with dropout needs a mask source");
    }
    TensorT<Real> inj = injection(m, x);
    const DropoutMasksT<Real>* masks = out.masks.empty() ? nullptr : &out.masks;
    StateMap<Real> f = [&m, &inj, mode, masks](const StateT<Real>& z) {
        return apply_f_theta<Real>(m, z, &inj, mode, masks, nullptr);
    };
    out.forward = fixed_point_solve<Real>(f, zero_state<Real>(m.cfg, batch), solver);
    out.z_star = out.forward.z_star;
    return out;
}

template <class Real>
std::pair<StateT<Real>, SolverReportT<Real>> solve_cotangent(const StateMap<Real>& vjp,
                                                             const StateT<Real>& loss_cotangent,
                                                             const SolverConfig& cfg) {
    StateMap<Real> T = [&vjp, &loss_cotangent](const StateT<Real>& v) {
        return axpy_state(Real(1), loss_cotangent, Real(1), vjp(v));
    };
    SolverReportT<Real> rep = fixed_point_solve<Real>(T, zeros_like(loss_cotangent), cfg);
    return {rep.z_star, std::move(rep)};
}

template <class Real>
GradientResultT<Real> implicit_backward(const ModelT<Real>& m, const TensorT<Real>& x,
                                        const EquilibriumResultT<Real>& result,
                                        const StateT<Real>& loss_cotangent, const SolverConfig& solver) {
    const DropoutMasksT<Real>* masks = result.masks.empty() ? nullptr : &result.masks;
    ForwardCacheT<Real> cache;
    (void)apply_f_theta_x(m, result.z_star, x, result.mode, masks, &cache);

    StateMap<Real> vjp = [&m, &cache, &result, masks](const StateT<Real>& v) {
        return vjp_f_theta<Real>(m, cache, v, result.mode, masks, nullptr);
    };
    GradientResultT<Real> out{make_zero_grads(m), std::nullopt, {}};
    try {
        auto [a, rep] = solve_cotangent<Real>(vjp, loss_cotangent, solver);
        out.a_vector = std::move(a);
        out.backward = std::move(rep);
    } catch (const DivergenceError& e) {
        std::ostringstream os;
        os << e.what() << "; forward certificate L = " << certified_bound(m);
        throw DivergenceError(os.str(), e.iteration);
    }
    (void)vjp_f_theta(m, cache, out.a_vector, result.mode, masks, &out.param_grads);
    return out;
}

template <class Real>
GradientResultT<Real> jfb_backward(const ModelT<Real>& m, const TensorT<Real>& x,
                                   const EquilibriumResultT<Real>& result,
                                   const StateT<Real>& loss_cotangent) {
    const DropoutMasksT<Real>* masks = result.masks.empty() ? nullptr : &result.masks;
    ForwardCacheT<Real> cache;
    (void)apply_f_theta_x(m, result.z_star, x, result.mode, masks, &cache);
    GradientResultT<Real> out{make_zero_grads(m), std::nullopt, loss_cotangent};
    (void)vjp_f_theta(m, cache, out.a_vector, result.mode, masks, &out.param_grads);
    return out;
}

template <class Real>
double jacobian_norm_power_iter(const StateMap<Real>& f, const StateMap<Real>& vjp_at_z,
                                const StateT<Real>& z, int iters, Rng& rng, double fd_eps) {
    if (iters < 1) throw ConfigError("jacobian norm: iters must be >= 1");
    StateT<Real> u = zeros_like(z);
    for (auto& b : u.branches)
        for (auto& v : b.data) v = static_cast<Real>(rng.normal());
    double un = state_norm(u);
    if (un == 0.0) return 0.0;
    state_scale_inplace(u, static_cast<Real>(1.0 / un));

    const double eps = fd_eps * (1.0 + state_norm(z));
    auto jvp = [&](const StateT<Real>& dir) {
        StateT<Real> zp = axpy_state(static_cast<Real>(eps), dir, Real(1), z);
        StateT<Real> zm = axpy_state(static_cast<Real>(-eps), dir, Real(1), z);
        StateT<Real> w = state_sub(f(zp), f(zm));
        state_scale_inplace(w, static_cast<Real>(1.0 / (2.0 * eps)));
        if (!all_finite(w)) throw DivergenceError("jacobian norm probe produced non-finite values", 0);
        return w;
    };

    for (int it = 0; it < iters; ++it) {
        StateT<Real> w = jvp(u);
        if (state_norm(w) == 0.0) return 0.0;
        StateT<Real> u2 = vjp_at_z(w);
        const double n2 = state_norm(u2);
        if (n2 == 0.0) return 0.0;
        state_scale_inplace(u2, static_cast<Real>(1.0 / n2));
        u = std::move(u2);
    }
    return state_norm(jvp(u));  // ||J u|| with unit u
}

template <class Real>
double estimate_jacobian_norm(const ModelT<Real>& m, const StateT<Real>& z, const TensorT<Real>& x,
                              int iters, Rng& rng, double fd_eps) {
    TensorT<Real> inj = injection(m, x);
    ForwardCacheT<Real> cache;
    (void)apply_f_theta<Real>(m, z, &inj, Mode::Eval, nullptr, &cache);
    StateMap<Real> f = [&m, &inj](const StateT<Real>& s) {
        return apply_f_theta<Real>(m, s, &inj, Mode::Eval, nullptr, nullptr);
    };
    StateMap<Real> vjp = [&m, &cache](const StateT<Real>& v) {
        return vjp_f_theta<Real>(m, cache, v, Mode::Eval, nullptr, nullptr);
    };
    return jacobian_norm_power_iter<Real>(f, vjp, z, iters, rng, fd_eps);
}

#define LDEQ_INSTANTIATE_EQ(Real)                                                                            \
    template EquilibriumResultT<Real> solve_forward<Real>(const ModelT<Real>&, const TensorT<Real>&,         \
                                                          const SolverConfig&, Mode, Rng*,                   \
                                                          const DropoutMasksT<Real>*);                       \
    template std::pair<StateT<Real>, SolverReportT<Real>> solve_cotangent<Real>(                             \
        const StateMap<Real>&, const StateT<Real>&, const SolverConfig&);                                    \
    template GradientResultT<Real> implicit_backward<Real>(const ModelT<Real>&, const TensorT<Real>&,        \
                                                           const EquilibriumResultT<Real>&,                  \
                                                           const StateT<Real>&, const SolverConfig&);        \
    template GradientResultT<Real> jfb_backward<Real>(const ModelT<Real>&, const TensorT<Real>&,             \
                                                      const EquilibriumResultT<Real>&, const StateT<Real>&); \
    template double jacobian_norm_power_iter<Real>(const StateMap<Real>&, const StateMap<Real>&,             \
                                                   const StateT<Real>&, int, Rng&, double);                  \
    template double estimate_jacobian_norm<Real>(const ModelT<Real>&, const StateT<Real>&,                   \
                                                 const TensorT<Real>&, int, Rng&, double);

LDEQ_INSTANTIATE_EQ(float)
LDEQ_INSTANTIATE_EQ(double)

}  // namespace ldeq
