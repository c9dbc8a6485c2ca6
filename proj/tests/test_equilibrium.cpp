// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "ldeq/budget.hpp"
#include "ldeq/equilibrium.hpp"
#include "ldeq/train.hpp"
#include "oracle_helpers.hpp"

using namespace ldeq;
using oracle::random_tensor;

namespace {

// Tiny contractive config: closed-form L comes out around 0.12, so forward
// and backward solves reach 1e-12 quickly in 64-bit.
ModelConfig tiny_cfg(uint64_t seed = 7) {
    ModelConfig cfg;
    cfg.branches = 2;
    cfg.channels = {2, 4};
    cfg.in_channels = 1;
    cfg.height = 8;
    cfg.width = 8;
    cfg.classes = 3;
    cfg.seed = seed;
    cfg.lip.branches = 2;
    cfg.lip.alpha1 = 0.5;
    cfg.lip.alpha2 = 0.3;
    cfg.lip.conv_norm = 1.5;
    cfg.lip.gamma_bar = 1.0;
    cfg.lip.srelu_slope = 0.25;
    cfg.lip.drop_rate = 0.3;
    return cfg;
}

SolverConfig tight_solver(SolverKind kind = SolverKind::Banach, double tol = 1e-12, int max_iter = 200) {
    SolverConfig cfg;
    cfg.kind = kind;
    cfg.tol = tol;
    cfg.metric = ResidualMetric::Absolute;
    cfg.max_iter = max_iter;
    return cfg;
}

StateT<double> vec_state(const Eigen::VectorXd& v) {
    StateT<double> s;
    TensorT<double> t({1, static_cast<int>(v.size()), 1, 1});
    for (Eigen::Index i = 0; i < v.size(); ++i) t.data[static_cast<std::size_t>(i)] = v(i);
    s.branches.push_back(std::move(t));
    return s;
}

Eigen::VectorXd to_vec(const StateT<double>& s) {
    const auto& d = s.branches.front().data;
    Eigen::VectorXd v(static_cast<Eigen::Index>(d.size()));
    for (std::size_t i = 0; i < d.size(); ++i) v(static_cast<Eigen::Index>(i)) = d[i];
    return v;
}

StateT<double> random_model_state(const ModelConfig& cfg, Rng& rng, double scale = 1.0) {
    StateT<double> z = zero_state<double>(cfg, 1);
    for (auto& b : z.branches)
        for (auto& v : b.data) v = rng.normal() * scale;
    return z;
}

}  // namespace

TEST_CASE("scalar toy: fixed point and implicit gradient in closed form") {
    // f(z; x) = theta z + x with theta = 0.5: z* = 2x, A = 1/(1-theta) = 2,
    // dl/dtheta = A z* = 4x for l = z*.
    const double theta = 0.5;
    for (double x : {0.3, -1.2, 2.0}) {
        StateMap<double> f = [theta, x](const StateT<double>& z) {
            StateT<double> out = z;
            out.branches[0].data[0] = theta * z.branches[0].data[0] + x;
            return out;
        };
        auto rep = fixed_point_solve<double>(f, vec_state(Eigen::VectorXd::Zero(1)), tight_solver());
        REQUIRE(rep.converged);
        const double zstar = rep.z_star.branches[0].data[0];
        CHECK(zstar == doctest::Approx(2.0 * x).epsilon(1e-10));

        StateMap<double> vjp = [theta](const StateT<double>& v) {
            StateT<double> out = v;
            out.branches[0].data[0] *= theta;
            return out;
        };
        StateT<double> cot = vec_state(Eigen::VectorXd::Ones(1));
        auto [a, arep] = solve_cotangent<double>(vjp, cot, tight_solver());
        CHECK(a.branches[0].data[0] == doctest::Approx(2.0).epsilon(1e-10));
        // trailing factor df/dtheta = z*
        CHECK(a.branches[0].data[0] * zstar == doctest::Approx(4.0 * x).epsilon(1e-9));
        // the JFB shortcut replaces A by the loss cotangent
        CHECK(1.0 * zstar == doctest::Approx(2.0 * x).epsilon(1e-10));
    }
}

TEST_CASE("forward solve on a constant-in-z model finishes in two evaluations") {
    auto m = build_model<double>(tiny_cfg(3));
    for (auto& [name, t] : param_registry(m, false))
        if (name.find("conv") != std::string::npos || name.find("inject") != std::string::npos) t->fill(0.0);
    // beta already zero; with zero kernels f is constant in z
    Rng rng(1);
    TensorT<double> x = random_tensor(rng, {1, 1, 8, 8});
    auto res = solve_forward<double>(m, x, tight_solver(SolverKind::Banach, 1e-9, 18), Mode::Eval);
    CHECK(res.forward.converged);
    CHECK(res.forward.nfes <= 2);
}

TEST_CASE("converged result satisfies the residual contract") {
    auto m = build_model<double>(tiny_cfg(5));
    Rng rng(2);
    TensorT<double> x = random_tensor(rng, {2, 1, 8, 8});
    SolverConfig cfg;
    cfg.kind = SolverKind::Anderson;
    cfg.tol = 1e-3;
    cfg.metric = ResidualMetric::Relative;
    cfg.max_iter = 18;
    auto res = solve_forward<double>(m, x, cfg, Mode::Eval);
    REQUIRE(res.forward.converged);
    TensorT<double> inj = injection(m, x);
    StateT<double> fz = apply_f_theta<double>(m, res.z_star, &inj, Mode::Eval);
    CHECK(relative_residual(fz, res.z_star) <= cfg.tol);
}

TEST_CASE("zero loss cotangent yields zero gradients and immediate backward convergence") {
    auto m = build_model<double>(tiny_cfg(7));
    Rng rng(3);
    TensorT<double> x = random_tensor(rng, {1, 1, 8, 8});
    auto res = solve_forward<double>(m, x, tight_solver(), Mode::Eval);
    REQUIRE(res.forward.converged);
    StateT<double> cot = zero_state<double>(m.cfg, 1);
    auto g = implicit_backward<double>(m, x, res, cot, tight_solver());
    REQUIRE(g.backward.has_value());
    CHECK(g.backward->nfes == 1);
    CHECK(g.backward->converged);
    for (auto& [name, t] : param_registry(g.param_grads, false))
        for (double v : t->data) CHECK(v == 0.0);
}

TEST_CASE("implicit gradient of a linear functional matches full-pipeline finite differences") {
    auto m = build_model<double>(tiny_cfg(11));
    Rng rng(4);
    Rng mask_rng(5);
    TensorT<double> x = random_tensor(rng, {1, 1, 8, 8});
    DropoutMasksT<double> masks = make_dropout_masks(m, 1, mask_rng);
    StateT<double> w = random_model_state(m.cfg, rng);

    auto solve_loss = [&](ModelT<double>& model) {
        auto r = solve_forward<double>(model, x, tight_solver(), Mode::Train, nullptr, &masks);
        REQUIRE(r.forward.converged);
        return state_dot(w, r.z_star);
    };

    auto res = solve_forward<double>(m, x, tight_solver(), Mode::Train, nullptr, &masks);
    REQUIRE(res.forward.converged);
    auto g = implicit_backward<double>(m, x, res, w, tight_solver());
    REQUIRE(g.backward.has_value());
    CHECK(g.backward->converged);

    auto params = param_registry(m, false);
    auto gparams = param_registry(g.param_grads, false);
    const double h = 1e-5;
    Rng pick(6);
    for (int checked = 0; checked < 10; ++checked) {
        const std::size_t pi = static_cast<std::size_t>(pick.below(params.size()));
        TensorT<double>* t = params[pi].second;
        TensorT<double> dir = random_tensor(pick, t->shape);
        const double analytic = dot(*gparams[pi].second, dir);
        TensorT<double> saved = *t;
        axpby_inplace(h, dir, 1.0, *t);
        const double up = solve_loss(m);
        *t = saved;
        axpby_inplace(-h, dir, 1.0, *t);
        const double dn = solve_loss(m);
        *t = saved;
        const double fd = (up - dn) / (2.0 * h);
        const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-6});
        INFO("param ", params[pi].first);
        CHECK(std::abs(analytic - fd) / denom <= 1e-4);
    }
}

TEST_CASE("implicit gradients are faithful for every parameter family") {
    auto m = build_model<double>(tiny_cfg(12));
    Rng rng(16);
    Rng mask_rng(17);
    // the all-zero bias/beta init parks the equilibrium's pre-activations in a
    // thin band around the activation kinks; generic shift parameters give the
    // fixed point a healthy scale so finite differences stay on linear pieces
    for (auto& [name, t] : param_registry(m, false))
        if (name.ends_with(".bias") || name.ends_with(".beta"))
            for (auto& v : t->data) v = rng.normal() * 0.3;
    const std::vector<int> labels{0, 2};
    DropoutMasksT<double> masks = make_dropout_masks(m, 2, mask_rng);
    SolverConfig tight = tight_solver(SolverKind::Banach, 1e-12, 300);

    // Pick an input whose equilibrium keeps every activation away from its
    // kink; finite differences are only meaningful on one linear piece.
    auto kink_margin = [&](const TensorT<double>& x) {
        auto res = solve_forward<double>(m, x, tight, Mode::Train, nullptr, &masks);
        ForwardCacheT<double> cache;
        (void)apply_f_theta_x<double>(m, res.z_star, x, Mode::Train, &masks, &cache);
        double margin = 1e300;
        auto scan = [&](const TensorT<double>& t) {
            for (double v : t.data) margin = std::min(margin, std::abs(v));
        };
        for (const auto& bc : cache.res) {
            scan(bc.n1);
            scan(bc.n3);
        }
        for (const auto& rowp : cache.path)
            for (const auto& pc : rowp)
                for (const auto& t : pc.act_in) scan(t);
        for (const auto& pc : cache.post) scan(pc.norm_out);
        return margin;
    };
    TensorT<double> x({2, 1, 8, 8});
    double margin = 0.0;
    for (int attempt = 0; attempt < 30 && margin < 1e-4; ++attempt) {
        x = random_tensor(rng, {2, 1, 8, 8});
        for (auto& v : x.data) v = std::abs(v) * 0.3;
        margin = kink_margin(x);
    }
    REQUIRE(margin >= 1e-4);

    StepGradsT<double> sg = loss_and_grads<double>(m, x, labels, tight, tight, BackwardKind::Implicit,
                                                   Mode::Train, nullptr, &masks);
    auto pipeline_loss = [&]() {
        auto res = solve_forward<double>(m, x, tight, Mode::Train, nullptr, &masks);
        return cross_entropy(classify(m, res.z_star), labels).first;
    };

    // one representative tensor per learnable family
    const char* families[] = {"res0.conv1.weight", "res1.conv2.bias", "res0.norm2.gamma",
                              "res1.norm3.beta",   "down1.0.hop0.conv.weight", "up0.1.conv.weight",
                              "post1.norm.gamma",  "inject.weight",  "head.weight", "head.bias"};
    auto params = param_registry(m, false);
    auto grads = param_registry(sg.grads, false);
    // large enough to beat the cancellation noise of the re-solved loss,
    // small enough that perturbations stay inside the kink margin
    const double h = 1e-5;
    for (const char* name : families) {
        std::size_t pi = params.size();
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].first == name) pi = i;
        REQUIRE(pi < params.size());
        TensorT<double>* t = params[pi].second;
        TensorT<double> dir = random_tensor(rng, t->shape);
        scale_inplace(dir, 1.0 / norm2(dir));
        const double analytic = dot(*grads[pi].second, dir);
        TensorT<double> saved = *t;
        axpby_inplace(h, dir, 1.0, *t);
        const double up = pipeline_loss();
        *t = saved;
        axpby_inplace(-h, dir, 1.0, *t);
        const double dn = pipeline_loss();
        *t = saved;
        const double fd = (up - dn) / (2.0 * h);
        const double denom = std::max({std::abs(analytic), std::abs(fd), 1e-6});
        INFO("family ", std::string(name));
        CHECK(std::abs(analytic - fd) / denom <= 1e-4);
    }
}

TEST_CASE("shift parameters ahead of single-channel-group MGN are exactly dead") {
    // norm2's per-channel beta adds a constant per channel; norm3 subtracts
    // each channel's own mean when gcd(C, 8) = C, so the shift never reaches
    // the output and its gradient vanishes identically.
    auto m = build_model<double>(tiny_cfg(12));
    Rng rng(18);
    Rng mask_rng(19);
    TensorT<double> x = random_tensor(rng, {1, 1, 8, 8});
    DropoutMasksT<double> masks = make_dropout_masks(m, 1, mask_rng);
    SolverConfig tight = tight_solver(SolverKind::Banach, 1e-12, 300);
    StepGradsT<double> sg = loss_and_grads<double>(m, x, std::vector<int>{1}, tight, tight,
                                                   BackwardKind::Implicit, Mode::Train, nullptr, &masks);
    for (const auto& [name, t] : param_registry(sg.grads, false))
        if (name.ends_with("norm2.beta"))
            // exact cancellation up to the rounding residue of the mean sums
            for (double v : t->data) CHECK(std::abs(v) <= 1e-15);
}

TEST_CASE("jfb uses the loss cotangent directly and skips the backward solve") {
    auto m = build_model<double>(tiny_cfg(13));
    Rng rng(7);
    TensorT<double> x = random_tensor(rng, {1, 1, 8, 8});
    auto res = solve_forward<double>(m, x, tight_solver(), Mode::Eval);
    REQUIRE(res.forward.converged);
    StateT<double> w = random_model_state(m.cfg, rng);
    auto gj = jfb_backward<double>(m, x, res, w);
    CHECK(!gj.backward.has_value());
    CHECK(state_norm(state_sub(gj.a_vector, w)) == 0.0);
    // zero cotangent edge
    auto gz = jfb_backward<double>(m, x, res, zero_state<double>(m.cfg, 1));
    for (auto& [name, t] : param_registry(gz.param_grads, false))
        for (double v : t->data) CHECK(v == 0.0);
    // gradients differ from the implicit ones on a curved model
    auto gi = implicit_backward<double>(m, x, res, w, tight_solver());
    double diff = 0.0;
    auto pj = param_registry(gj.param_grads, false);
    auto pi_ = param_registry(gi.param_grads, false);
    for (std::size_t k = 0; k < pj.size(); ++k)
        for (std::size_t c = 0; c < pj[k].second->size(); ++c)
            diff = std::max(diff, std::abs(pj[k].second->data[c] - pi_[k].second->data[c]));
    CHECK(diff > 0.0);
}

TEST_CASE("jfb deviation obeys the Neumann remainder bound on a linear model") {
    // f(z) = Az + b, parameter grads through P: implicit uses v (I - A)^-T,
    // jfb uses v; the gap is bounded by ||A|| / (1 - ||A||) ||v|| ||P||.
    Rng rng(606);
    const int d = 5, np = 3;
    Eigen::MatrixXd raw(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) raw(i, j) = rng.normal();
    Eigen::MatrixXd A = 0.7 * raw / raw.operatorNorm();
    const double L = A.operatorNorm();
    Eigen::MatrixXd P(d, np);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < np; ++j) P(i, j) = rng.normal();
    Eigen::VectorXd v(d);
    for (int i = 0; i < d; ++i) v(i) = rng.normal();

    StateMap<double> vjp = [&A](const StateT<double>& s) { return vec_state(A.transpose() * to_vec(s)); };
    auto [a_state, rep] = solve_cotangent<double>(vjp, vec_state(v), tight_solver(SolverKind::Anderson, 1e-12, 300));
    REQUIRE(rep.converged);
    const Eigen::VectorXd a = to_vec(a_state);
    const Eigen::VectorXd exact = (Eigen::MatrixXd::Identity(d, d) - A.transpose()).lu().solve(v);
    CHECK((a - exact).norm() <= 1e-9);

    const Eigen::VectorXd g_impl = P.transpose() * a;
    const Eigen::VectorXd g_jfb = P.transpose() * v;
    const double bound = L / (1.0 - L) * v.norm() * P.operatorNorm();
    CHECK((g_impl - g_jfb).norm() <= bound * (1.0 + 1e-9));
}

TEST_CASE("jacobian norm estimate matches the SVD on a linear map") {
    Rng rng(707);
    const int d = 8;
    Eigen::MatrixXd A(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) A(i, j) = rng.normal();
    StateMap<double> f = [&A](const StateT<double>& s) { return vec_state(A * to_vec(s)); };
    StateMap<double> vjp = [&A](const StateT<double>& s) { return vec_state(A.transpose() * to_vec(s)); };
    StateT<double> z = vec_state(Eigen::VectorXd::Zero(d));
    Rng prng(1);
    const double est = jacobian_norm_power_iter<double>(f, vjp, z, 200, prng);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(A);
    CHECK(est == doctest::Approx(svd.singularValues()(0)).epsilon(1e-3));

    StateMap<double> zero = [](const StateT<double>& s) { return zeros_like(s); };
    Rng prng2(2);
    CHECK(jacobian_norm_power_iter<double>(zero, zero, z, 10, prng2) == 0.0);

    StateMap<double> ident = [](const StateT<double>& s) { return s; };
    Rng prng3(3);
    CHECK(jacobian_norm_power_iter<double>(ident, ident, z, 10, prng3) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("jacobian norm at the equilibrium stays under the certificate") {
    auto m = build_model<double>(tiny_cfg(17));
    const double L = overall_bound(m.cfg.lip).total;
    Rng rng(8);
    TensorT<double> x = random_tensor(rng, {1, 1, 8, 8});
    auto res = solve_forward<double>(m, x, tight_solver(SolverKind::Banach, 1e-10, 100), Mode::Eval);
    REQUIRE(res.forward.converged);
    Rng prng(9);
    const double sigma = estimate_jacobian_norm<double>(m, res.z_star, x, 40, prng);
    CHECK(sigma <= L * 1.001);
}

TEST_CASE("backward residual trace contracts at the certified rate") {
    auto m = build_model<double>(tiny_cfg(19));
    const double L = overall_bound(m.cfg.lip).total;
    REQUIRE(L < 1.0);
    Rng rng(10);
    TensorT<double> x = random_tensor(rng, {1, 1, 8, 8});
    auto res = solve_forward<double>(m, x, tight_solver(SolverKind::Banach, 1e-10, 100), Mode::Eval);
    REQUIRE(res.forward.converged);
    StateT<double> w = random_model_state(m.cfg, rng);
    auto g = implicit_backward<double>(m, x, res, w, tight_solver(SolverKind::Banach, 1e-10, 100));
    REQUIRE(g.backward.has_value());
    const auto& trace = g.backward->abs_trace;
    for (std::size_t k = 1; k < trace.size(); ++k)
        CHECK(trace[k] <= (L + 0.05) * trace[k - 1] + 1e-14);
}

TEST_CASE("single-precision solves mirror double precision") {
    ModelConfig cfg = tiny_cfg(29);
    auto m32 = build_model<float>(cfg);
    auto m64 = build_model<double>(cfg);
    TensorT<float> x32({1, 1, 8, 8});
    TensorT<double> x64({1, 1, 8, 8});
    Rng rng(12);
    for (std::size_t i = 0; i < x32.size(); ++i) {
        const float v = static_cast<float>(rng.uniform(0.0, 1.0));
        x32.data[i] = v;
        x64.data[i] = v;
    }
    SolverConfig sc;
    sc.kind = SolverKind::Anderson;
    sc.tol = 1e-4;
    sc.metric = ResidualMetric::Relative;
    sc.max_iter = 50;
    auto r32 = solve_forward<float>(m32, x32, sc, Mode::Eval);
    auto r64 = solve_forward<double>(m64, x64, sc, Mode::Eval);
    REQUIRE(r32.forward.converged);
    REQUIRE(r64.forward.converged);
    // same parameters up to f32 rounding, so the equilibria agree to f32 scale
    double diff = 0.0, ref = 0.0;
    for (std::size_t b = 0; b < r32.z_star.branches.size(); ++b)
        for (std::size_t i = 0; i < r32.z_star.branches[b].size(); ++i) {
            diff = std::max(diff, std::abs(static_cast<double>(r32.z_star.branches[b].data[i]) -
                                           r64.z_star.branches[b].data[i]));
            ref = std::max(ref, std::abs(r64.z_star.branches[b].data[i]));
        }
    CHECK(diff <= std::max(1e-3 * ref, 1e-3));
    CHECK(certified_bound(m32) == doctest::Approx(certified_bound(m64)).epsilon(1e-5));
}

TEST_CASE("forward solves are deterministic") {
    auto m = build_model<double>(tiny_cfg(23));
    Rng rng(11);
    TensorT<double> x = random_tensor(rng, {1, 1, 8, 8});
    Rng mrng1(42), mrng2(42);
    auto r1 = solve_forward<double>(m, x, tight_solver(SolverKind::Anderson, 1e-8, 50), Mode::Train, &mrng1);
    auto r2 = solve_forward<double>(m, x, tight_solver(SolverKind::Anderson, 1e-8, 50), Mode::Train, &mrng2);
    CHECK(r1.forward.nfes == r2.forward.nfes);
    for (std::size_t b = 0; b < r1.z_star.branches.size(); ++b)
        CHECK(r1.z_star.branches[b].data == r2.z_star.branches[b].data);
}
