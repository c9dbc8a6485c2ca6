// SPDX-License-Identifier: Apache-2.0

#include "ldeq/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "ldeq/budget.hpp"
#include "ldeq/checkpoint.hpp"
#include "ldeq/errors.hpp"

namespace ldeq {

template <class Real>
std::pair<double, TensorT<Real>> cross_entropy(const TensorT<Real>& logits, const std::vector<int>& labels) {
    const int n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int>(labels.size()) != n) throw StructuralError("cross_entropy: label count mismatch");
    TensorT<Real> dlogits(logits.shape);
    double loss = 0.0;
    for (int s = 0; s < n; ++s) {
        const Real* row = &logits.data[static_cast<std::size_t>(s) * k];
        Real* drow = &dlogits.data[static_cast<std::size_t>(s) * k];
        const int y = labels[static_cast<std::size_t>(s)];
        if (y < 0 || y >= k) throw StructuralError("cross_entropy: label out of range");
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        loss += std::log(denom) - (static_cast<double>(row[y]) - mx);
        for (int j = 0; j < k; ++j) {
            const double soft = std::exp(static_cast<double>(row[j]) - mx) / denom;
            drow[j] = static_cast<Real>((soft - (j == y ? 1.0 : 0.0)) / n);
        }
    }
    return {loss / n, std::move(dlogits)};
}

template <class Real>
int batch_correct(const TensorT<Real>& logits, const std::vector<int>& labels) {
    const int n = logits.dim(0), k = logits.dim(1);
    int hits = 0;
    for (int s = 0; s < n; ++s) {
        const Real* row = &logits.data[static_cast<std::size_t>(s) * k];
        int best = 0;
        for (int j = 1; j < k; ++j)
            if (row[j] > row[best]) best = j;
        if (best == labels[static_cast<std::size_t>(s)]) ++hits;
    }
    return hits;
}

template <class Real>
double batch_accuracy(const TensorT<Real>& logits, const std::vector<int>& labels) {
    return static_cast<double>(batch_correct(logits, labels)) / logits.dim(0);
}

namespace {

std::string g6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

}  // namespace

void write_metrics_header(std::ostream& os) {
    os << "epoch,step,loss,accuracy,fwd_nfes,bwd_nfes,fwd_residual,bwd_residual,budget_L,wall_ms\n";
}

void write_metrics_row(std::ostream& os, const MetricsRow& r) {
    os << r.epoch << "," << r.step << "," << g6(r.loss) << "," << g6(r.accuracy) << "," << r.fwd_nfes << ","
       << r.bwd_nfes << "," << g6(r.fwd_residual) << "," << g6(r.bwd_residual) << "," << g6(r.budget_l) << ","
       << g6(r.wall_ms) << "\n";
}

template <class Real>
AdamT<Real>::AdamT(ModelT<Real>& m, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(make_zero_grads(m)), v_(make_zero_grads(m)) {}

template <class Real>
void AdamT<Real>::step(ModelT<Real>& params, ModelT<Real>& grads) {
    ++t_;
    auto ps = param_registry(params, false);
    auto gs = param_registry(grads, false);
    auto ms = param_registry(m_, false);
    auto vs = param_registry(v_, false);
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < ps.size(); ++i) {
        TensorT<Real>& p = *ps[i].second;
        const TensorT<Real>& g = *gs[i].second;
        TensorT<Real>& m1 = *ms[i].second;
        TensorT<Real>& m2 = *vs[i].second;
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = static_cast<double>(g.data[k]);
            const double a = beta1_ * static_cast<double>(m1.data[k]) + (1.0 - beta1_) * gk;
            const double b = beta2_ * static_cast<double>(m2.data[k]) + (1.0 - beta2_) * gk * gk;
            m1.data[k] = static_cast<Real>(a);
            m2.data[k] = static_cast<Real>(b);
            p.data[k] -= static_cast<Real>(lr_ * (a / bc1) / (std::sqrt(b / bc2) + eps_));
        }
    }
}

template <class Real>
StepGradsT<Real> loss_and_grads(const ModelT<Real>& m, const TensorT<Real>& x, const std::vector<int>& labels,
                                const SolverConfig& fwd_cfg, const SolverConfig& bwd_cfg, BackwardKind kind,
                                Mode mode, Rng* mask_rng, const DropoutMasksT<Real>* fixed_masks) {
    StepGradsT<Real> out{0.0, 0.0, make_zero_grads(m), {}, 0, 0.0};
    out.fwd = solve_forward(m, x, fwd_cfg, mode, mask_rng, fixed_masks);
    TensorT<Real> logits = classify(m, out.fwd.z_star);
    auto [loss, dlogits] = cross_entropy(logits, labels);
    out.loss = loss;
    out.accuracy = batch_accuracy(logits, labels);
    // head gradients by direct reverse accumulation; z cotangent feeds Eq-style backward
    StateT<Real> loss_cot = classify_vjp(m, out.fwd.z_star, dlogits, &out.grads);
    GradientResultT<Real> g = kind == BackwardKind::Implicit
                                  ? implicit_backward(m, x, out.fwd, loss_cot, bwd_cfg)
                                  : jfb_backward(m, x, out.fwd, loss_cot);
    if (g.backward.has_value()) {
        out.bwd_nfes = g.backward->nfes;
        out.bwd_residual = g.backward->residual_trace.empty() ? 0.0 : g.backward->residual_trace.back();
    }
    auto dst = param_registry(out.grads, false);
    auto src = param_registry(g.param_grads, false);
    for (std::size_t i = 0; i < dst.size(); ++i) add_inplace(*dst[i].second, *src[i].second);
    return out;
}

Dataset load_dataset(const RunConfig& cfg) {
    if (cfg.dataset == "idx") return load_idx(cfg.idx_images, cfg.idx_labels);
    SyntheticSpec spec;
    spec.classes = cfg.model.classes;
    spec.count = cfg.data_count;
    spec.channels = cfg.model.in_channels;
    spec.height = cfg.model.height;
    spec.width = cfg.model.width;
    spec.noise = cfg.data_noise;
    spec.seed = cfg.model.seed + 1;
    return make_synthetic(spec);
}

template <class Real>
TrainOutcomeT<Real> train(const RunConfig& cfg, const Dataset& data, std::ostream* log) {
    cfg.validate();
    if (data.classes > cfg.model.classes)
        throw ConfigError("train: dataset has more classes than the model head");
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream metrics_file(cfg.out_dir + "/metrics.csv");
    if (!metrics_file) throw IoError("cannot write metrics.csv in " + cfg.out_dir);
    write_metrics_header(metrics_file);

    TrainOutcomeT<Real> out{build_model<Real>(cfg.model), {}, 0, 1.0, 0.0};
    ModelT<Real>& model = out.model;
    AdamT<Real> adam(model, cfg.lr);
    const double budget_l = overall_bound(cfg.model.lip).total;
    Rng mask_base(cfg.model.seed ^ 0x6d61736bULL);

    int step = 0;
    long converged = 0, attempted = 0, total_nfes = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto batches = make_batches<Real>(data, cfg.batch_size, cfg.model.seed, epoch);
        int divergent_this_epoch = 0;
        for (std::size_t b = 0; b < batches.size(); ++b) {
            ++step;
            const auto t0 = std::chrono::steady_clock::now();
            MetricsRow row;
            row.epoch = epoch;
            row.step = step;
            row.budget_l = budget_l;
            try {
                Rng mask_rng = mask_base.fork(static_cast<std::uint64_t>(step));
                StepGradsT<Real> sg =
                    loss_and_grads<Real>(model, batches[b].x, batches[b].labels, cfg.solver_fwd,
                                         cfg.solver_bwd, cfg.backward, Mode::Train, &mask_rng);
                adam.step(model, sg.grads);
                project_all(model, 1);
                ++attempted;
                if (sg.fwd.forward.converged)
                    ++converged;
                else if (log)
                    *log << "step " << step << " forward not converged (residual "
                         << (sg.fwd.forward.residual_trace.empty() ? 0.0 : sg.fwd.forward.residual_trace.back())
                         << " after " << sg.fwd.forward.nfes << " NFEs)\n";
                total_nfes += sg.fwd.forward.nfes;
                row.loss = sg.loss;
                row.accuracy = sg.accuracy;
                row.fwd_nfes = sg.fwd.forward.nfes;
                row.bwd_nfes = sg.bwd_nfes;
                row.fwd_residual =
                    sg.fwd.forward.residual_trace.empty() ? 0.0 : sg.fwd.forward.residual_trace.back();
                row.bwd_residual = sg.bwd_residual;
            } catch (const DivergenceError& e) {
                ++divergent_this_epoch;
                ++out.divergent_steps;
                if (log) *log << "step " << step << " batch " << b << " skipped: " << e.what() << "\n";
                row.loss = std::nan("");
                row.accuracy = 0.0;
            }
            row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            out.metrics.push_back(row);
            write_metrics_row(metrics_file, row);
        }
        if (divergent_this_epoch * 2 > static_cast<int>(batches.size()))
            throw DivergenceError("more than half the steps diverged in epoch " + std::to_string(epoch),
                                  epoch);
        checkpoint_save(model, cfg.out_dir + "/ckpt_epoch" + std::to_string(epoch));
    }
    checkpoint_save(model, cfg.out_dir + "/checkpoint");
    out.fwd_converged_fraction = attempted ? static_cast<double>(converged) / attempted : 0.0;
    out.mean_fwd_nfes = attempted ? static_cast<double>(total_nfes) / attempted : 0.0;
    return out;
}

template <class Real>
EvalResultT<Real> evaluate(const ModelT<Real>& m, const Dataset& data, const SolverConfig& solver,
                           int batch_size) {
    EvalResultT<Real> out;
    auto batches = make_batches<Real>(data, batch_size, 0, 0, false);
    long hits = 0, total = 0, nfes = 0, converged = 0;
    double res = 0.0;
    for (const auto& b : batches) {
        auto r = solve_forward<Real>(m, b.x, solver, Mode::Eval);
        TensorT<Real> logits = classify(m, r.z_star);
        hits += batch_correct(logits, b.labels);
        total += static_cast<long>(b.labels.size());
        nfes += r.forward.nfes;
        converged += r.forward.converged ? 1 : 0;
        res += r.forward.residual_trace.empty() ? 0.0 : r.forward.residual_trace.back();
    }
    const double nb = static_cast<double>(batches.size());
    out.accuracy = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
    out.mean_nfes = nb ? static_cast<double>(nfes) / nb : 0.0;
    out.mean_residual = nb ? res / nb : 0.0;
    out.converged_fraction = nb ? static_cast<double>(converged) / nb : 0.0;
    return out;
}

#define LDEQ_INSTANTIATE_TRAIN(Real)                                                                          \
    template std::pair<double, TensorT<Real>> cross_entropy<Real>(const TensorT<Real>&,                       \
                                                                  const std::vector<int>&);                   \
    template int batch_correct<Real>(const TensorT<Real>&, const std::vector<int>&);                       \
    template double batch_accuracy<Real>(const TensorT<Real>&, const std::vector<int>&);                      \
    template class AdamT<Real>;                                                                               \
    template StepGradsT<Real> loss_and_grads<Real>(const ModelT<Real>&, const TensorT<Real>&,                 \
                                                   const std::vector<int>&, const SolverConfig&,              \
                                                   const SolverConfig&, BackwardKind, Mode, Rng*,             \
                                                   const DropoutMasksT<Real>*);                               \
    template TrainOutcomeT<Real> train<Real>(const RunConfig&, const Dataset&, std::ostream*);                \
    template EvalResultT<Real> evaluate<Real>(const ModelT<Real>&, const Dataset&, const SolverConfig&, int);

LDEQ_INSTANTIATE_TRAIN(float)
LDEQ_INSTANTIATE_TRAIN(double)

}  // namespace ldeq
