// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ldeq/config.hpp"
#include "ldeq/data.hpp"
#include "ldeq/equilibrium.hpp"
#include "ldeq/model.hpp"

namespace ldeq {

/// Mean cross-entropy over the batch plus the logits cotangent
/// (softmax - onehot) / batch.
template <class Real>
std::pair<double, TensorT<Real>> cross_entropy(const TensorT<Real>& logits, const std::vector<int>& labels);

/// Number of argmax hits.
template <class Real>
int batch_correct(const TensorT<Real>& logits, const std::vector<int>& labels);

template <class Real>
double batch_accuracy(const TensorT<Real>& logits, const std::vector<int>& labels);

struct MetricsRow {
    int epoch = 0;
    int step = 0;
    double loss = 0.0;
    double accuracy = 0.0;
    int fwd_nfes = 0;
    int bwd_nfes = 0;
    double fwd_residual = 0.0;
    double bwd_residual = 0.0;
    double budget_l = 0.0;
    double wall_ms = 0.0;
};

void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const MetricsRow& row);  // %.6g

/// Adam with bias correction; step() walks the learnable registry.
template <class Real>
class AdamT {
public:
    AdamT(ModelT<Real>& m, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step(ModelT<Real>& params, ModelT<Real>& grads);

private:
    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
    ModelT<Real> m_, v_;
};

/// Gradients of the cross-entropy loss for one batch: the head by plain
/// reverse accumulation, f_theta parameters through the chosen backward pass.
template <class Real>
struct StepGradsT {
    double loss = 0.0;
    double accuracy = 0.0;
    ModelT<Real> grads;
    EquilibriumResultT<Real> fwd;
    int bwd_nfes = 0;
    double bwd_residual = 0.0;
};

template <class Real>
StepGradsT<Real> loss_and_grads(const ModelT<Real>& m, const TensorT<Real>& x, const std::vector<int>& labels,
                                const SolverConfig& fwd_cfg, const SolverConfig& bwd_cfg, BackwardKind kind,
                                Mode mode, Rng* mask_rng, const DropoutMasksT<Real>* fixed_masks = nullptr);

template <class Real>
struct TrainOutcomeT {
    ModelT<Real> model;
    std::vector<MetricsRow> metrics;
    int divergent_steps = 0;
    double fwd_converged_fraction = 1.0;  // over non-divergent steps
    double mean_fwd_nfes = 0.0;
};

/// Full loop per the run config: solve -> loss -> backward -> Adam ->
/// projection, one metrics row per step, a checkpoint per epoch plus a final
/// one, metrics.csv in out_dir. Divergent steps are logged and skipped; more
/// than half divergent in one epoch aborts.
template <class Real>
TrainOutcomeT<Real> train(const RunConfig& cfg, const Dataset& data, std::ostream* log = nullptr);

template <class Real>
struct EvalResultT {
    double accuracy = 0.0;
    double mean_nfes = 0.0;
    double mean_residual = 0.0;
    double converged_fraction = 0.0;
};

/// Dropout disabled; deterministic batch order.
template <class Real>
EvalResultT<Real> evaluate(const ModelT<Real>& m, const Dataset& data, const SolverConfig& solver,
                           int batch_size);

/// Builds the dataset named by the config.
Dataset load_dataset(const RunConfig& cfg);

}  // namespace ldeq
