// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ldeq/tensor.hpp"

namespace ldeq {

enum class Mode { Train, Eval };

enum class OpKind {
    GroupNorm,      // gamma*(z-mu)/sqrt(var+eps)+beta per group
    MeanGroupNorm,  // gamma*(z-mu)+beta per group
    Relu,
    SRelu,          // max(0, a*z)
    Dropout,        // frozen-mask variational dropout, (1/(1-p)) m.*z
    Conv,           // unconstrained convolution
    ConvStar,       // convolution with spectral norm projected to <= c
    UpsampleNN,     // nearest-neighbor upsample by integer factors (s, t)
    ConvexCombine,  // (1-alpha)*z + alpha*partner, partner frozen
};

const char* op_kind_name(OpKind k);

/// Fixes the linear operator a conv kernel induces (needed for spectral norms).
struct ConvGeometry {
    int in_c = 0;
    int in_h = 0;
    int in_w = 0;
    int stride = 1;
    int pad = 0;
};

/// Tagged description of one layer operation: forward / VJP / analytic bound.
template <class Real>
struct OpSpecT {
    OpKind kind = OpKind::Relu;

    // normalization
    int groups = 1;
    Real epsilon = Real(1e-5);
    TensorT<Real> gamma, beta;  // per-channel

    // activation
    Real slope = Real(1);  // SReLU slope a in (0,1]

    // dropout
    Real rate = Real(0);                    // p in [0,1)
    const TensorT<Real>* mask = nullptr;    // frozen for the duration of a solve

    // convolution
    TensorT<Real> weight, bias;  // (OC,IC,KH,KW), (OC)
    ConvGeometry geom;
    Real target_norm = Real(0);  // c for ConvStar
    TensorT<Real> u_state;       // persisted power-iteration vector (input-shaped, batch 1)
    Real sigma = Real(0);        // last spectral-norm estimate

    // upsample
    int up_s = 1, up_t = 1;

    // convex combine
    Real alpha = Real(0);
    TensorT<Real> partner;
};

/// Cotangents for an op's parameters; empty tensors where not applicable.
template <class Real>
struct OpGradsT {
    TensorT<Real> weight, bias, gamma, beta, partner;
};

// ---- factories --------------------------------------------------------------

template <class Real>
OpSpecT<Real> make_group_norm(int channels, int groups, Real eps);
template <class Real>
OpSpecT<Real> make_mean_group_norm(int channels, int groups);
template <class Real>
OpSpecT<Real> make_relu();
template <class Real>
OpSpecT<Real> make_srelu(Real slope);
template <class Real>
OpSpecT<Real> make_dropout(Real rate);
template <class Real>
OpSpecT<Real> make_conv(int out_c, ConvGeometry geom, int kh, int kw, bool constrained, Real target_norm);
template <class Real>
OpSpecT<Real> make_upsample_nn(int s, int t);
template <class Real>
OpSpecT<Real> make_convex_combine(Real alpha, TensorT<Real> partner);

// ---- core operations ---------------------------------------------------------

template <class Real>
TensorT<Real> op_apply(const OpSpecT<Real>& op, const TensorT<Real>& z, Mode mode);

/// Reverse-mode product at linearization point z: returns J^T v and, when
/// `grads` is non-null, accumulates parameter cotangents into it.
template <class Real>
TensorT<Real> op_vjp(const OpSpecT<Real>& op, const TensorT<Real>& z, const TensorT<Real>& v, Mode mode,
                     OpGradsT<Real>* grads = nullptr);

/// Analytic Lipschitz bound for the op (train-mode value for dropout;
/// c for ConvStar; the cached power-iteration estimate for Conv).
template <class Real>
double op_lipschitz_bound(const OpSpecT<Real>& op);

// ---- spectral control --------------------------------------------------------

/// Power-iteration estimate of the conv operator's largest singular value.
/// `u_state` (input-shaped, batch 1) is normalized and updated in place for
/// warm starts. Zero kernel returns 0.
template <class Real>
Real conv_spectral_norm(const TensorT<Real>& weight, const ConvGeometry& geom, int iters, TensorT<Real>& u_state);

/// Rescales the kernel so the spectral estimate does not exceed c.
/// Returns the pre-projection estimate.
template <class Real>
Real conv_project(TensorT<Real>& weight, Real c, const ConvGeometry& geom, int iters, TensorT<Real>& u_state);

/// Refreshes op.sigma (and u_state); ConvStar additionally rescales to c.
template <class Real>
void op_refresh_spectral(OpSpecT<Real>& op, int iters);
template <class Real>
void op_project(OpSpecT<Real>& op, int iters);

/// Clamps every component of gamma into [-bound, bound].
template <class Real>
void clamp_affine(TensorT<Real>& gamma, Real bound);

// ---- multiscale fusion weights -----------------------------------------------

/// Softmax weights for the fusion layer of output branch i (1-based), over
/// partners j != i, with penalty p_ij = j-i for j > i and 0 for j < i.
struct FusionRow {
    int i = 0;
    std::vector<int> partners;      // branch indices j (1-based), ascending
    std::vector<int> penalties;     // p_ij
    std::vector<double> weights;    // strictly positive, sums to 1
};

FusionRow fusion_weights(int n, int i);

// ---- raw conv kernels (shared with the model's hand-written backward) --------

template <class Real>
TensorT<Real> conv2d_forward(const TensorT<Real>& x, const TensorT<Real>& weight, const TensorT<Real>* bias,
                             int stride, int pad);
template <class Real>
TensorT<Real> conv2d_vjp_input(const TensorT<Real>& v, const TensorT<Real>& weight, int stride, int pad,
                               int in_h, int in_w);
template <class Real>
void conv2d_vjp_params(const TensorT<Real>& x, const TensorT<Real>& v, int stride, int pad,
                       TensorT<Real>& grad_weight, TensorT<Real>* grad_bias);

template <class Real>
TensorT<Real> upsample_nn_forward(const TensorT<Real>& x, int s, int t);
template <class Real>
TensorT<Real> upsample_nn_vjp(const TensorT<Real>& v, int s, int t);

}  // namespace ldeq
