// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ldeq/budget.hpp"
#include "ldeq/ops.hpp"
#include "ldeq/rng.hpp"
#include "ldeq/tensor.hpp"

namespace ldeq {

struct ModelConfig {
    int branches = 2;
    std::vector<int> channels;  // one count per branch
    int in_channels = 1;
    int height = 16;
    int width = 16;
    int classes = 3;
    LipschitzConfig lip;  // lip.branches kept equal to branches

    enum class Variant { Lipschitz, Baseline };
    Variant variant = Variant::Lipschitz;
    double gn_epsilon = 1e-5;  // baseline GroupNorm epsilon
    std::uint64_t seed = 0;

    void validate() const;
    int branch_height(int i) const { return height >> i; }
    int branch_width(int i) const { return width >> i; }
};

template <class Real>
struct ResidualBlockT {
    OpSpecT<Real> conv1, norm1, conv2, norm2, norm3;
};

/// One fusion path (i <- j): a chain of stride-2 conv/norm hops when j < i,
/// or a single 1x1 conv/norm followed by nearest-neighbor interpolation when j > i.
template <class Real>
struct FusePathT {
    std::vector<OpSpecT<Real>> convs;
    std::vector<OpSpecT<Real>> norms;
    bool is_down = true;
    int up_factor = 1;  // 2^(j-i) for upsample paths
};

template <class Real>
struct PostBlockT {
    OpSpecT<Real> conv, norm;
};

template <class Real>
struct ModelT {
    ModelConfig cfg;
    std::vector<ResidualBlockT<Real>> res;            // per branch
    std::vector<std::vector<FusePathT<Real>>> fuse;   // [i][j]; unused on the diagonal
    std::vector<PostBlockT<Real>> post;               // per branch
    OpSpecT<Real> inject;                             // unconstrained conv, input -> branch 0
    TensorT<Real> head_weight, head_bias;             // (classes, sum C), (classes)
    OpSpecT<Real> act;                                // shared activation (SReLU / ReLU)

    bool lipschitz() const { return cfg.variant == ModelConfig::Variant::Lipschitz; }
    Real skip_w() const { return lipschitz() ? Real(1) - Real(cfg.lip.alpha1) : Real(1); }
    Real res_w() const { return lipschitz() ? Real(cfg.lip.alpha1) : Real(1); }
    Real fuse_self_w() const { return lipschitz() ? Real(1) - Real(cfg.lip.alpha2) : Real(1); }
    Real fuse_mix_w() const { return lipschitz() ? Real(cfg.lip.alpha2) : Real(1); }
};

/// Frozen per-solve dropout masks, one per branch, shaped like the residual
/// block's conv2 output.
template <class Real>
struct DropoutMasksT {
    std::vector<TensorT<Real>> branch;
    bool empty() const { return branch.empty(); }
};

// ---- construction -------------------------------------------------------------

/// Kernels drawn uniform and scaled by fan-in, gammas at the ceiling, then the
/// Lipschitz variant is projected into the feasible set. Deterministic in cfg.seed.
template <class Real>
ModelT<Real> build_model(const ModelConfig& cfg);

template <class Real>
ModelT<Real> make_zero_grads(const ModelT<Real>& m);

/// Learnable tensors in a fixed order; include_state appends the persisted
/// power-iteration vectors after each convolution.
template <class Real>
std::vector<std::pair<std::string, TensorT<Real>*>> param_registry(ModelT<Real>& m, bool include_state = false);

template <class Real>
DropoutMasksT<Real> make_dropout_masks(const ModelT<Real>& m, int batch, Rng& rng);

// ---- forward ------------------------------------------------------------------

template <class Real>
struct BranchCacheT {
    TensorT<Real> z, c1, n1, a1, d, mix, n3;
};

template <class Real>
struct PathCacheT {
    std::vector<TensorT<Real>> conv_in;
    std::vector<TensorT<Real>> norm_in;
    std::vector<TensorT<Real>> act_in;  // populated for the pre-final downsample hops
};

template <class Real>
struct PostCacheT {
    TensorT<Real> in, conv_out, norm_out;
};

template <class Real>
struct ForwardCacheT {
    std::vector<BranchCacheT<Real>> res;
    std::vector<std::vector<PathCacheT<Real>>> path;
    StateT<Real> zhat, ztilde;
    std::vector<PostCacheT<Real>> post;
    TensorT<Real> x;  // raw input, kept when the injection's own grads are wanted
    bool has_x = false;
};

/// Injection u(x): unconstrained conv of the raw input, added on branch 0 only.
template <class Real>
TensorT<Real> injection(const ModelT<Real>& m, const TensorT<Real>& x);

/// One application of f_theta with a precomputed injection map (constant
/// during a solve). Masks are required in train mode when dropout is active.
template <class Real>
StateT<Real> apply_f_theta(const ModelT<Real>& m, const StateT<Real>& z, const TensorT<Real>* inj, Mode mode,
                           const DropoutMasksT<Real>* masks = nullptr, ForwardCacheT<Real>* cache = nullptr);

/// Convenience wrapper computing the injection from the raw input.
template <class Real>
StateT<Real> apply_f_theta_x(const ModelT<Real>& m, const StateT<Real>& z, const TensorT<Real>& x, Mode mode,
                             const DropoutMasksT<Real>* masks = nullptr, ForwardCacheT<Real>* cache = nullptr);

// Exposed stages (apply_f_theta composes these).
template <class Real>
TensorT<Real> residual_block_forward(const ModelT<Real>& m, int i, const TensorT<Real>& z_i,
                                     const TensorT<Real>* inj, Mode mode, const TensorT<Real>* mask,
                                     BranchCacheT<Real>* cache = nullptr);
template <class Real>
TensorT<Real> fuse_branch_forward(const ModelT<Real>& m, int i, const StateT<Real>& zhat, Mode mode,
                                  std::vector<PathCacheT<Real>>* caches = nullptr);
template <class Real>
TensorT<Real> post_block_forward(const ModelT<Real>& m, int i, const TensorT<Real>& z_i, Mode mode,
                                 PostCacheT<Real>* cache = nullptr);

/// The all-zero state shaped for a given batch.
template <class Real>
StateT<Real> zero_state(const ModelConfig& cfg, int batch);

// ---- reverse mode ---------------------------------------------------------------

/// J^T v through one application of f_theta at the cached linearization point.
/// When `grads` is non-null, parameter cotangents (including the injection's,
/// if the cache kept the raw input) accumulate into it.
template <class Real>
StateT<Real> vjp_f_theta(const ModelT<Real>& m, const ForwardCacheT<Real>& cache, const StateT<Real>& cot,
                         Mode mode, const DropoutMasksT<Real>* masks, ModelT<Real>* grads = nullptr);

// ---- head -----------------------------------------------------------------------

/// Global average pool per branch, concatenate channel means, affine head.
template <class Real>
TensorT<Real> classify(const ModelT<Real>& m, const StateT<Real>& z);

/// Cotangent of the loss w.r.t. z plus head parameter grads.
template <class Real>
StateT<Real> classify_vjp(const ModelT<Real>& m, const StateT<Real>& z, const TensorT<Real>& dlogits,
                          ModelT<Real>* grads = nullptr);

// ---- maintenance ------------------------------------------------------------------

/// Projects every constrained conv and clamps every gamma; no-op for the baseline.
template <class Real>
void project_all(ModelT<Real>& m, int power_iters);

/// Refreshes spectral estimates for every conv (both variants).
template <class Real>
void refresh_spectral_all(ModelT<Real>& m, int power_iters);

/// Network bound composed from per-op bounds along the actual graph.
template <class Real>
double certified_bound(const ModelT<Real>& m);

}  // namespace ldeq
