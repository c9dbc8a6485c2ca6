// SPDX-License-Identifier: Apache-2.0

#include "ldeq/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ldeq/errors.hpp"

namespace ldeq {

void ModelConfig::validate() const {
    if (branches < 1) throw ConfigError("model: branches must be >= 1");
    if (static_cast<int>(channels.size()) != branches)
        throw ConfigError("model: channels must list one count per branch");
    for (int c : channels)
        if (c < 1) throw ConfigError("model: channel counts must be >= 1");
    if (in_channels < 1) throw ConfigError("model: in_channels must be >= 1");
    if (classes < 1) throw ConfigError("model: classes must be >= 1");
    const int div = 1 << (branches - 1);
    if (height < div || width < div || height % div != 0 || width % div != 0)
        throw ConfigError("model: height and width must be divisible by 2^(branches-1)");
    if (lip.branches != branches) throw ConfigError("model: lip.branches out of sync with branches");
    if (!lip.upsample_includes_conv)
        throw ConfigError("model: the upsample path always carries a channel-matching conv");
    lip.validate();
    if (!(gn_epsilon > 0.0)) throw ConfigError("model: gn_epsilon must be > 0");
}

namespace {

int norm_groups(int channels) { return std::gcd(channels, 8); }

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <class Real>
OpSpecT<Real> make_variant_norm(const ModelConfig& cfg, int channels) {
    if (cfg.variant == ModelConfig::Variant::Lipschitz) return make_mean_group_norm<Real>(channels, norm_groups(channels));
    return make_group_norm<Real>(channels, norm_groups(channels), static_cast<Real>(cfg.gn_epsilon));
}

template <class Real>
OpSpecT<Real> make_variant_conv(const ModelConfig& cfg, int in_c, int out_c, int level, int k, int stride, int pad) {
    ConvGeometry g;
    g.in_c = in_c;
    g.in_h = cfg.branch_height(level);
    g.in_w = cfg.branch_width(level);
    g.stride = stride;
    g.pad = pad;
    const bool constrained = cfg.variant == ModelConfig::Variant::Lipschitz;
    return make_conv<Real>(out_c, g, k, k, constrained, static_cast<Real>(cfg.lip.conv_norm));
}

template <class Real>
void accum_grads(OpSpecT<Real>& gop, const OpGradsT<Real>& og) {
    if (og.weight.size()) add_inplace(gop.weight, og.weight);
    if (og.bias.size()) add_inplace(gop.bias, og.bias);
    if (og.gamma.size()) add_inplace(gop.gamma, og.gamma);
    if (og.beta.size()) add_inplace(gop.beta, og.beta);
}

}  // namespace

template <class Real>
std::vector<std::pair<std::string, TensorT<Real>*>> param_registry(ModelT<Real>& m, bool include_state) {
    std::vector<std::pair<std::string, TensorT<Real>*>> out;
    auto add_conv = [&](const std::string& base, OpSpecT<Real>& op) {
        out.emplace_back(base + ".weight", &op.weight);
        out.emplace_back(base + ".bias", &op.bias);
        if (include_state) out.emplace_back(base + ".u", &op.u_state);
    };
    auto add_norm = [&](const std::string& base, OpSpecT<Real>& op) {
        out.emplace_back(base + ".gamma", &op.gamma);
        out.emplace_back(base + ".beta", &op.beta);
    };
    const int n = m.cfg.branches;
    for (int i = 0; i < n; ++i) {
        const std::string b = "res" + std::to_string(i);
        add_conv(b + ".conv1", m.res[static_cast<std::size_t>(i)].conv1);
        add_norm(b + ".norm1", m.res[static_cast<std::size_t>(i)].norm1);
        add_conv(b + ".conv2", m.res[static_cast<std::size_t>(i)].conv2);
        add_norm(b + ".norm2", m.res[static_cast<std::size_t>(i)].norm2);
        add_norm(b + ".norm3", m.res[static_cast<std::size_t>(i)].norm3);
    }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            FusePathT<Real>& p = m.fuse[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            if (p.is_down) {
                for (std::size_t k = 0; k < p.convs.size(); ++k) {
                    const std::string b = "down" + std::to_string(i) + "." + std::to_string(j) + ".hop" +
                                          std::to_string(k);
                    add_conv(b + ".conv", p.convs[k]);
                    add_norm(b + ".norm", p.norms[k]);
                }
            } else {
                const std::string b = "up" + std::to_string(i) + "." + std::to_string(j);
                add_conv(b + ".conv", p.convs[0]);
                add_norm(b + ".norm", p.norms[0]);
            }
        }
    for (int i = 0; i < n; ++i) {
        const std::string b = "post" + std::to_string(i);
        add_conv(b + ".conv", m.post[static_cast<std::size_t>(i)].conv);
        add_norm(b + ".norm", m.post[static_cast<std::size_t>(i)].norm);
    }
    add_conv("inject", m.inject);
    out.emplace_back("head.weight", &m.head_weight);
    out.emplace_back("head.bias", &m.head_bias);
    return out;
}

template <class Real>
ModelT<Real> build_model(const ModelConfig& cfg) {
    cfg.validate();
    ModelT<Real> m;
    m.cfg = cfg;
    const int n = cfg.branches;
    const bool lip = cfg.variant == ModelConfig::Variant::Lipschitz;

    m.act = lip ? make_srelu<Real>(static_cast<Real>(cfg.lip.srelu_slope)) : make_relu<Real>();

    m.res.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int C = cfg.channels[static_cast<std::size_t>(i)];
        auto& blk = m.res[static_cast<std::size_t>(i)];
        blk.conv1 = make_variant_conv<Real>(cfg, C, C, i, 3, 1, 1);
        blk.norm1 = make_variant_norm<Real>(cfg, C);
        blk.conv2 = make_variant_conv<Real>(cfg, C, C, i, 3, 1, 1);
        blk.norm2 = make_variant_norm<Real>(cfg, C);
        blk.norm3 = make_variant_norm<Real>(cfg, C);
    }

    m.fuse.assign(static_cast<std::size_t>(n), std::vector<FusePathT<Real>>(static_cast<std::size_t>(n)));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            FusePathT<Real>& p = m.fuse[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            if (j < i) {
                p.is_down = true;
                // hops j -> j+1 -> ... -> i, stride-2 convs; the final hop carries no activation
                for (int k = 0; k < i - j; ++k) {
                    const int from = j + k;
                    p.convs.push_back(make_variant_conv<Real>(cfg, cfg.channels[static_cast<std::size_t>(from)],
                                                              cfg.channels[static_cast<std::size_t>(from + 1)],
                                                              from, 3, 2, 1));
                    p.norms.push_back(make_variant_norm<Real>(cfg, cfg.channels[static_cast<std::size_t>(from + 1)]));
                }
            } else {
                p.is_down = false;
                p.up_factor = 1 << (j - i);
                // channel-matching 1x1 conv at the low resolution, then interpolation
                p.convs.push_back(make_variant_conv<Real>(cfg, cfg.channels[static_cast<std::size_t>(j)],
                                                          cfg.channels[static_cast<std::size_t>(i)], j, 1, 1, 0));
                p.norms.push_back(make_variant_norm<Real>(cfg, cfg.channels[static_cast<std::size_t>(i)]));
            }
        }

    m.post.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int C = cfg.channels[static_cast<std::size_t>(i)];
        m.post[static_cast<std::size_t>(i)].conv = make_variant_conv<Real>(cfg, C, C, i, 3, 1, 1);
        m.post[static_cast<std::size_t>(i)].norm = make_variant_norm<Real>(cfg, C);
    }

    {
        ConvGeometry g;
        g.in_c = cfg.in_channels;
        g.in_h = cfg.height;
        g.in_w = cfg.width;
        g.stride = 1;
        g.pad = 1;
        m.inject = make_conv<Real>(cfg.channels[0], g, 3, 3, false, Real(0));
    }

    const int feat = std::accumulate(cfg.channels.begin(), cfg.channels.end(), 0);
    m.head_weight = TensorT<Real>({cfg.classes, feat});
    m.head_bias = TensorT<Real>({cfg.classes});

    // Deterministic init in registry order.
    Rng rng(cfg.seed);
    const Real gamma0 = static_cast<Real>(lip ? cfg.lip.gamma_bar : 1.0);
    for (auto& [name, t] : param_registry(m, false)) {
        if (ends_with(name, ".gamma")) {
            t->fill(gamma0);
        } else if (ends_with(name, ".beta") || ends_with(name, ".bias")) {
            t->fill(Real(0));
        } else {  // kernels and the head matrix
            const int fan_in = t->shape.size() == 4 ? t->dim(1) * t->dim(2) * t->dim(3) : t->dim(1);
            const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (auto& v : t->data) v = static_cast<Real>(rng.uniform(-s, s));
        }
    }
    for (auto& [name, t] : param_registry(m, true))
        if (ends_with(name, ".u"))
            for (auto& v : t->data) v = static_cast<Real>(rng.normal());

    if (lip)
        project_all(m, 50);
    else
        refresh_spectral_all(m, 50);
    return m;
}

template <class Real>
ModelT<Real> make_zero_grads(const ModelT<Real>& m) {
    ModelT<Real> g = m;
    for (auto& [name, t] : param_registry(g, false)) t->fill(Real(0));
    return g;
}

template <class Real>
DropoutMasksT<Real> make_dropout_masks(const ModelT<Real>& m, int batch, Rng& rng) {
    DropoutMasksT<Real> masks;
    const double keep = 1.0 - m.cfg.lip.drop_rate;
    for (int i = 0; i < m.cfg.branches; ++i) {
        TensorT<Real> t({batch, m.cfg.channels[static_cast<std::size_t>(i)], m.cfg.branch_height(i),
                         m.cfg.branch_width(i)});
        for (auto& v : t.data) v = rng.bernoulli(keep) ? Real(1) : Real(0);
        masks.branch.push_back(std::move(t));
    }
    return masks;
}

template <class Real>
StateT<Real> zero_state(const ModelConfig& cfg, int batch) {
    StateT<Real> z;
    for (int i = 0; i < cfg.branches; ++i)
        z.branches.emplace_back(std::vector<int>{batch, cfg.channels[static_cast<std::size_t>(i)],
                                                 cfg.branch_height(i), cfg.branch_width(i)});
    return z;
}

template <class Real>
TensorT<Real> injection(const ModelT<Real>& m, const TensorT<Real>& x) {
    if (x.shape.size() != 4 || x.dim(1) != m.cfg.in_channels || x.dim(2) != m.cfg.height ||
        x.dim(3) != m.cfg.width)
        throw StructuralError("injection: input shape " + x.shape_str() + " does not match config");
    return op_apply(m.inject, x, Mode::Eval);
}

template <class Real>
TensorT<Real> residual_block_forward(const ModelT<Real>& m, int i, const TensorT<Real>& z_i,
                                     const TensorT<Real>* inj, Mode mode, const TensorT<Real>* mask,
                                     BranchCacheT<Real>* cache) {
    const auto& blk = m.res[static_cast<std::size_t>(i)];
    TensorT<Real> c1 = op_apply(blk.conv1, z_i, mode);
    TensorT<Real> n1 = op_apply(blk.norm1, c1, mode);
    TensorT<Real> a1 = op_apply(m.act, n1, mode);
    TensorT<Real> c2 = op_apply(blk.conv2, a1, mode);
    if (inj) add_inplace(c2, *inj);
    OpSpecT<Real> drop = make_dropout<Real>(static_cast<Real>(m.cfg.lip.drop_rate));
    drop.mask = mask;
    TensorT<Real> d = op_apply(drop, c2, mode);
    TensorT<Real> g = op_apply(blk.norm2, d, mode);
    TensorT<Real> mix = std::move(g);
    scale_inplace(mix, m.res_w());
    axpby_inplace(m.skip_w(), z_i, Real(1), mix);
    TensorT<Real> n3 = op_apply(blk.norm3, mix, mode);
    TensorT<Real> zhat = op_apply(m.act, n3, mode);
    if (cache) {
        cache->z = z_i;
        cache->c1 = std::move(c1);
        cache->n1 = std::move(n1);
        cache->a1 = std::move(a1);
        cache->d = std::move(d);
        cache->mix = std::move(mix);
        cache->n3 = std::move(n3);
    }
    return zhat;
}

namespace {

template <class Real>
TensorT<Real> fuse_path_forward(const ModelT<Real>& m, int i, int j, const TensorT<Real>& in, Mode mode,
                                PathCacheT<Real>* pc) {
    const FusePathT<Real>& p = m.fuse[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    if (pc) {
        pc->conv_in.clear();
        pc->norm_in.clear();
        pc->act_in.clear();
    }
    TensorT<Real> t = in;
    const std::size_t hops = p.convs.size();
    for (std::size_t k = 0; k < hops; ++k) {
        if (pc) pc->conv_in.push_back(t);
        t = op_apply(p.convs[k], t, mode);
        if (pc) pc->norm_in.push_back(t);
        t = op_apply(p.norms[k], t, mode);
        if (p.is_down && k + 1 < hops) {
            if (pc) pc->act_in.push_back(t);
            t = op_apply(m.act, t, mode);
        }
    }
    if (!p.is_down) t = upsample_nn_forward(t, p.up_factor, p.up_factor);
    return t;
}

}  // namespace

template <class Real>
TensorT<Real> fuse_branch_forward(const ModelT<Real>& m, int i, const StateT<Real>& zhat, Mode mode,
                                  std::vector<PathCacheT<Real>>* caches) {
    const int n = m.cfg.branches;
    TensorT<Real> acc = zhat.branches[static_cast<std::size_t>(i)];
    scale_inplace(acc, m.fuse_self_w());
    if (n == 1) return acc;
    const FusionRow row = fusion_weights(n, i + 1);
    for (std::size_t k = 0; k < row.partners.size(); ++k) {
        const int j = row.partners[k] - 1;
        const double w = m.lipschitz() ? row.weights[k] : 1.0;
        PathCacheT<Real>* pc = caches ? &(*caches)[static_cast<std::size_t>(j)] : nullptr;
        TensorT<Real> contrib =
            fuse_path_forward(m, i, j, zhat.branches[static_cast<std::size_t>(j)], mode, pc);
        axpby_inplace(static_cast<Real>(static_cast<double>(m.fuse_mix_w()) * w), contrib, Real(1), acc);
    }
    return acc;
}

template <class Real>
TensorT<Real> post_block_forward(const ModelT<Real>& m, int i, const TensorT<Real>& z_i, Mode mode,
                                 PostCacheT<Real>* cache) {
    const auto& blk = m.post[static_cast<std::size_t>(i)];
    TensorT<Real> c = op_apply(blk.conv, z_i, mode);
    TensorT<Real> nm = op_apply(blk.norm, c, mode);
    TensorT<Real> out = op_apply(m.act, nm, mode);
    if (cache) {
        cache->in = z_i;
        cache->conv_out = std::move(c);
        cache->norm_out = std::move(nm);
    }
    return out;
}

template <class Real>
StateT<Real> apply_f_theta(const ModelT<Real>& m, const StateT<Real>& z, const TensorT<Real>* inj, Mode mode,
                           const DropoutMasksT<Real>* masks, ForwardCacheT<Real>* cache) {
    const int n = m.cfg.branches;
    if (static_cast<int>(z.branches.size()) != n)
        throw StructuralError("apply_f_theta: state has wrong branch count");
    for (int i = 0; i < n; ++i) {
        const auto& b = z.branches[static_cast<std::size_t>(i)];
        if (b.dim(1) != m.cfg.channels[static_cast<std::size_t>(i)] || b.dim(2) != m.cfg.branch_height(i) ||
            b.dim(3) != m.cfg.branch_width(i))
            throw StructuralError("apply_f_theta: branch " + std::to_string(i) + " has shape " + b.shape_str());
    }
    if (cache) {
        cache->res.resize(static_cast<std::size_t>(n));
        cache->path.assign(static_cast<std::size_t>(n), std::vector<PathCacheT<Real>>(static_cast<std::size_t>(n)));
        cache->post.resize(static_cast<std::size_t>(n));
    }
    StateT<Real> zhat;
    zhat.branches.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const TensorT<Real>* mask =
            (masks && !masks->empty()) ? &masks->branch[static_cast<std::size_t>(i)] : nullptr;
        zhat.branches[static_cast<std::size_t>(i)] =
            residual_block_forward(m, i, z.branches[static_cast<std::size_t>(i)], i == 0 ? inj : nullptr, mode,
                                   mask, cache ? &cache->res[static_cast<std::size_t>(i)] : nullptr);
    }
    StateT<Real> ztilde;
    ztilde.branches.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        ztilde.branches[static_cast<std::size_t>(i)] = fuse_branch_forward(
            m, i, zhat, mode, cache ? &cache->path[static_cast<std::size_t>(i)] : nullptr);
    StateT<Real> out;
    out.branches.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        out.branches[static_cast<std::size_t>(i)] =
            post_block_forward(m, i, ztilde.branches[static_cast<std::size_t>(i)], mode,
                               cache ? &cache->post[static_cast<std::size_t>(i)] : nullptr);
    if (cache) {
        cache->zhat = std::move(zhat);
        cache->ztilde = std::move(ztilde);
    }
    return out;
}

template <class Real>
StateT<Real> apply_f_theta_x(const ModelT<Real>& m, const StateT<Real>& z, const TensorT<Real>& x, Mode mode,
                             const DropoutMasksT<Real>* masks, ForwardCacheT<Real>* cache) {
    TensorT<Real> inj = injection(m, x);
    if (cache) {
        cache->x = x;
        cache->has_x = true;
    }
    return apply_f_theta(m, z, &inj, mode, masks, cache);
}

template <class Real>
StateT<Real> vjp_f_theta(const ModelT<Real>& m, const ForwardCacheT<Real>& cache, const StateT<Real>& cot,
                         Mode mode, const DropoutMasksT<Real>* masks, ModelT<Real>* grads) {
    const int n = m.cfg.branches;
    if (static_cast<int>(cot.branches.size()) != n)
        throw StructuralError("vjp_f_theta: cotangent has wrong branch count");
    if (static_cast<int>(cache.res.size()) != n || static_cast<int>(cache.post.size()) != n ||
        static_cast<int>(cache.path.size()) != n)
        throw StructuralError("vjp_f_theta: cache does not hold a linearization of this model");

    auto run = [&](const OpSpecT<Real>& op, OpSpecT<Real>* gop, const TensorT<Real>& in,
                   const TensorT<Real>& v) {
        if (!gop) return op_vjp<Real>(op, in, v, mode, nullptr);
        OpGradsT<Real> og;
        TensorT<Real> out = op_vjp(op, in, v, mode, &og);
        accum_grads(*gop, og);
        return out;
    };

    // post-fusion blocks
    StateT<Real> cot_tilde;
    cot_tilde.branches.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto& pc = cache.post[static_cast<std::size_t>(i)];
        auto& blk = m.post[static_cast<std::size_t>(i)];
        OpSpecT<Real>* gconv = grads ? &grads->post[static_cast<std::size_t>(i)].conv : nullptr;
        OpSpecT<Real>* gnorm = grads ? &grads->post[static_cast<std::size_t>(i)].norm : nullptr;
        TensorT<Real> v = op_vjp<Real>(m.act, pc.norm_out, cot.branches[static_cast<std::size_t>(i)], mode, nullptr);
        v = run(blk.norm, gnorm, pc.conv_out, v);
        cot_tilde.branches[static_cast<std::size_t>(i)] = run(blk.conv, gconv, pc.in, v);
    }

    // fusion layer
    StateT<Real> cot_hat = zeros_like(cot_tilde);
    for (int i = 0; i < n; ++i) {
        axpby_inplace(m.fuse_self_w(), cot_tilde.branches[static_cast<std::size_t>(i)], Real(1),
                      cot_hat.branches[static_cast<std::size_t>(i)]);
        if (n == 1) continue;
        const FusionRow row = fusion_weights(n, i + 1);
        for (std::size_t k = 0; k < row.partners.size(); ++k) {
            const int j = row.partners[k] - 1;
            const double w = m.lipschitz() ? row.weights[k] : 1.0;
            const FusePathT<Real>& p = m.fuse[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            const PathCacheT<Real>& pc = cache.path[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            TensorT<Real> v = cot_tilde.branches[static_cast<std::size_t>(i)];
            scale_inplace(v, static_cast<Real>(static_cast<double>(m.fuse_mix_w()) * w));
            OpSpecT<Real>* gconv = nullptr;
            OpSpecT<Real>* gnorm = nullptr;
            auto gpath = [&](std::size_t hop) {
                if (!grads) {
                    gconv = gnorm = nullptr;
                    return;
                }
                FusePathT<Real>& gp = grads->fuse[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
                gconv = &gp.convs[hop];
                gnorm = &gp.norms[hop];
            };
            if (!p.is_down) {
                v = upsample_nn_vjp(v, p.up_factor, p.up_factor);
                gpath(0);
                v = run(p.norms[0], gnorm, pc.norm_in[0], v);
                v = run(p.convs[0], gconv, pc.conv_in[0], v);
            } else {
                const std::size_t hops = p.convs.size();
                for (std::size_t back = hops; back-- > 0;) {
                    if (back + 1 < hops) v = op_vjp<Real>(m.act, pc.act_in[back], v, mode, nullptr);
                    gpath(back);
                    v = run(p.norms[back], gnorm, pc.norm_in[back], v);
                    v = run(p.convs[back], gconv, pc.conv_in[back], v);
                }
            }
            add_inplace(cot_hat.branches[static_cast<std::size_t>(j)], v);
        }
    }

    // residual blocks
    StateT<Real> cot_z = zeros_like(cot_hat);
    for (int i = 0; i < n; ++i) {
        const auto& bc = cache.res[static_cast<std::size_t>(i)];
        auto& blk = m.res[static_cast<std::size_t>(i)];
        ResidualBlockT<Real>* gb = grads ? &grads->res[static_cast<std::size_t>(i)] : nullptr;
        TensorT<Real> v = op_vjp<Real>(m.act, bc.n3, cot_hat.branches[static_cast<std::size_t>(i)], mode, nullptr);
        v = run(blk.norm3, gb ? &gb->norm3 : nullptr, bc.mix, v);
        // skip path
        axpby_inplace(m.skip_w(), v, Real(1), cot_z.branches[static_cast<std::size_t>(i)]);
        // residual path
        scale_inplace(v, m.res_w());
        v = run(blk.norm2, gb ? &gb->norm2 : nullptr, bc.d, v);
        OpSpecT<Real> drop = make_dropout<Real>(static_cast<Real>(m.cfg.lip.drop_rate));
        const TensorT<Real>* mask =
            (masks && !masks->empty()) ? &masks->branch[static_cast<std::size_t>(i)] : nullptr;
        drop.mask = mask;
        v = op_vjp<Real>(drop, v, v, mode, nullptr);  // linear in z; only the mask matters
        if (grads && i == 0 && cache.has_x) {
            // injection parameters see the same cotangent the conv2 output does
            conv2d_vjp_params(cache.x, v, m.inject.geom.stride, m.inject.geom.pad, grads->inject.weight,
                              &grads->inject.bias);
        }
        v = run(blk.conv2, gb ? &gb->conv2 : nullptr, bc.a1, v);
        v = op_vjp<Real>(m.act, bc.n1, v, mode, nullptr);
        v = run(blk.norm1, gb ? &gb->norm1 : nullptr, bc.c1, v);
        v = run(blk.conv1, gb ? &gb->conv1 : nullptr, bc.z, v);
        add_inplace(cot_z.branches[static_cast<std::size_t>(i)], v);
    }
    return cot_z;
}

template <class Real>
TensorT<Real> classify(const ModelT<Real>& m, const StateT<Real>& z) {
    const int n = m.cfg.branches;
    if (static_cast<int>(z.branches.size()) != n) throw StructuralError("classify: wrong branch count");
    const int batch = z.batch();
    const int feat = m.head_weight.dim(1);
    const int classes = m.head_weight.dim(0);
    TensorT<Real> pooled({batch, feat});
    int off = 0;
    for (int i = 0; i < n; ++i) {
        const auto& b = z.branches[static_cast<std::size_t>(i)];
        const int C = b.dim(1);
        const Real inv = Real(1) / static_cast<Real>(b.dim(2) * b.dim(3));
        for (int s = 0; s < batch; ++s)
            for (int c = 0; c < C; ++c) {
                const Real* p = &b.data[b.idx4(s, c, 0, 0)];
                Real acc = Real(0);
                for (int k = 0; k < b.dim(2) * b.dim(3); ++k) acc += p[k];
                pooled.data[static_cast<std::size_t>(s) * feat + off + c] = acc * inv;
            }
        off += C;
    }
    TensorT<Real> logits({batch, classes});
    for (int s = 0; s < batch; ++s)
        for (int k = 0; k < classes; ++k) {
            Real acc = m.head_bias.data[static_cast<std::size_t>(k)];
            const Real* wrow = &m.head_weight.data[static_cast<std::size_t>(k) * feat];
            const Real* frow = &pooled.data[static_cast<std::size_t>(s) * feat];
            for (int f = 0; f < feat; ++f) acc += wrow[f] * frow[f];
            logits.data[static_cast<std::size_t>(s) * classes + k] = acc;
        }
    return logits;
}

template <class Real>
StateT<Real> classify_vjp(const ModelT<Real>& m, const StateT<Real>& z, const TensorT<Real>& dlogits,
                          ModelT<Real>* grads) {
    const int n = m.cfg.branches;
    const int batch = z.batch();
    const int feat = m.head_weight.dim(1);
    const int classes = m.head_weight.dim(0);
    if (dlogits.dim(0) != batch || dlogits.dim(1) != classes)
        throw StructuralError("classify_vjp: cotangent shape mismatch");

    // recompute pooled features (cheap) for the head weight grads
    TensorT<Real> pooled({batch, feat});
    int off = 0;
    for (int i = 0; i < n; ++i) {
        const auto& b = z.branches[static_cast<std::size_t>(i)];
        const int C = b.dim(1);
        const Real inv = Real(1) / static_cast<Real>(b.dim(2) * b.dim(3));
        for (int s = 0; s < batch; ++s)
            for (int c = 0; c < C; ++c) {
                const Real* p = &b.data[b.idx4(s, c, 0, 0)];
                Real acc = Real(0);
                for (int k = 0; k < b.dim(2) * b.dim(3); ++k) acc += p[k];
                pooled.data[static_cast<std::size_t>(s) * feat + off + c] = acc * inv;
            }
        off += C;
    }
    if (grads) {
        for (int s = 0; s < batch; ++s)
            for (int k = 0; k < classes; ++k) {
                const Real d = dlogits.data[static_cast<std::size_t>(s) * classes + k];
                grads->head_bias.data[static_cast<std::size_t>(k)] += d;
                Real* gw = &grads->head_weight.data[static_cast<std::size_t>(k) * feat];
                const Real* frow = &pooled.data[static_cast<std::size_t>(s) * feat];
                for (int f = 0; f < feat; ++f) gw[f] += d * frow[f];
            }
    }
    // v_feat = W^T dlogits, spread uniformly over each branch's spatial extent
    StateT<Real> cot = zeros_like(z);
    off = 0;
    for (int i = 0; i < n; ++i) {
        auto& b = cot.branches[static_cast<std::size_t>(i)];
        const int C = b.dim(1);
        const Real inv = Real(1) / static_cast<Real>(b.dim(2) * b.dim(3));
        for (int s = 0; s < batch; ++s)
            for (int c = 0; c < C; ++c) {
                Real acc = Real(0);
                for (int k = 0; k < classes; ++k)
                    acc += m.head_weight.data[static_cast<std::size_t>(k) * feat + off + c] *
                           dlogits.data[static_cast<std::size_t>(s) * classes + k];
                acc *= inv;
                Real* p = &b.data[b.idx4(s, c, 0, 0)];
                for (int k = 0; k < b.dim(2) * b.dim(3); ++k) p[k] = acc;
            }
        off += C;
    }
    return cot;
}

template <class Real>
void project_all(ModelT<Real>& m, int power_iters) {
    if (!m.lipschitz()) return;
    const Real bound = static_cast<Real>(m.cfg.lip.gamma_bar);
    for (auto& [name, t] : param_registry(m, false))
        if (ends_with(name, ".gamma")) clamp_affine(*t, bound);
    auto project_op = [&](OpSpecT<Real>& op) {
        if (op.kind == OpKind::ConvStar) op_project(op, power_iters);
    };
    for (auto& blk : m.res) {
        project_op(blk.conv1);
        project_op(blk.conv2);
    }
    for (auto& rowp : m.fuse)
        for (auto& p : rowp)
            for (auto& c : p.convs) project_op(c);
    for (auto& blk : m.post) project_op(blk.conv);
}

template <class Real>
void refresh_spectral_all(ModelT<Real>& m, int power_iters) {
    auto refresh = [&](OpSpecT<Real>& op) { op_refresh_spectral(op, power_iters); };
    for (auto& blk : m.res) {
        refresh(blk.conv1);
        refresh(blk.conv2);
    }
    for (auto& rowp : m.fuse)
        for (auto& p : rowp)
            for (auto& c : p.convs) refresh(c);
    for (auto& blk : m.post) refresh(blk.conv);
    refresh(m.inject);
}

template <class Real>
double certified_bound(const ModelT<Real>& m) {
    const int n = m.cfg.branches;
    const double act = op_lipschitz_bound(m.act);
    const double drop = 1.0 / (1.0 - m.cfg.lip.drop_rate);
    const double skip_w = static_cast<double>(m.skip_w());
    const double res_w = static_cast<double>(m.res_w());
    const double self_w = static_cast<double>(m.fuse_self_w());
    const double mix_w = static_cast<double>(m.fuse_mix_w());

    double h_hat = 0.0;
    for (int i = 0; i < n; ++i) {
        const auto& blk = m.res[static_cast<std::size_t>(i)];
        const double lg = op_lipschitz_bound(blk.norm2) * drop * op_lipschitz_bound(blk.conv2) * act *
                          op_lipschitz_bound(blk.norm1) * op_lipschitz_bound(blk.conv1);
        h_hat = std::max(h_hat, act * op_lipschitz_bound(blk.norm3) * (skip_w + res_w * lg));
    }

    double sum_sq = 0.0;
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        if (n > 1) {
            const FusionRow row = fusion_weights(n, i + 1);
            for (std::size_t k = 0; k < row.partners.size(); ++k) {
                const int j = row.partners[k] - 1;
                const double w = m.lipschitz() ? row.weights[k] : 1.0;
                const FusePathT<Real>& p = m.fuse[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
                double path = 1.0;
                const std::size_t hops = p.convs.size();
                for (std::size_t h = 0; h < hops; ++h) {
                    path *= op_lipschitz_bound(p.convs[h]) * op_lipschitz_bound(p.norms[h]);
                    if (p.is_down && h + 1 < hops) path *= act;
                }
                if (!p.is_down)
                    path *= op_lipschitz_bound(make_upsample_nn<Real>(p.up_factor, p.up_factor));
                acc += (w * path) * (w * path);
            }
        }
        const double lt = std::sqrt(self_w * self_w + mix_w * mix_w * acc);
        sum_sq += lt * lt;
    }

    double l_bar = 0.0;
    for (int i = 0; i < n; ++i) {
        const auto& blk = m.post[static_cast<std::size_t>(i)];
        l_bar = std::max(l_bar, act * op_lipschitz_bound(blk.norm) * op_lipschitz_bound(blk.conv));
    }
    return h_hat * std::sqrt(sum_sq) * l_bar;
}

// ---- explicit instantiations --------------------------------------------------------

#define LDEQ_INSTANTIATE_MODEL(Real)                                                                          \
    template ModelT<Real> build_model<Real>(const ModelConfig&);                                              \
    template ModelT<Real> make_zero_grads<Real>(const ModelT<Real>&);                                         \
    template std::vector<std::pair<std::string, TensorT<Real>*>> param_registry<Real>(ModelT<Real>&, bool);   \
    template DropoutMasksT<Real> make_dropout_masks<Real>(const ModelT<Real>&, int, Rng&);                    \
    template StateT<Real> zero_state<Real>(const ModelConfig&, int);                                          \
    template TensorT<Real> injection<Real>(const ModelT<Real>&, const TensorT<Real>&);                        \
    template TensorT<Real> residual_block_forward<Real>(const ModelT<Real>&, int, const TensorT<Real>&,       \
                                                        const TensorT<Real>*, Mode, const TensorT<Real>*,     \
                                                        BranchCacheT<Real>*);                                 \
    template TensorT<Real> fuse_branch_forward<Real>(const ModelT<Real>&, int, const StateT<Real>&, Mode,     \
                                                     std::vector<PathCacheT<Real>>*);                         \
    template TensorT<Real> post_block_forward<Real>(const ModelT<Real>&, int, const TensorT<Real>&, Mode,     \
                                                    PostCacheT<Real>*);                                       \
    template StateT<Real> apply_f_theta<Real>(const ModelT<Real>&, const StateT<Real>&, const TensorT<Real>*, \
                                              Mode, const DropoutMasksT<Real>*, ForwardCacheT<Real>*);        \
    template StateT<Real> apply_f_theta_x<Real>(const ModelT<Real>&, const StateT<Real>&,                     \
                                                const TensorT<Real>&, Mode, const DropoutMasksT<Real>*,       \
                                                ForwardCacheT<Real>*);                                        \
    template StateT<Real> vjp_f_theta<Real>(const ModelT<Real>&, const ForwardCacheT<Real>&,                  \
                                            const StateT<Real>&, Mode, const DropoutMasksT<Real>*,            \
                                            ModelT<Real>*);                                                   \
    template TensorT<Real> classify<Real>(const ModelT<Real>&, const StateT<Real>&);                          \
    template StateT<Real> classify_vjp<Real>(const ModelT<Real>&, const StateT<Real>&, const TensorT<Real>&,  \
                                             ModelT<Real>*);                                                  \
    template void project_all<Real>(ModelT<Real>&, int);                                                      \
    template void refresh_spectral_all<Real>(ModelT<Real>&, int);                                             \
    template double certified_bound<Real>(const ModelT<Real>&);

LDEQ_INSTANTIATE_MODEL(float)
LDEQ_INSTANTIATE_MODEL(double)

}  // namespace ldeq
