// SPDX-License-Identifier: Apache-2.0

#include "ldeq/ops.hpp"

#include <algorithm>
#include <cmath>

namespace ldeq {

const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::GroupNorm: return "GN";
        case OpKind::MeanGroupNorm: return "MGN";
        case OpKind::Relu: return "ReLU";
        case OpKind::SRelu: return "SReLU";
        case OpKind::Dropout: return "Dropout";
        case OpKind::Conv: return "Conv";
        case OpKind::ConvStar: return "ConvStar";
        case OpKind::UpsampleNN: return "UpsampleNN";
        case OpKind::ConvexCombine: return "ConvexCombine";
    }
    return "?";
}

// ---- factories --------------------------------------------------------------

template <class Real>
OpSpecT<Real> make_group_norm(int channels, int groups, Real eps) {
    if (channels < 1 || groups < 1 || channels % groups != 0)
        throw ConfigError("group norm: groups must divide channels");
    if (!(eps > Real(0))) throw ConfigError("group norm: epsilon must be > 0");
    OpSpecT<Real> op;
    op.kind = OpKind::GroupNorm;
    op.groups = groups;
    op.epsilon = eps;
    op.gamma = TensorT<Real>({channels});
    op.gamma.fill(Real(1));
    op.beta = TensorT<Real>({channels});
    return op;
}

template <class Real>
OpSpecT<Real> make_mean_group_norm(int channels, int groups) {
    OpSpecT<Real> op = make_group_norm<Real>(channels, groups, Real(1e-5));
    op.kind = OpKind::MeanGroupNorm;
    return op;
}

template <class Real>
OpSpecT<Real> make_relu() {
    OpSpecT<Real> op;
    op.kind = OpKind::Relu;
    op.slope = Real(1);
    return op;
}

template <class Real>
OpSpecT<Real> make_srelu(Real slope) {
    if (!(slope > Real(0) && slope <= Real(1))) throw ConfigError("SReLU slope must lie in (0,1]");
    OpSpecT<Real> op;
    op.kind = OpKind::SRelu;
    op.slope = slope;
    return op;
}

template <class Real>
OpSpecT<Real> make_dropout(Real rate) {
    if (!(rate >= Real(0) && rate < Real(1))) throw ConfigError("dropout rate must lie in [0,1)");
    OpSpecT<Real> op;
    op.kind = OpKind::Dropout;
    op.rate = rate;
    return op;
}

template <class Real>
OpSpecT<Real> make_conv(int out_c, ConvGeometry geom, int kh, int kw, bool constrained, Real target_norm) {
    if (out_c < 1 || geom.in_c < 1 || kh < 1 || kw < 1) throw ConfigError("conv: bad kernel extents");
    if (constrained && !(target_norm > Real(0))) throw ConfigError("conv: target norm must be > 0");
    OpSpecT<Real> op;
    op.kind = constrained ? OpKind::ConvStar : OpKind::Conv;
    op.weight = TensorT<Real>({out_c, geom.in_c, kh, kw});
    op.bias = TensorT<Real>({out_c});
    op.geom = geom;
    op.target_norm = target_norm;
    op.u_state = TensorT<Real>({1, geom.in_c, geom.in_h, geom.in_w});
    return op;
}

template <class Real>
OpSpecT<Real> make_upsample_nn(int s, int t) {
    if (s < 1 || t < 1) throw ConfigError("upsample: scale factors must be >= 1");
    OpSpecT<Real> op;
    op.kind = OpKind::UpsampleNN;
    op.up_s = s;
    op.up_t = t;
    return op;
}

template <class Real>
OpSpecT<Real> make_convex_combine(Real alpha, TensorT<Real> partner) {
    if (!(alpha > Real(0) && alpha < Real(1))) throw ConfigError("convex combine: alpha must lie in (0,1)");
    OpSpecT<Real> op;
    op.kind = OpKind::ConvexCombine;
    op.alpha = alpha;
    op.partner = std::move(partner);
    return op;
}

// ---- convolution kernels -----------------------------------------------------

namespace {

inline int floor_div(int a, int b) {
    int q = a / b;
    return (a % b != 0 && (a < 0) != (b < 0)) ? q - 1 : q;
}

inline int out_extent(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// Valid output range so that o*stride - pad + k stays inside [0, in).
inline void valid_range(int in, int out, int stride, int pad, int k, int& lo, int& hi) {
    const int off = pad - k;  // i = o*stride - off
    lo = 0;
    if (off > 0) lo = (off + stride - 1) / stride;
    hi = std::min(out - 1, floor_div(in - 1 + pad - k, stride));
}

}  // namespace

template <class Real>
TensorT<Real> conv2d_forward(const TensorT<Real>& x, const TensorT<Real>& W, const TensorT<Real>* bias,
                             int stride, int pad) {
    if (x.shape.size() != 4 || W.shape.size() != 4) throw StructuralError("conv: operands must be 4-d");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), Wi = x.dim(3);
    const int OC = W.dim(0), IC = W.dim(1), KH = W.dim(2), KW = W.dim(3);
    if (IC != C)
        throw StructuralError("conv: channel mismatch, input " + x.shape_str() + " kernel " + W.shape_str());
    const int OH = out_extent(H, KH, stride, pad);
    const int OW = out_extent(Wi, KW, stride, pad);
    if (OH < 1 || OW < 1) throw StructuralError("conv: input too small for kernel");
    TensorT<Real> y({N, OC, OH, OW});
    for (int n = 0; n < N; ++n) {
        for (int oc = 0; oc < OC; ++oc) {
            Real* yp = &y.data[y.idx4(n, oc, 0, 0)];
            if (bias) {
                const Real b = bias->data[static_cast<std::size_t>(oc)];
                for (int i = 0; i < OH * OW; ++i) yp[i] = b;
            }
            for (int ic = 0; ic < IC; ++ic) {
                const Real* xp = &x.data[x.idx4(n, ic, 0, 0)];
                for (int kh = 0; kh < KH; ++kh) {
                    int oh_lo, oh_hi;
                    valid_range(H, OH, stride, pad, kh, oh_lo, oh_hi);
                    for (int kw = 0; kw < KW; ++kw) {
                        const Real w = W.at4(oc, ic, kh, kw);
                        int ow_lo, ow_hi;
                        valid_range(Wi, OW, stride, pad, kw, ow_lo, ow_hi);
                        for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                            const int ih = oh * stride - pad + kh;
                            const Real* xrow = xp + static_cast<std::size_t>(ih) * Wi;
                            Real* yrow = yp + static_cast<std::size_t>(oh) * OW;
                            int iw = ow_lo * stride - pad + kw;
                            for (int ow = ow_lo; ow <= ow_hi; ++ow, iw += stride) yrow[ow] += w * xrow[iw];
                        }
                    }
                }
            }
        }
    }
    return y;
}

template <class Real>
TensorT<Real> conv2d_vjp_input(const TensorT<Real>& v, const TensorT<Real>& W, int stride, int pad,
                               int in_h, int in_w) {
    const int N = v.dim(0), OC = v.dim(1), OH = v.dim(2), OW = v.dim(3);
    const int KOC = W.dim(0), IC = W.dim(1), KH = W.dim(2), KW = W.dim(3);
    if (KOC != OC) throw StructuralError("conv vjp: cotangent channels do not match kernel");
    if (out_extent(in_h, KH, stride, pad) != OH || out_extent(in_w, KW, stride, pad) != OW)
        throw StructuralError("conv vjp: cotangent spatial extents do not match geometry");
    TensorT<Real> vx({N, IC, in_h, in_w});
    for (int n = 0; n < N; ++n) {
        for (int oc = 0; oc < OC; ++oc) {
            const Real* vp = &v.data[v.idx4(n, oc, 0, 0)];
            for (int ic = 0; ic < IC; ++ic) {
                Real* xp = &vx.data[vx.idx4(n, ic, 0, 0)];
                for (int kh = 0; kh < KH; ++kh) {
                    int oh_lo, oh_hi;
                    valid_range(in_h, OH, stride, pad, kh, oh_lo, oh_hi);
                    for (int kw = 0; kw < KW; ++kw) {
                        const Real w = W.at4(oc, ic, kh, kw);
                        int ow_lo, ow_hi;
                        valid_range(in_w, OW, stride, pad, kw, ow_lo, ow_hi);
                        for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                            const int ih = oh * stride - pad + kh;
                            Real* xrow = xp + static_cast<std::size_t>(ih) * in_w;
                            const Real* vrow = vp + static_cast<std::size_t>(oh) * OW;
                            int iw = ow_lo * stride - pad + kw;
                            for (int ow = ow_lo; ow <= ow_hi; ++ow, iw += stride) xrow[iw] += w * vrow[ow];
                        }
                    }
                }
            }
        }
    }
    return vx;
}

template <class Real>
void conv2d_vjp_params(const TensorT<Real>& x, const TensorT<Real>& v, int stride, int pad,
                       TensorT<Real>& grad_weight, TensorT<Real>* grad_bias) {
    const int N = x.dim(0), IC = x.dim(1), H = x.dim(2), Wi = x.dim(3);
    const int OC = v.dim(1), OH = v.dim(2), OW = v.dim(3);
    const int KH = grad_weight.dim(2), KW = grad_weight.dim(3);
    if (grad_weight.dim(0) != OC || grad_weight.dim(1) != IC)
        throw StructuralError("conv vjp: grad kernel shape mismatch");
    if (out_extent(H, KH, stride, pad) != OH || out_extent(Wi, KW, stride, pad) != OW)
        throw StructuralError("conv vjp: cotangent spatial extents do not match geometry");
    for (int n = 0; n < N; ++n) {
        for (int oc = 0; oc < OC; ++oc) {
            const Real* vp = &v.data[v.idx4(n, oc, 0, 0)];
            if (grad_bias) {
                Real s = Real(0);
                for (int i = 0; i < OH * OW; ++i) s += vp[i];
                grad_bias->data[static_cast<std::size_t>(oc)] += s;
            }
            for (int ic = 0; ic < IC; ++ic) {
                const Real* xp = &x.data[x.idx4(n, ic, 0, 0)];
                for (int kh = 0; kh < KH; ++kh) {
                    int oh_lo, oh_hi;
                    valid_range(H, OH, stride, pad, kh, oh_lo, oh_hi);
                    for (int kw = 0; kw < KW; ++kw) {
                        int ow_lo, ow_hi;
                        valid_range(Wi, OW, stride, pad, kw, ow_lo, ow_hi);
                        Real acc = Real(0);
                        for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                            const int ih = oh * stride - pad + kh;
                            const Real* xrow = xp + static_cast<std::size_t>(ih) * Wi;
                            const Real* vrow = vp + static_cast<std::size_t>(oh) * OW;
                            int iw = ow_lo * stride - pad + kw;
                            for (int ow = ow_lo; ow <= ow_hi; ++ow, iw += stride) acc += xrow[iw] * vrow[ow];
                        }
                        grad_weight.at4(oc, ic, kh, kw) += acc;
                    }
                }
            }
        }
    }
}

// ---- upsample ------------------------------------------------------------------

template <class Real>
TensorT<Real> upsample_nn_forward(const TensorT<Real>& x, int s, int t) {
    if (x.shape.size() != 4) throw StructuralError("upsample: input must be 4-d");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    TensorT<Real> y({N, C, H * s, W * t});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < H * s; ++oh) {
                const Real* xrow = &x.data[x.idx4(n, c, oh / s, 0)];
                Real* yrow = &y.data[y.idx4(n, c, oh, 0)];
                for (int ow = 0; ow < W * t; ++ow) yrow[ow] = xrow[ow / t];
            }
    return y;
}

template <class Real>
TensorT<Real> upsample_nn_vjp(const TensorT<Real>& v, int s, int t) {
    const int N = v.dim(0), C = v.dim(1), OH = v.dim(2), OW = v.dim(3);
    if (OH % s != 0 || OW % t != 0) throw StructuralError("upsample vjp: cotangent extents not divisible by scale");
    TensorT<Real> vx({N, C, OH / s, OW / t});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < OH; ++oh) {
                const Real* vrow = &v.data[v.idx4(n, c, oh, 0)];
                Real* xrow = &vx.data[vx.idx4(n, c, oh / s, 0)];
                for (int ow = 0; ow < OW; ++ow) xrow[ow / t] += vrow[ow];
            }
    return vx;
}

// ---- normalization -------------------------------------------------------------

namespace {

template <class Real>
void check_norm_input(const OpSpecT<Real>& op, const TensorT<Real>& z) {
    if (z.shape.size() != 4) throw StructuralError("norm: input must be 4-d");
    const int C = z.dim(1);
    if (C != op.gamma.dim(0))
        throw StructuralError("norm: channel count " + std::to_string(C) + " does not match affine params");
    if (C % op.groups != 0) throw StructuralError("norm: groups must divide channels");
}

}  // namespace

template <class Real>
static TensorT<Real> norm_forward(const OpSpecT<Real>& op, const TensorT<Real>& z, bool mean_only) {
    check_norm_input(op, z);
    const int N = z.dim(0), C = z.dim(1), H = z.dim(2), W = z.dim(3);
    const int gc = C / op.groups;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const double d = static_cast<double>(gc) * plane;
    TensorT<Real> y(z.shape);
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < op.groups; ++g) {
            double mu = 0.0;
            for (int c = g * gc; c < (g + 1) * gc; ++c) {
                const Real* zp = &z.data[z.idx4(n, c, 0, 0)];
                for (std::size_t i = 0; i < plane; ++i) mu += static_cast<double>(zp[i]);
            }
            mu /= d;
            double inv_s = 1.0;
            if (!mean_only) {
                double var = 0.0;
                for (int c = g * gc; c < (g + 1) * gc; ++c) {
                    const Real* zp = &z.data[z.idx4(n, c, 0, 0)];
                    for (std::size_t i = 0; i < plane; ++i) {
                        const double dlt = static_cast<double>(zp[i]) - mu;
                        var += dlt * dlt;
                    }
                }
                var /= d;
                inv_s = 1.0 / std::sqrt(var + static_cast<double>(op.epsilon));
            }
            for (int c = g * gc; c < (g + 1) * gc; ++c) {
                const Real gam = op.gamma.data[static_cast<std::size_t>(c)];
                const Real bet = op.beta.data[static_cast<std::size_t>(c)];
                const Real* zp = &z.data[z.idx4(n, c, 0, 0)];
                Real* yp = &y.data[y.idx4(n, c, 0, 0)];
                for (std::size_t i = 0; i < plane; ++i)
                    yp[i] = gam * static_cast<Real>((static_cast<double>(zp[i]) - mu) * inv_s) + bet;
            }
        }
    }
    return y;
}

template <class Real>
static TensorT<Real> norm_vjp(const OpSpecT<Real>& op, const TensorT<Real>& z, const TensorT<Real>& v,
                              bool mean_only, OpGradsT<Real>* grads) {
    check_norm_input(op, z);
    if (!z.same_shape(v)) throw StructuralError("norm vjp: cotangent shape mismatch");
    const int N = z.dim(0), C = z.dim(1), H = z.dim(2), W = z.dim(3);
    const int gc = C / op.groups;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const double d = static_cast<double>(gc) * plane;
    TensorT<Real> out(z.shape);
    if (grads) {
        if (grads->gamma.size() == 0) grads->gamma = TensorT<Real>({C});
        if (grads->beta.size() == 0) grads->beta = TensorT<Real>({C});
    }
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < op.groups; ++g) {
            double mu = 0.0;
            for (int c = g * gc; c < (g + 1) * gc; ++c) {
                const Real* zp = &z.data[z.idx4(n, c, 0, 0)];
                for (std::size_t i = 0; i < plane; ++i) mu += static_cast<double>(zp[i]);
            }
            mu /= d;
            double inv_s = 1.0;
            if (!mean_only) {
                double var = 0.0;
                for (int c = g * gc; c < (g + 1) * gc; ++c) {
                    const Real* zp = &z.data[z.idx4(n, c, 0, 0)];
                    for (std::size_t i = 0; i < plane; ++i) {
                        const double dlt = static_cast<double>(zp[i]) - mu;
                        var += dlt * dlt;
                    }
                }
                var /= d;
                inv_s = 1.0 / std::sqrt(var + static_cast<double>(op.epsilon));
            }
            // S_w = sum gamma.*v over the group; S_wz = sum gamma.*v.*zhat
            double s_w = 0.0, s_wz = 0.0;
            for (int c = g * gc; c < (g + 1) * gc; ++c) {
                const double gam = static_cast<double>(op.gamma.data[static_cast<std::size_t>(c)]);
                const Real* zp = &z.data[z.idx4(n, c, 0, 0)];
                const Real* vp = &v.data[v.idx4(n, c, 0, 0)];
                for (std::size_t i = 0; i < plane; ++i) {
                    const double w = gam * static_cast<double>(vp[i]);
                    s_w += w;
                    if (!mean_only) s_wz += w * (static_cast<double>(zp[i]) - mu) * inv_s;
                }
            }
            for (int c = g * gc; c < (g + 1) * gc; ++c) {
                const double gam = static_cast<double>(op.gamma.data[static_cast<std::size_t>(c)]);
                const Real* zp = &z.data[z.idx4(n, c, 0, 0)];
                const Real* vp = &v.data[v.idx4(n, c, 0, 0)];
                Real* op_ = &out.data[out.idx4(n, c, 0, 0)];
                double gsum = 0.0, bsum = 0.0;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double zh = (static_cast<double>(zp[i]) - mu) * inv_s;
                    const double w = gam * static_cast<double>(vp[i]);
                    double r = w - s_w / d;
                    if (!mean_only) r -= zh * s_wz / d;
                    op_[i] = static_cast<Real>(r * inv_s);
                    gsum += static_cast<double>(vp[i]) * zh;
                    bsum += static_cast<double>(vp[i]);
                }
                if (grads) {
                    grads->gamma.data[static_cast<std::size_t>(c)] += static_cast<Real>(gsum);
                    grads->beta.data[static_cast<std::size_t>(c)] += static_cast<Real>(bsum);
                }
            }
        }
    }
    return out;
}

// ---- dispatch ------------------------------------------------------------------

template <class Real>
TensorT<Real> op_apply(const OpSpecT<Real>& op, const TensorT<Real>& z, Mode mode) {
    switch (op.kind) {
        case OpKind::GroupNorm:
            return norm_forward(op, z, false);
        case OpKind::MeanGroupNorm:
            return norm_forward(op, z, true);
        case OpKind::Relu:
        case OpKind::SRelu: {
            const Real a = op.kind == OpKind::Relu ? Real(1) : op.slope;
            TensorT<Real> y(z.shape);
            for (std::size_t i = 0; i < z.size(); ++i) y.data[i] = std::max(Real(0), a * z.data[i]);
            return y;
        }
        case OpKind::Dropout: {
            if (mode == Mode::Eval || op.rate == Real(0)) return z;
            if (!op.mask) throw StructuralError("dropout: no frozen mask for this solve");
            if (!op.mask->same_shape(z)) throw StructuralError("dropout: mask shape mismatch");
            const Real scale = Real(1) / (Real(1) - op.rate);
            TensorT<Real> y(z.shape);
            for (std::size_t i = 0; i < z.size(); ++i) y.data[i] = scale * op.mask->data[i] * z.data[i];
            return y;
        }
        case OpKind::Conv:
        case OpKind::ConvStar:
            return conv2d_forward(z, op.weight, &op.bias, op.geom.stride, op.geom.pad);
        case OpKind::UpsampleNN:
            return upsample_nn_forward(z, op.up_s, op.up_t);
        case OpKind::ConvexCombine: {
            if (!op.partner.same_shape(z)) throw StructuralError("convex combine: partner shape mismatch");
            TensorT<Real> y(z.shape);
            for (std::size_t i = 0; i < z.size(); ++i)
                y.data[i] = (Real(1) - op.alpha) * z.data[i] + op.alpha * op.partner.data[i];
            return y;
        }
    }
    throw StructuralError("op_apply: unknown op kind");
}

template <class Real>
TensorT<Real> op_vjp(const OpSpecT<Real>& op, const TensorT<Real>& z, const TensorT<Real>& v, Mode mode,
                     OpGradsT<Real>* grads) {
    switch (op.kind) {
        case OpKind::GroupNorm:
            return norm_vjp(op, z, v, false, grads);
        case OpKind::MeanGroupNorm:
            return norm_vjp(op, z, v, true, grads);
        case OpKind::Relu:
        case OpKind::SRelu: {
            if (!z.same_shape(v)) throw StructuralError("relu vjp: cotangent shape mismatch");
            const Real a = op.kind == OpKind::Relu ? Real(1) : op.slope;
            TensorT<Real> out(z.shape);
            // subgradient at 0 taken as 0
            for (std::size_t i = 0; i < z.size(); ++i) out.data[i] = z.data[i] > Real(0) ? a * v.data[i] : Real(0);
            return out;
        }
        case OpKind::Dropout: {
            if (!z.same_shape(v)) throw StructuralError("dropout vjp: cotangent shape mismatch");
            if (mode == Mode::Eval || op.rate == Real(0)) return v;
            if (!op.mask) throw StructuralError("dropout: no frozen mask for this solve");
            if (!op.mask->same_shape(z)) throw StructuralError("dropout: mask shape mismatch");
            const Real scale = Real(1) / (Real(1) - op.rate);
            TensorT<Real> out(z.shape);
            for (std::size_t i = 0; i < z.size(); ++i) out.data[i] = scale * op.mask->data[i] * v.data[i];
            return out;
        }
        case OpKind::Conv:
        case OpKind::ConvStar: {
            if (grads) {
                if (grads->weight.size() == 0) grads->weight = zeros_like(op.weight);
                if (grads->bias.size() == 0) grads->bias = zeros_like(op.bias);
                conv2d_vjp_params(z, v, op.geom.stride, op.geom.pad, grads->weight, &grads->bias);
            }
            return conv2d_vjp_input(v, op.weight, op.geom.stride, op.geom.pad, z.dim(2), z.dim(3));
        }
        case OpKind::UpsampleNN:
            return upsample_nn_vjp(v, op.up_s, op.up_t);
        case OpKind::ConvexCombine: {
            if (!z.same_shape(v)) throw StructuralError("convex combine vjp: cotangent shape mismatch");
            if (grads) {
                if (grads->partner.size() == 0) grads->partner = zeros_like(op.partner);
                for (std::size_t i = 0; i < v.size(); ++i) grads->partner.data[i] += op.alpha * v.data[i];
            }
            TensorT<Real> out(z.shape);
            for (std::size_t i = 0; i < v.size(); ++i) out.data[i] = (Real(1) - op.alpha) * v.data[i];
            return out;
        }
    }
    throw StructuralError("op_vjp: unknown op kind");
}

template <class Real>
double op_lipschitz_bound(const OpSpecT<Real>& op) {
    switch (op.kind) {
        case OpKind::GroupNorm: {
            double g = 0.0;
            for (Real x : op.gamma.data) g = std::max(g, std::abs(static_cast<double>(x)));
            return g / std::sqrt(static_cast<double>(op.epsilon));
        }
        case OpKind::MeanGroupNorm: {
            double g = 0.0;
            for (Real x : op.gamma.data) g = std::max(g, std::abs(static_cast<double>(x)));
            return g;
        }
        case OpKind::Relu:
            return 1.0;
        case OpKind::SRelu:
            return static_cast<double>(op.slope);
        case OpKind::Dropout:
            return 1.0 / (1.0 - static_cast<double>(op.rate));
        case OpKind::Conv:
            return static_cast<double>(op.sigma);
        case OpKind::ConvStar:
            return static_cast<double>(op.target_norm);
        case OpKind::UpsampleNN:
            return std::sqrt(static_cast<double>(op.up_s) * static_cast<double>(op.up_t));
        case OpKind::ConvexCombine:
            return 1.0 - static_cast<double>(op.alpha);
    }
    throw StructuralError("op_lipschitz_bound: unknown op kind");
}

// ---- spectral control ------------------------------------------------------------

template <class Real>
Real conv_spectral_norm(const TensorT<Real>& weight, const ConvGeometry& geom, int iters, TensorT<Real>& u_state) {
    if (iters < 1) throw ConfigError("spectral norm: iters must be >= 1");
    const std::vector<int> want{1, geom.in_c, geom.in_h, geom.in_w};
    if (u_state.shape != want) throw StructuralError("spectral norm: u_state shape does not match geometry");
    double wnorm = norm2(weight);
    if (wnorm == 0.0) return Real(0);

    double un = norm2(u_state);
    if (un == 0.0) {
        u_state.fill(Real(1));
        un = norm2(u_state);
    }
    scale_inplace(u_state, static_cast<Real>(1.0 / un));

    bool reseeded = false;
    for (int it = 0; it < iters; ++it) {
        TensorT<Real> v = conv2d_forward<Real>(u_state, weight, nullptr, geom.stride, geom.pad);
        TensorT<Real> u2 = conv2d_vjp_input(v, weight, geom.stride, geom.pad, geom.in_h, geom.in_w);
        const double n2 = norm2(u2);
        if (n2 == 0.0) {
            // u landed in the null space; one deterministic reseed, else the
            // operator really annihilates everything we can reach.
            if (reseeded) return Real(0);
            reseeded = true;
            u_state.fill(Real(1));
            scale_inplace(u_state, static_cast<Real>(1.0 / norm2(u_state)));
            continue;
        }
        u_state = std::move(u2);
        scale_inplace(u_state, static_cast<Real>(1.0 / n2));
    }
    TensorT<Real> v = conv2d_forward<Real>(u_state, weight, nullptr, geom.stride, geom.pad);
    return static_cast<Real>(norm2(v));
}

template <class Real>
Real conv_project(TensorT<Real>& weight, Real c, const ConvGeometry& geom, int iters, TensorT<Real>& u_state) {
    if (!(c > Real(0))) throw ConfigError("project: target norm must be > 0");
    const Real sigma = conv_spectral_norm(weight, geom, iters, u_state);
    if (sigma > c) scale_inplace(weight, c / sigma);
    return sigma;
}

template <class Real>
void op_refresh_spectral(OpSpecT<Real>& op, int iters) {
    if (op.kind != OpKind::Conv && op.kind != OpKind::ConvStar)
        throw StructuralError("spectral refresh applies to convolutions only");
    op.sigma = conv_spectral_norm(op.weight, op.geom, iters, op.u_state);
}

template <class Real>
void op_project(OpSpecT<Real>& op, int iters) {
    if (op.kind != OpKind::ConvStar) throw StructuralError("projection applies to ConvStar only");
    const Real sigma = conv_project(op.weight, op.target_norm, op.geom, iters, op.u_state);
    op.sigma = std::min(sigma, op.target_norm);
}

template <class Real>
void clamp_affine(TensorT<Real>& gamma, Real bound) {
    if (!(bound > Real(0))) throw ConfigError("clamp_affine: bound must be > 0");
    for (Real& g : gamma.data) g = std::clamp(g, -bound, bound);
}

// ---- fusion weights ---------------------------------------------------------------

FusionRow fusion_weights(int n, int i) {
    if (n < 1) throw ConfigError("fusion weights: n must be >= 1");
    if (i < 1 || i > n) throw ConfigError("fusion weights: branch index out of range");
    FusionRow row;
    row.i = i;
    if (n == 1) return row;  // no fusion partners
    double denom = 0.0;
    for (int j = 1; j <= n; ++j) {
        if (j == i) continue;
        const int p = j > i ? j - i : 0;
        row.partners.push_back(j);
        row.penalties.push_back(p);
        denom += std::exp(-static_cast<double>(p));
    }
    row.weights.reserve(row.partners.size());
    for (int p : row.penalties) row.weights.push_back(std::exp(-static_cast<double>(p)) / denom);
    return row;
}

// ---- explicit instantiations --------------------------------------------------------

#define LDEQ_INSTANTIATE_OPS(Real)                                                                              \
    template OpSpecT<Real> make_group_norm<Real>(int, int, Real);                                               \
    template OpSpecT<Real> make_mean_group_norm<Real>(int, int);                                                \
    template OpSpecT<Real> make_relu<Real>();                                                                   \
    template OpSpecT<Real> make_srelu<Real>(Real);                                                              \
    template OpSpecT<Real> make_dropout<Real>(Real);                                                            \
    template OpSpecT<Real> make_conv<Real>(int, ConvGeometry, int, int, bool, Real);                            \
    template OpSpecT<Real> make_upsample_nn<Real>(int, int);                                                    \
    template OpSpecT<Real> make_convex_combine<Real>(Real, TensorT<Real>);                                      \
    template TensorT<Real> op_apply<Real>(const OpSpecT<Real>&, const TensorT<Real>&, Mode);                    \
    template TensorT<Real> op_vjp<Real>(const OpSpecT<Real>&, const TensorT<Real>&, const TensorT<Real>&,      \
                                        Mode, OpGradsT<Real>*);                                                 \
    template double op_lipschitz_bound<Real>(const OpSpecT<Real>&);                                             \
    template Real conv_spectral_norm<Real>(const TensorT<Real>&, const ConvGeometry&, int, TensorT<Real>&);     \
    template Real conv_project<Real>(TensorT<Real>&, Real, const ConvGeometry&, int, TensorT<Real>&);           \
    template void op_refresh_spectral<Real>(OpSpecT<Real>&, int);                                               \
    template void op_project<Real>(OpSpecT<Real>&, int);                                                        \
    template void clamp_affine<Real>(TensorT<Real>&, Real);                                                     \
    template TensorT<Real> conv2d_forward<Real>(const TensorT<Real>&, const TensorT<Real>&,                     \
                                                const TensorT<Real>*, int, int);                                \
    template TensorT<Real> conv2d_vjp_input<Real>(const TensorT<Real>&, const TensorT<Real>&, int, int, int,    \
                                                  int);                                                         \
    template void conv2d_vjp_params<Real>(const TensorT<Real>&, const TensorT<Real>&, int, int,                 \
                                          TensorT<Real>&, TensorT<Real>*);                                      \
    template TensorT<Real> upsample_nn_forward<Real>(const TensorT<Real>&, int, int);                           \
    template TensorT<Real> upsample_nn_vjp<Real>(const TensorT<Real>&, int, int);

LDEQ_INSTANTIATE_OPS(float)
LDEQ_INSTANTIATE_OPS(double)

}  // namespace ldeq
