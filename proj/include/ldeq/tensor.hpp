// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ldeq/errors.hpp"

namespace ldeq {

/// Dense row-major tensor. Feature maps are (batch, channels, height, width);
/// conv kernels are (out_channels, in_channels, kh, kw).
template <class Real>
struct TensorT {
    std::vector<int> shape;
    std::vector<Real> data;

    TensorT() = default;

    explicit TensorT(std::vector<int> s) : shape(std::move(s)) {
        data.assign(check_shape(shape), Real(0));
    }

    TensorT(std::vector<int> s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != check_shape(shape))
            throw StructuralError("tensor data length does not match shape product");
    }

    static std::size_t check_shape(const std::vector<int>& s) {
        if (s.empty()) throw StructuralError("tensor shape must have at least one extent");
        std::size_t n = 1;
        for (int e : s) {
            if (e < 1) throw StructuralError("tensor extents must be >= 1");
            n *= static_cast<std::size_t>(e);
        }
        return n;
    }

    std::size_t size() const { return data.size(); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    // 4-d accessors (N, C, H, W)
    std::size_t idx4(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w;
    }
    Real& at4(int n, int c, int h, int w) { return data[idx4(n, c, h, w)]; }
    Real at4(int n, int c, int h, int w) const { return data[idx4(n, c, h, w)]; }

    void fill(Real v) { std::fill(data.begin(), data.end(), v); }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << ")";
        return os.str();
    }
};

template <class Real>
TensorT<Real> zeros_like(const TensorT<Real>& t) {
    return TensorT<Real>(t.shape);
}

template <class Real>
bool all_finite(const TensorT<Real>& t) {
    for (Real v : t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

template <class Real>
double dot(const TensorT<Real>& a, const TensorT<Real>& b) {
    if (!a.same_shape(b)) throw StructuralError("dot: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.data[i]) * static_cast<double>(b.data[i]);
    return s;
}

template <class Real>
double norm2(const TensorT<Real>& t) {
    double s = 0.0;
    for (Real v : t.data) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

template <class Real>
void scale_inplace(TensorT<Real>& t, Real a) {
    for (Real& v : t.data) v *= a;
}

/// y <- alpha*x + beta*y (elementwise).
template <class Real>
void axpby_inplace(Real alpha, const TensorT<Real>& x, Real beta, TensorT<Real>& y) {
    if (!x.same_shape(y)) throw StructuralError("axpby: shape mismatch " + x.shape_str() + " vs " + y.shape_str());
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = alpha * x.data[i] + beta * y.data[i];
}

template <class Real>
void add_inplace(TensorT<Real>& y, const TensorT<Real>& x) {
    axpby_inplace(Real(1), x, Real(1), y);
}

/// Point of the multiscale product space: one feature map per resolution branch.
template <class Real>
struct StateT {
    std::vector<TensorT<Real>> branches;

    StateT() = default;
    explicit StateT(std::vector<TensorT<Real>> b) : branches(std::move(b)) {}

    std::size_t n_branches() const { return branches.size(); }

    int batch() const {
        if (branches.empty()) throw StructuralError("state has no branches");
        return branches.front().dim(0);
    }

    bool same_shape(const StateT& o) const {
        if (branches.size() != o.branches.size()) return false;
        for (std::size_t i = 0; i < branches.size(); ++i)
            if (!branches[i].same_shape(o.branches[i])) return false;
        return true;
    }
};

template <class Real>
StateT<Real> zeros_like(const StateT<Real>& s) {
    StateT<Real> out;
    out.branches.reserve(s.branches.size());
    for (const auto& b : s.branches) out.branches.push_back(zeros_like(b));
    return out;
}

template <class Real>
bool all_finite(const StateT<Real>& s) {
    for (const auto& b : s.branches)
        if (!all_finite(b)) return false;
    return true;
}

/// Concatenated L2 norm over every branch (the product-space norm).
template <class Real>
double state_norm(const StateT<Real>& z) {
    if (z.branches.empty()) throw StructuralError("state_norm: state has no branches");
    double s = 0.0;
    for (const auto& b : z.branches)
        for (Real v : b.data) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

/// Per-sample concatenated L2 norms; all branches must share the batch extent.
template <class Real>
std::vector<double> state_norm_per_sample(const StateT<Real>& z) {
    if (z.branches.empty()) throw StructuralError("state_norm_per_sample: state has no branches");
    const int n = z.batch();
    std::vector<double> acc(static_cast<std::size_t>(n), 0.0);
    for (const auto& b : z.branches) {
        if (b.dim(0) != n) throw StructuralError("state branches disagree on batch extent");
        const std::size_t per = b.size() / static_cast<std::size_t>(n);
        for (int s = 0; s < n; ++s) {
            const Real* p = b.data.data() + static_cast<std::size_t>(s) * per;
            double t = 0.0;
            for (std::size_t i = 0; i < per; ++i) t += static_cast<double>(p[i]) * static_cast<double>(p[i]);
            acc[static_cast<std::size_t>(s)] += t;
        }
    }
    for (double& v : acc) v = std::sqrt(v);
    return acc;
}

template <class Real>
double state_dot(const StateT<Real>& a, const StateT<Real>& b) {
    if (!a.same_shape(b)) throw StructuralError("state_dot: branch shapes differ");
    double s = 0.0;
    for (std::size_t i = 0; i < a.branches.size(); ++i) s += dot(a.branches[i], b.branches[i]);
    return s;
}

/// Branchwise alpha*x + beta*y.
template <class Real>
StateT<Real> axpy_state(Real alpha, const StateT<Real>& x, Real beta, const StateT<Real>& y) {
    if (!x.same_shape(y)) throw StructuralError("axpy_state: branch shapes differ");
    StateT<Real> out = y;
    for (std::size_t i = 0; i < out.branches.size(); ++i)
        axpby_inplace(alpha, x.branches[i], beta, out.branches[i]);
    return out;
}

template <class Real>
void state_axpby_inplace(Real alpha, const StateT<Real>& x, Real beta, StateT<Real>& y) {
    if (!x.same_shape(y)) throw StructuralError("state_axpby: branch shapes differ");
    for (std::size_t i = 0; i < y.branches.size(); ++i)
        axpby_inplace(alpha, x.branches[i], beta, y.branches[i]);
}

template <class Real>
void state_scale_inplace(StateT<Real>& s, Real a) {
    for (auto& b : s.branches) scale_inplace(b, a);
}

template <class Real>
StateT<Real> state_sub(const StateT<Real>& a, const StateT<Real>& b) {
    return axpy_state(Real(-1), b, Real(1), a);
}

}  // namespace ldeq
