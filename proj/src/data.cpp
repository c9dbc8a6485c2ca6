// SPDX-License-Identifier: Apache-2.0

#include "ldeq/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "ldeq/errors.hpp"
#include "ldeq/rng.hpp"

namespace ldeq {

namespace {

// Two Gaussian bumps per class: a coarse one on an outer ring and a finer one
// on an inner ring, both placed by the class angle.
void paint_class_mean(TensorT<double>& img, int sample, int k, int classes, int H, int W, int C) {
    const double angle = 6.283185307179586 * k / std::max(1, classes);
    const double r1 = 0.25 * std::min(H, W);
    const double w1 = std::min(H, W) / 6.0;
    const double cy1 = 0.5 * H + r1 * std::sin(angle);
    const double cx1 = 0.5 * W + r1 * std::cos(angle);
    const double r2 = 0.125 * std::min(H, W);
    const double w2 = w1 * 0.5;
    const double cy2 = 0.5 * H - r2 * std::sin(angle);
    const double cx2 = 0.5 * W - r2 * std::cos(angle);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double d1 = ((y - cy1) * (y - cy1) + (x - cx1) * (x - cx1)) / (2.0 * w1 * w1);
                const double d2 = ((y - cy2) * (y - cy2) + (x - cx2) * (x - cx2)) / (2.0 * w2 * w2);
                img.at4(sample, c, y, x) += 0.8 * std::exp(-d1) + 0.5 * std::exp(-d2);
            }
}

}  // namespace

Dataset make_synthetic(const SyntheticSpec& spec) {
    if (spec.classes < 1 || spec.count < 1) throw ConfigError("synthetic: classes and count must be >= 1");
    Dataset d;
    d.classes = spec.classes;
    d.images = TensorT<double>({spec.count, spec.channels, spec.height, spec.width});
    d.labels.resize(static_cast<std::size_t>(spec.count));
    Rng rng(spec.seed);
    for (int i = 0; i < spec.count; ++i) {
        const int k = i % spec.classes;
        d.labels[static_cast<std::size_t>(i)] = k;
        paint_class_mean(d.images, i, k, spec.classes, spec.height, spec.width, spec.channels);
        for (int c = 0; c < spec.channels; ++c)
            for (int y = 0; y < spec.height; ++y)
                for (int x = 0; x < spec.width; ++x) {
                    double v = d.images.at4(i, c, y, x) + spec.noise * rng.normal();
                    d.images.at4(i, c, y, x) = std::clamp(v, 0.0, 1.0);
                }
    }
    return d;
}

std::vector<TensorT<double>> synthetic_class_means(const SyntheticSpec& spec) {
    std::vector<TensorT<double>> means;
    for (int k = 0; k < spec.classes; ++k) {
        TensorT<double> img({1, spec.channels, spec.height, spec.width});
        paint_class_mean(img, 0, k, spec.classes, spec.height, spec.width, spec.channels);
        for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
        means.push_back(std::move(img));
    }
    return means;
}

namespace {

std::uint32_t read_u32_be(std::ifstream& f, const std::string& path, std::size_t& offset) {
    unsigned char b[4];
    f.read(reinterpret_cast<char*>(b), 4);
    if (!f) throw IoError("IDX file truncated at offset " + std::to_string(offset) + ": " + path);
    offset += 4;
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream fi(images_path, std::ios::binary);
    if (!fi) throw IoError("cannot open IDX images: " + images_path);
    std::size_t off = 0;
    const std::uint32_t magic_i = read_u32_be(fi, images_path, off);
    if (magic_i != 0x00000803u)
        throw IoError("bad IDX image magic " + hex32(magic_i) + " at offset 0: " + images_path);
    const int n = static_cast<int>(read_u32_be(fi, images_path, off));
    const int h = static_cast<int>(read_u32_be(fi, images_path, off));
    const int w = static_cast<int>(read_u32_be(fi, images_path, off));
    if (n < 1 || h < 1 || w < 1) throw IoError("bad IDX image extents: " + images_path);
    std::vector<unsigned char> buf(static_cast<std::size_t>(n) * h * w);
    fi.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!fi) throw IoError("IDX image payload truncated at offset " + std::to_string(off) + ": " + images_path);

    std::ifstream fl(labels_path, std::ios::binary);
    if (!fl) throw IoError("cannot open IDX labels: " + labels_path);
    std::size_t loff = 0;
    const std::uint32_t magic_l = read_u32_be(fl, labels_path, loff);
    if (magic_l != 0x00000801u)
        throw IoError("bad IDX label magic " + hex32(magic_l) + " at offset 0: " + labels_path);
    const int nl = static_cast<int>(read_u32_be(fl, labels_path, loff));
    if (nl != n)
        throw IoError("IDX image count " + std::to_string(n) + " does not match label count " +
                      std::to_string(nl));
    std::vector<unsigned char> lab(static_cast<std::size_t>(nl));
    fl.read(reinterpret_cast<char*>(lab.data()), static_cast<std::streamsize>(lab.size()));
    if (!fl) throw IoError("IDX label payload truncated at offset " + std::to_string(loff) + ": " + labels_path);

    Dataset d;
    d.images = TensorT<double>({n, 1, h, w});
    for (std::size_t i = 0; i < buf.size(); ++i) d.images.data[i] = buf[i] / 255.0;
    d.labels.resize(static_cast<std::size_t>(n));
    int max_label = 0;
    for (int i = 0; i < n; ++i) {
        d.labels[static_cast<std::size_t>(i)] = lab[static_cast<std::size_t>(i)];
        max_label = std::max(max_label, static_cast<int>(lab[static_cast<std::size_t>(i)]));
    }
    d.classes = max_label + 1;
    return d;
}

template <class Real>
std::vector<BatchT<Real>> make_batches(const Dataset& data, int batch_size, std::uint64_t seed, int epoch,
                                       bool shuffle) {
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    const int n = data.count();
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    if (shuffle) {
        Rng rng = Rng(seed).fork(0x6261746368ULL + static_cast<std::uint64_t>(epoch));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<std::size_t>(i)],
                      order[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
    }
    const int C = data.images.dim(1), H = data.images.dim(2), W = data.images.dim(3);
    const std::size_t per = static_cast<std::size_t>(C) * H * W;
    std::vector<BatchT<Real>> out;
    for (int start = 0; start < n; start += batch_size) {
        const int bs = std::min(batch_size, n - start);
        BatchT<Real> b;
        b.x = TensorT<Real>({bs, C, H, W});
        b.labels.resize(static_cast<std::size_t>(bs));
        for (int s = 0; s < bs; ++s) {
            const int src = order[static_cast<std::size_t>(start + s)];
            b.labels[static_cast<std::size_t>(s)] = data.labels[static_cast<std::size_t>(src)];
            const double* sp = data.images.data.data() + static_cast<std::size_t>(src) * per;
            Real* dp = b.x.data.data() + static_cast<std::size_t>(s) * per;
            for (std::size_t k = 0; k < per; ++k) dp[k] = static_cast<Real>(sp[k]);
        }
        out.push_back(std::move(b));
    }
    return out;
}

template std::vector<BatchT<float>> make_batches<float>(const Dataset&, int, std::uint64_t, int, bool);
template std::vector<BatchT<double>> make_batches<double>(const Dataset&, int, std::uint64_t, int, bool);

}  // namespace ldeq
