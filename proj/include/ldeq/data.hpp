// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ldeq/tensor.hpp"

namespace ldeq {

/// Labeled image set in [0,1], stored at double precision.
struct Dataset {
    TensorT<double> images;  // (N, C, H, W)
    std::vector<int> labels;
    int classes = 0;

    int count() const { return images.dim(0); }
};

struct SyntheticSpec {
    int classes = 3;
    int count = 500;
    int channels = 1;
    int height = 16;
    int width = 16;
    double noise = 0.05;
    std::uint64_t seed = 1;
};

/// Class-conditioned blobs at two spatial scales plus pixel noise, clamped
/// to [0,1]. Deterministic in the seed; samples cycle through the classes.
Dataset make_synthetic(const SyntheticSpec& spec);

/// Noiseless class means of the synthetic generator (for separability checks).
std::vector<TensorT<double>> synthetic_class_means(const SyntheticSpec& spec);

/// IDX-format image/label pair (big-endian headers, ubyte payloads).
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

template <class Real>
struct BatchT {
    TensorT<Real> x;
    std::vector<int> labels;
};

/// Deterministic shuffle by (seed, epoch), then fixed-size batches
/// (the last one may be smaller).
template <class Real>
std::vector<BatchT<Real>> make_batches(const Dataset& data, int batch_size, std::uint64_t seed, int epoch,
                                       bool shuffle = true);

}  // namespace ldeq
