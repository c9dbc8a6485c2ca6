// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "ldeq/model.hpp"

namespace ldeq {

/// Writes `manifest.txt` (format version LDEQ1, model-config echo, tensor
/// names/shapes/byte offsets) and `weights.bin` (little-endian float32,
/// row-major, manifest order, power-iteration vectors included).
template <class Real>
void checkpoint_save(ModelT<Real>& m, const std::string& dir);

/// Rebuilds the model from the manifest's config echo and loads every tensor.
/// Version, shape and length violations are reported naming the tensor.
template <class Real>
ModelT<Real> checkpoint_load(const std::string& dir);

/// Loads into an existing model; shapes must match the manifest.
template <class Real>
void checkpoint_load_into(ModelT<Real>& m, const std::string& dir);

}  // namespace ldeq
