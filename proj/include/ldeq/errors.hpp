// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ldeq {

/// Shape or contract violation between tensors/states.
struct StructuralError : std::runtime_error {
    explicit StructuralError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid configuration value (domain violation, bad key, bad file).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Fixed-point iteration produced non-finite values.
struct DivergenceError : std::runtime_error {
    DivergenceError(const std::string& msg, int iter)
        : std::runtime_error(msg + " (iteration " + std::to_string(iter) + ")"), iteration(iter) {}
    int iteration;
};

/// File I/O and serialization failures.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ldeq
