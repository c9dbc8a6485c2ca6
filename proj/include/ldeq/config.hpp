// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "ldeq/equilibrium.hpp"
#include "ldeq/model.hpp"
#include "ldeq/solver.hpp"

namespace ldeq {

/// Everything one run needs: model, solvers, optimizer and data settings.
struct RunConfig {
    ModelConfig model;
    SolverConfig solver_fwd;
    SolverConfig solver_bwd;
    BackwardKind backward = BackwardKind::Implicit;

    double lr = 1e-3;
    int epochs = 1;
    int batch_size = 32;
    enum class Precision { F32, F64 };
    Precision precision = Precision::F32;
    std::string out_dir = "out";

    std::string dataset = "synthetic";  // synthetic | idx
    int data_count = 500;
    double data_noise = 0.05;
    std::string idx_images;
    std::string idx_labels;

    void validate() const;
};

/// Returns the compiled-in defaults (tol 1e-3,
/// 18 forward / 20 backward iterations, Anderson everywhere).
RunConfig default_run_config();

/// INI-style sections [model] [solver] [train] [data], `key = value` lines,
/// `#` comments. Unknown keys are rejected naming the key and line.
/// The LDEQ_SEED environment variable, when set, overrides the seed.
RunConfig parse_config(const std::string& text);

RunConfig load_config_file(const std::string& path);

/// Applies one `key=value` (or `section.key=value`) override.
void apply_override(RunConfig& cfg, const std::string& assignment);

/// The [model] echo used by checkpoints, as `model.key = value` lines.
std::string model_config_echo(const ModelConfig& cfg);

/// Rebuilds a ModelConfig from echo lines (inverse of model_config_echo).
ModelConfig parse_model_echo(const std::string& text);

}  // namespace ldeq
