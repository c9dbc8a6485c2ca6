// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ldeq {

/// Hyperparameters from which the closed-form network Lipschitz bound follows.
struct LipschitzConfig {
    double alpha1 = 0.5;      // residual-block convex mix, in (0,1)
    double alpha2 = 0.3;      // fusion convex mix, in (0,1)
    double conv_norm = 2.0;   // c, target spectral norm of every constrained conv
    double gamma_bar = 1.0;   // ceiling on |gamma| in MGN
    double srelu_slope = 0.4; // a, in (0,1]
    double drop_rate = 0.3;   // p, in [0,1)
    int branches = 4;         // n
    bool upsample_includes_conv = true;

    void validate() const;  // throws ConfigError on domain violations
};

/// Closed-form bound with every intermediate quantity.
struct BudgetReport {
    double h_hat = 0.0;                         // residual-block bound
    double l_bar = 0.0;                         // post-fusion bound
    std::vector<double> l_tilde;                // per-branch fusion bounds (n values)
    double fusion_factor = 0.0;                 // sqrt(sum_i l_tilde_i^2)
    double total = 0.0;                         // L
    double total_eval = 0.0;                    // L recomputed with p = 0
    std::vector<std::vector<double>> fuse_path; // [i-1][j-1], 0 on the diagonal
};

enum class ComposeMode { Sequential, Additive };

/// Product (sequential) or sum (additive) of nonnegative per-op bounds.
/// Empty input composes to the identity element: 1 or 0 respectively.
double compose(const std::vector<double>& bounds, ComposeMode mode);

double residual_block_bound(const LipschitzConfig& cfg);
double post_fusion_bound(const LipschitzConfig& cfg);

/// Bound of the fusion path feeding branch i from branch j (1-based, i != j).
double fuse_path_bound(const LipschitzConfig& cfg, int i, int j);

double fusion_branch_bound(const LipschitzConfig& cfg, int i);

BudgetReport overall_bound(const LipschitzConfig& cfg);

struct SweepRow {
    std::string param;
    double value = 0.0;
    double h_hat = 0.0;
    double l_bar = 0.0;
    double l_tilde_rms = 0.0;
    double total = 0.0;
};

/// One overall_bound evaluation per value; values outside the parameter's
/// domain are skipped with a warning on `warn` (when given).
std::vector<SweepRow> sensitivity_sweep(const LipschitzConfig& cfg, const std::string& param,
                                        const std::vector<double>& values, std::ostream* warn = nullptr);

/// CSV with header param,value,L_hat,L_bar,L_tilde_rms,L at %.6g.
void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

void print_budget_report(std::ostream& os, const LipschitzConfig& cfg, const BudgetReport& report);

}  // namespace ldeq
