// SPDX-License-Identifier: Apache-2.0

#include "ldeq/budget.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

#include "ldeq/errors.hpp"
#include "ldeq/ops.hpp"

namespace ldeq {

void LipschitzConfig::validate() const {
    if (!(alpha1 > 0.0 && alpha1 < 1.0)) throw ConfigError("alpha1 must lie in (0,1)");
    if (!(alpha2 > 0.0 && alpha2 < 1.0)) throw ConfigError("alpha2 must lie in (0,1)");
    if (!(conv_norm > 0.0)) throw ConfigError("c must be > 0");
    if (!(gamma_bar > 0.0)) throw ConfigError("gamma_bar must be > 0");
    if (!(srelu_slope > 0.0 && srelu_slope <= 1.0)) throw ConfigError("a must lie in (0,1]");
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) throw ConfigError("p must lie in [0,1)");
    if (branches < 1) throw ConfigError("n must be >= 1");
}

double compose(const std::vector<double>& bounds, ComposeMode mode) {
    double acc = mode == ComposeMode::Sequential ? 1.0 : 0.0;
    for (double b : bounds) {
        if (b < 0.0) throw ConfigError("compose: bounds must be >= 0");
        if (mode == ComposeMode::Sequential)
            acc *= b;
        else
            acc += b;
    }
    return acc;
}

double residual_block_bound(const LipschitzConfig& cfg) {
    const double g = cfg.gamma_bar, a = cfg.srelu_slope, c = cfg.conv_norm;
    const double drop = 1.0 / (1.0 - cfg.drop_rate);
    return (1.0 - cfg.alpha1) * g * a + cfg.alpha1 * g * g * g * c * c * a * a * drop;
}

double post_fusion_bound(const LipschitzConfig& cfg) {
    return cfg.gamma_bar * cfg.conv_norm * cfg.srelu_slope;
}

double fuse_path_bound(const LipschitzConfig& cfg, int i, int j) {
    const int n = cfg.branches;
    if (i < 1 || i > n || j < 1 || j > n) throw ConfigError("fuse_path_bound: branch index out of range");
    if (i == j) throw ConfigError("fuse_path_bound: i and j must differ");
    const double gc = cfg.gamma_bar * cfg.conv_norm;
    if (j < i) {
        // downsample chain h1 . h2^(i-j-1)
        return gc * std::pow(cfg.srelu_slope * gc, static_cast<double>(i - j - 1));
    }
    const double interp = std::pow(2.0, static_cast<double>(j - i));
    return interp * (cfg.upsample_includes_conv ? gc : 1.0);
}

double fusion_branch_bound(const LipschitzConfig& cfg, int i) {
    const int n = cfg.branches;
    if (i < 1 || i > n) throw ConfigError("fusion_branch_bound: branch index out of range");
    const double skip = 1.0 - cfg.alpha2;
    double acc = 0.0;
    const FusionRow row = fusion_weights(n, i);
    for (std::size_t k = 0; k < row.partners.size(); ++k) {
        const double term = row.weights[k] * fuse_path_bound(cfg, i, row.partners[k]);
        acc += term * term;
    }
    return std::sqrt(skip * skip + cfg.alpha2 * cfg.alpha2 * acc);
}

BudgetReport overall_bound(const LipschitzConfig& cfg) {
    BudgetReport rep;
    rep.h_hat = residual_block_bound(cfg);
    rep.l_bar = post_fusion_bound(cfg);
    const int n = cfg.branches;
    rep.l_tilde.resize(static_cast<std::size_t>(n));
    rep.fuse_path.assign(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    double sum_sq = 0.0;
    for (int i = 1; i <= n; ++i) {
        const double lt = fusion_branch_bound(cfg, i);
        rep.l_tilde[static_cast<std::size_t>(i - 1)] = lt;
        sum_sq += lt * lt;
        for (int j = 1; j <= n; ++j)
            if (j != i)
                rep.fuse_path[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)] =
                    fuse_path_bound(cfg, i, j);
    }
    rep.fusion_factor = std::sqrt(sum_sq);
    rep.total = rep.h_hat * rep.fusion_factor * rep.l_bar;

    LipschitzConfig eval_cfg = cfg;
    eval_cfg.drop_rate = 0.0;
    rep.total_eval =
        residual_block_bound(eval_cfg) * rep.fusion_factor * post_fusion_bound(eval_cfg);
    return rep;
}

namespace {

// Returns false (with a message) when the value lies outside the parameter's domain.
bool apply_param(LipschitzConfig& cfg, const std::string& param, double value, std::string& why) {
    if (param == "alpha1" || param == "alpha2") {
        if (!(value > 0.0 && value < 1.0)) {
            why = param + " must lie in (0,1)";
            return false;
        }
        (param == "alpha1" ? cfg.alpha1 : cfg.alpha2) = value;
    } else if (param == "c") {
        if (!(value > 0.0)) {
            why = "c must be > 0";
            return false;
        }
        cfg.conv_norm = value;
    } else if (param == "gamma_bar") {
        if (!(value > 0.0)) {
            why = "gamma_bar must be > 0";
            return false;
        }
        cfg.gamma_bar = value;
    } else if (param == "a") {
        if (!(value > 0.0 && value <= 1.0)) {
            why = "a must lie in (0,1]";
            return false;
        }
        cfg.srelu_slope = value;
    } else if (param == "p") {
        if (!(value >= 0.0 && value < 1.0)) {
            why = "p must lie in [0,1)";
            return false;
        }
        cfg.drop_rate = value;
    } else if (param == "n") {
        if (!(value >= 1.0 && value == std::floor(value))) {
            why = "n must be a positive integer";
            return false;
        }
        cfg.branches = static_cast<int>(value);
    } else {
        throw ConfigError("sensitivity_sweep: unknown parameter '" + param + "'");
    }
    return true;
}

}  // namespace

std::vector<SweepRow> sensitivity_sweep(const LipschitzConfig& cfg, const std::string& param,
                                        const std::vector<double>& values, std::ostream* warn) {
    std::vector<SweepRow> rows;
    for (double v : values) {
        LipschitzConfig c = cfg;
        std::string why;
        if (!apply_param(c, param, v, why)) {
            if (warn) *warn << "skipping " << param << " = " << v << ": " << why << "\n";
            continue;
        }
        const BudgetReport rep = overall_bound(c);
        double mean_sq = 0.0;
        for (double lt : rep.l_tilde) mean_sq += lt * lt;
        mean_sq /= static_cast<double>(rep.l_tilde.size());
        rows.push_back({param, v, rep.h_hat, rep.l_bar, std::sqrt(mean_sq), rep.total});
    }
    return rows;
}

namespace {

std::string g6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

}  // namespace

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
    os << "param,value,L_hat,L_bar,L_tilde_rms,L\n";
    for (const SweepRow& r : rows)
        os << r.param << "," << g6(r.value) << "," << g6(r.h_hat) << "," << g6(r.l_bar) << ","
           << g6(r.l_tilde_rms) << "," << g6(r.total) << "\n";
}

void print_budget_report(std::ostream& os, const LipschitzConfig& cfg, const BudgetReport& rep) {
    os << "alpha1 = " << g6(cfg.alpha1) << "  alpha2 = " << g6(cfg.alpha2) << "  c = " << g6(cfg.conv_norm)
       << "  gamma_bar = " << g6(cfg.gamma_bar) << "  a = " << g6(cfg.srelu_slope) << "  p = "
       << g6(cfg.drop_rate) << "  n = " << cfg.branches << "\n";
    os << "L_hat = " << g6(rep.h_hat) << "\n";
    os << "L_bar = " << g6(rep.l_bar) << "\n";
    os << "L_tilde =";
    for (double lt : rep.l_tilde) os << " " << g6(lt);
    os << "\n";
    os << "fusion_factor = " << g6(rep.fusion_factor) << "\n";
    const int n = static_cast<int>(rep.l_tilde.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j)
                os << "L_fuse[" << (i + 1) << "," << (j + 1) << "] = "
                   << g6(rep.fuse_path[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) << "\n";
    os << "L = " << g6(rep.total) << "\n";
    os << "L_eval = " << g6(rep.total_eval) << "\n";
    os << "contraction = " << (rep.total < 1.0 ? "yes" : "no") << "\n";
}

}  // namespace ldeq
