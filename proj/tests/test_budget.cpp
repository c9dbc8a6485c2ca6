// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "ldeq/budget.hpp"
#include "ldeq/errors.hpp"
#include "ldeq/ops.hpp"
#include "ldeq/rng.hpp"

using namespace ldeq;

namespace {

LipschitzConfig paper_cfg(double a) {
    LipschitzConfig cfg;
    cfg.alpha1 = 0.5;
    cfg.alpha2 = 0.3;
    cfg.conv_norm = 2.0;
    cfg.gamma_bar = 1.0;
    cfg.srelu_slope = a;
    cfg.drop_rate = 0.3;
    cfg.branches = 4;
    return cfg;
}

// Independent recomputation used to freeze expected values: assembles L from
// fusion_weights and elementary arithmetic only.
double oracle_overall(const LipschitzConfig& cfg) {
    const double g = cfg.gamma_bar, a = cfg.srelu_slope, c = cfg.conv_norm;
    const double H = (1.0 - cfg.alpha1) * g * a + cfg.alpha1 * g * g * g * c * c * a * a / (1.0 - cfg.drop_rate);
    const double Lb = g * c * a;
    double ss = 0.0;
    for (int i = 1; i <= cfg.branches; ++i) {
        double acc = 0.0;
        const FusionRow row = fusion_weights(cfg.branches, i);
        for (std::size_t k = 0; k < row.partners.size(); ++k) {
            const int j = row.partners[k];
            const double path = j < i ? g * c * std::pow(a * g * c, i - j - 1)
                                      : std::pow(2.0, j - i) * (cfg.upsample_includes_conv ? g * c : 1.0);
            acc += (row.weights[k] * path) * (row.weights[k] * path);
        }
        const double lt = std::sqrt((1.0 - cfg.alpha2) * (1.0 - cfg.alpha2) + cfg.alpha2 * cfg.alpha2 * acc);
        ss += lt * lt;
    }
    return H * std::sqrt(ss) * Lb;
}

}  // namespace

TEST_CASE("compose: product for sequential, sum for additive") {
    CHECK(compose({2.0, 3.0}, ComposeMode::Sequential) == 6.0);
    CHECK(compose({1.0, 0.5}, ComposeMode::Additive) == 1.5);
    CHECK(compose({1.0, 1.0, 1.0}, ComposeMode::Sequential) == 1.0);
    CHECK(compose({}, ComposeMode::Sequential) == 1.0);
    CHECK(compose({}, ComposeMode::Additive) == 0.0);
    CHECK_THROWS_AS(compose({-1.0}, ComposeMode::Sequential), ConfigError);
}

TEST_CASE("residual block bound") {
    CHECK(residual_block_bound(paper_cfg(1.0)) == doctest::Approx(3.357142857).epsilon(1e-9));
    CHECK(residual_block_bound(paper_cfg(0.4)) == doctest::Approx(0.657142857).epsilon(1e-9));
    LipschitzConfig unit = paper_cfg(1.0);
    unit.conv_norm = 1.0;
    unit.drop_rate = 0.0;
    for (double a1 : {0.1, 0.5, 0.9}) {
        unit.alpha1 = a1;
        CHECK(residual_block_bound(unit) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("post-fusion bound is the plain product") {
    CHECK(post_fusion_bound(paper_cfg(1.0)) == doctest::Approx(2.0));
    LipschitzConfig unit = paper_cfg(1.0);
    unit.conv_norm = 1.0;
    CHECK(post_fusion_bound(unit) == doctest::Approx(1.0));
    LipschitzConfig c3 = paper_cfg(0.4);
    c3.gamma_bar = 0.5;
    CHECK(post_fusion_bound(c3) == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("fuse path bounds: downsample chains and upsample factors") {
    LipschitzConfig cfg = paper_cfg(1.0);
    CHECK(fuse_path_bound(cfg, 4, 1) == doctest::Approx(8.0));   // 2*(1*1*2)^2
    CHECK(fuse_path_bound(cfg, 2, 1) == doctest::Approx(2.0));   // exponent zero leaves gamma*c
    CHECK(fuse_path_bound(cfg, 1, 3) == doctest::Approx(8.0));   // 2^2 * gamma*c
    LipschitzConfig bare = cfg;
    bare.upsample_includes_conv = false;
    CHECK(fuse_path_bound(bare, 1, 3) == doctest::Approx(4.0));
    CHECK_THROWS_AS(fuse_path_bound(cfg, 2, 2), ConfigError);
}

TEST_CASE("fusion branch bound") {
    LipschitzConfig cfg = paper_cfg(1.0);
    // frozen from the direct softmax/arithmetic oracle above
    CHECK(fusion_branch_bound(cfg, 1) == doctest::Approx(1.28801958).epsilon(1e-7));
    CHECK(fusion_branch_bound(cfg, 4) == doctest::Approx(1.15325626).epsilon(1e-7));
    // pure skip path at the alpha2 -> 0 boundary
    LipschitzConfig skip = cfg;
    skip.alpha2 = 0.0;
    CHECK(fusion_branch_bound(skip, 1) == doctest::Approx(1.0).epsilon(1e-12));
    // every branch bound sits at or above the skip contribution
    for (int i = 1; i <= 4; ++i) CHECK(fusion_branch_bound(cfg, i) >= 1.0 - cfg.alpha2);
}

TEST_CASE("overall bound reproduces the calibration triple") {
    const BudgetReport r10 = overall_bound(paper_cfg(1.0));
    CHECK(r10.total == doctest::Approx(14.43).epsilon(0.02));
    CHECK(r10.total == doctest::Approx(14.427181053).epsilon(1e-8));

    const BudgetReport r04 = overall_bound(paper_cfg(0.4));
    CHECK(r04.total == doctest::Approx(1.0).epsilon(0.02));
    CHECK(r04.total == doctest::Approx(1.003451381).epsilon(1e-8));

    const BudgetReport r01 = overall_bound(paper_cfg(0.1));
    CHECK(r01.total == doctest::Approx(0.03).epsilon(0.05));
    CHECK(r01.total == doctest::Approx(0.029668140).epsilon(1e-7));
}

TEST_CASE("report invariants: product identity and skip floor") {
    for (double a : {0.1, 0.4, 1.0}) {
        const LipschitzConfig cfg = paper_cfg(a);
        const BudgetReport rep = overall_bound(cfg);
        double ss = 0.0;
        for (double lt : rep.l_tilde) {
            CHECK(lt >= 1.0 - cfg.alpha2);
            ss += lt * lt;
        }
        CHECK(rep.total ==
              doctest::Approx(rep.h_hat * std::sqrt(ss) * rep.l_bar).epsilon(1e-12));
        // compose-by-hand of the three block bounds
        CHECK(rep.total ==
              doctest::Approx(compose({rep.h_hat, rep.fusion_factor, rep.l_bar}, ComposeMode::Sequential))
                  .epsilon(1e-12));
        CHECK(rep.total == doctest::Approx(oracle_overall(cfg)).epsilon(1e-12));
    }
}

TEST_CASE("eval-mode bound drops the dropout factor") {
    const LipschitzConfig cfg = paper_cfg(0.4);
    const BudgetReport rep = overall_bound(cfg);
    LipschitzConfig nodrop = cfg;
    nodrop.drop_rate = 0.0;
    CHECK(rep.total_eval == doctest::Approx(overall_bound(nodrop).total).epsilon(1e-12));
    CHECK(rep.total_eval < rep.total);
}

TEST_CASE("sensitivity sweep over a gives the triple") {
    const auto rows = sensitivity_sweep(paper_cfg(0.4), "a", {0.1, 0.4, 1.0});
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].total == doctest::Approx(0.03).epsilon(0.05));
    CHECK(rows[1].total == doctest::Approx(1.0).epsilon(0.02));
    CHECK(rows[2].total == doctest::Approx(14.43).epsilon(0.02));
}

TEST_CASE("sweep in p is strictly increasing at the otherwise-unit config") {
    LipschitzConfig unit = paper_cfg(1.0);
    unit.conv_norm = 1.0;
    unit.drop_rate = 0.0;
    const auto rows = sensitivity_sweep(unit, "p", {0.0, 0.3});
    REQUIRE(rows.size() == 2);
    CHECK(rows[1].total > rows[0].total);
}

TEST_CASE("sweep n=1 degenerates to the pure skip path") {
    const auto rows = sensitivity_sweep(paper_cfg(0.4), "n", {1.0});
    REQUIRE(rows.size() == 1);
    const LipschitzConfig cfg = paper_cfg(0.4);
    const double expect = residual_block_bound(cfg) * (1.0 - cfg.alpha2) * post_fusion_bound(cfg);
    CHECK(rows[0].total == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("sweep covers the convex-combination parameters too") {
    for (const char* param : {"alpha1", "alpha2"}) {
        const auto rows = sensitivity_sweep(paper_cfg(0.4), param, {0.1, 0.5, 0.9});
        REQUIRE(rows.size() == 3);
        for (const auto& r : rows) CHECK(r.total > 0.0);
    }
}

TEST_CASE("sweep skips out-of-domain values with a warning") {
    std::ostringstream warn;
    const auto rows = sensitivity_sweep(paper_cfg(0.4), "a", {0.5, 1.5, -0.1}, &warn);
    CHECK(rows.size() == 1);
    CHECK(warn.str().find("skipping") != std::string::npos);
    CHECK_THROWS_AS(sensitivity_sweep(paper_cfg(0.4), "bogus", {1.0}), ConfigError);
}

TEST_CASE("sweep CSV format") {
    std::ostringstream os;
    write_sweep_csv(os, sensitivity_sweep(paper_cfg(0.4), "a", {0.1, 0.4, 1.0}));
    const std::string text = os.str();
    CHECK(text.rfind("param,value,L_hat,L_bar,L_tilde_rms,L\n", 0) == 0);
    int lines = 0;
    for (char ch : text)
        if (ch == '\n') ++lines;
    CHECK(lines == 4);
}

TEST_CASE("monotonicity in a, c, gamma_bar, p at random configs") {
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        LipschitzConfig cfg;
        cfg.alpha1 = rng.uniform(0.05, 0.95);
        cfg.alpha2 = rng.uniform(0.05, 0.95);
        cfg.conv_norm = rng.uniform(0.2, 3.0);
        cfg.gamma_bar = rng.uniform(0.2, 2.0);
        cfg.srelu_slope = rng.uniform(0.05, 1.0);
        cfg.drop_rate = rng.uniform(0.0, 0.6);
        cfg.branches = 1 + static_cast<int>(rng.below(4));

        auto bumped = [&](auto setter) {
            LipschitzConfig c2 = cfg;
            setter(c2);
            return overall_bound(c2).total;
        };
        const double base = overall_bound(cfg).total;
        CHECK(bumped([&](LipschitzConfig& c) { c.srelu_slope = std::min(1.0, c.srelu_slope * 1.1); }) >=
              base * (1.0 - 1e-12));
        CHECK(bumped([&](LipschitzConfig& c) { c.conv_norm *= 1.1; }) >= base * (1.0 - 1e-12));
        CHECK(bumped([&](LipschitzConfig& c) { c.gamma_bar *= 1.1; }) >= base * (1.0 - 1e-12));
        CHECK(bumped([&](LipschitzConfig& c) { c.drop_rate = 0.5 + 0.5 * c.drop_rate; }) >=
              base * (1.0 - 1e-12));
    }
}

TEST_CASE("monotone nondecreasing in n at the figure's fixed parameters") {
    LipschitzConfig cfg;
    cfg.alpha1 = 0.5;
    cfg.alpha2 = 0.3;
    cfg.conv_norm = 1.5;
    cfg.gamma_bar = 1.0;
    cfg.srelu_slope = 0.4;
    cfg.drop_rate = 0.3;
    double prev = 0.0;
    for (int n = 1; n <= 6; ++n) {
        cfg.branches = n;
        const double L = overall_bound(cfg).total;
        CHECK(L >= prev);
        prev = L;
    }
}

TEST_CASE("config validation rejects out-of-domain fields") {
    LipschitzConfig cfg = paper_cfg(0.4);
    cfg.srelu_slope = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = paper_cfg(0.4);
    cfg.alpha1 = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = paper_cfg(0.4);
    cfg.drop_rate = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = paper_cfg(0.4);
    cfg.branches = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    paper_cfg(0.4).validate();  // the reference point itself is valid
}
