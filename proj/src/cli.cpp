// SPDX-License-Identifier: Apache-2.0

#include "ldeq/cli.hpp"

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ldeq/budget.hpp"
#include "ldeq/checkpoint.hpp"
#include "ldeq/config.hpp"
#include "ldeq/errors.hpp"
#include "ldeq/train.hpp"

namespace ldeq {

namespace {

std::string g6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

RunConfig make_run_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    RunConfig cfg = config_path.empty() ? parse_config("") : load_config_file(config_path);
    for (const std::string& kv : overrides) apply_override(cfg, kv);
    cfg.validate();
    return cfg;
}

std::vector<double> parse_value_list(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stod(item));
        } catch (...) {
            throw ConfigError("--values: not a number: '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError("--values: empty list");
    return out;
}

std::ostream& open_out(std::ofstream& file, const std::string& path) {
    if (path.empty()) return std::cout;
    file.open(path);
    if (!file) throw IoError("cannot open output file: " + path);
    return file;
}

int cmd_budget(const RunConfig& cfg) {
    print_budget_report(std::cout, cfg.model.lip, overall_bound(cfg.model.lip));
    return 0;
}

int cmd_sweep(const RunConfig& cfg, const std::string& param, const std::string& values,
              const std::string& out_path) {
    std::ofstream file;
    std::ostream& os = open_out(file, out_path);
    write_sweep_csv(os, sensitivity_sweep(cfg.model.lip, param, parse_value_list(values), &std::cerr));
    return 0;
}

int cmd_solve(const RunConfig& cfg, const std::string& out_path) {
    Dataset data = load_dataset(cfg);
    auto batches = make_batches<double>(data, cfg.batch_size, cfg.model.seed, 0, false);
    ModelT<double> model = build_model<double>(cfg.model);
    auto res = solve_forward<double>(model, batches.front().x, cfg.solver_fwd, Mode::Eval);
    std::ofstream file;
    std::ostream& os = open_out(file, out_path);
    write_trace_csv(os, "fwd0", res.forward, true);
    std::cerr << "converged = " << (res.forward.converged ? "yes" : "no") << ", nfes = " << res.forward.nfes
              << "\n";
    return 0;
}

// Empirical max ratio ||f(x)-f(y)|| / ||x-y|| over random pairs.
template <class ApplyFn>
double empirical_ratio(ApplyFn&& f, Rng& rng, const std::vector<int>& shape, int pairs) {
    double worst = 0.0;
    for (int t = 0; t < pairs; ++t) {
        TensorT<double> a(shape), b(shape);
        for (auto& v : a.data) v = rng.normal();
        for (auto& v : b.data) v = rng.normal();
        TensorT<double> fa = f(a), fb = f(b);
        axpby_inplace(-1.0, fb, 1.0, fa);
        axpby_inplace(-1.0, b, 1.0, a);
        const double dn = norm2(a);
        if (dn > 0.0) worst = std::max(worst, norm2(fa) / dn);
    }
    return worst;
}

int cmd_lipcheck(const RunConfig& cfg, int pairs) {
    Rng rng(cfg.model.seed ^ 0x6c697063ULL);
    const auto& lip = cfg.model.lip;
    const std::vector<int> feat{1, 4, 8, 8};
    struct Row {
        std::string name;
        double analytic, empirical;
    };
    std::vector<Row> rows;

    auto mgn = make_mean_group_norm<double>(4, 2);
    mgn.gamma.fill(lip.gamma_bar);
    rows.push_back({"MGN", op_lipschitz_bound(mgn),
                    empirical_ratio([&](const TensorT<double>& t) { return op_apply(mgn, t, Mode::Eval); }, rng,
                                    feat, pairs)});
    auto gn = make_group_norm<double>(4, 2, cfg.model.gn_epsilon);
    gn.gamma.fill(lip.gamma_bar);
    rows.push_back({"GN", op_lipschitz_bound(gn),
                    empirical_ratio([&](const TensorT<double>& t) { return op_apply(gn, t, Mode::Eval); }, rng,
                                    feat, pairs)});
    auto relu = make_relu<double>();
    rows.push_back({"ReLU", 1.0,
                    empirical_ratio([&](const TensorT<double>& t) { return op_apply(relu, t, Mode::Eval); },
                                    rng, feat, pairs)});
    auto srelu = make_srelu<double>(lip.srelu_slope);
    rows.push_back({"SReLU", op_lipschitz_bound(srelu),
                    empirical_ratio([&](const TensorT<double>& t) { return op_apply(srelu, t, Mode::Eval); },
                                    rng, feat, pairs)});
    auto drop = make_dropout<double>(lip.drop_rate);
    TensorT<double> mask(feat);
    for (auto& v : mask.data) v = rng.bernoulli(1.0 - lip.drop_rate) ? 1.0 : 0.0;
    drop.mask = &mask;
    rows.push_back({"Dropout", op_lipschitz_bound(drop),
                    empirical_ratio([&](const TensorT<double>& t) { return op_apply(drop, t, Mode::Train); },
                                    rng, feat, pairs)});
    ConvGeometry geom{4, 8, 8, 1, 1};
    auto conv = make_conv<double>(4, geom, 3, 3, false, 0.0);
    for (auto& v : conv.weight.data) v = rng.normal() * 0.4;
    for (auto& v : conv.u_state.data) v = rng.normal();
    op_refresh_spectral(conv, 300);
    rows.push_back({"Conv", op_lipschitz_bound(conv),
                    empirical_ratio([&](const TensorT<double>& t) { return op_apply(conv, t, Mode::Eval); },
                                    rng, feat, pairs)});
    auto cstar = make_conv<double>(4, geom, 3, 3, true, lip.conv_norm);
    for (auto& v : cstar.weight.data) v = rng.normal();
    for (auto& v : cstar.u_state.data) v = rng.normal();
    op_project(cstar, 300);
    rows.push_back({"ConvStar", op_lipschitz_bound(cstar),
                    empirical_ratio([&](const TensorT<double>& t) { return op_apply(cstar, t, Mode::Eval); },
                                    rng, feat, pairs)});
    auto up = make_upsample_nn<double>(2, 2);
    rows.push_back({"UpsampleNN", op_lipschitz_bound(up),
                    empirical_ratio([&](const TensorT<double>& t) { return op_apply(up, t, Mode::Eval); }, rng,
                                    feat, pairs)});
    TensorT<double> partner(feat);
    for (auto& v : partner.data) v = rng.normal();
    auto cc = make_convex_combine<double>(lip.alpha2, partner);
    rows.push_back({"ConvexCombine", op_lipschitz_bound(cc),
                    empirical_ratio([&](const TensorT<double>& t) { return op_apply(cc, t, Mode::Eval); }, rng,
                                    feat, pairs)});

    // whole model against the closed-form budget
    ModelT<double> model = build_model<double>(cfg.model);
    const double budget_l = overall_bound(lip).total;
    Rng mask_rng(cfg.model.seed ^ 0x6d6bULL);
    DropoutMasksT<double> masks = make_dropout_masks(model, 1, mask_rng);
    double worst = 0.0;
    for (int t = 0; t < pairs; ++t) {
        StateT<double> a = zero_state<double>(cfg.model, 1);
        StateT<double> b = zero_state<double>(cfg.model, 1);
        for (auto& br : a.branches)
            for (auto& v : br.data) v = rng.normal();
        for (auto& br : b.branches)
            for (auto& v : br.data) v = rng.normal();
        StateT<double> fa = apply_f_theta<double>(model, a, nullptr, Mode::Train, &masks);
        StateT<double> fb = apply_f_theta<double>(model, b, nullptr, Mode::Train, &masks);
        const double dn = state_norm(state_sub(a, b));
        if (dn > 0.0) worst = std::max(worst, state_norm(state_sub(fa, fb)) / dn);
    }
    rows.push_back({"model", budget_l, worst});

    std::printf("%-14s %12s %12s %8s\n", "op", "analytic", "empirical", "ratio");
    bool all_ok = true;
    for (const Row& r : rows) {
        const double ratio = r.empirical / r.analytic;
        all_ok &= ratio <= 1.0 + 1e-9;
        std::printf("%-14s %12s %12s %8s\n", r.name.c_str(), g6(r.analytic).c_str(), g6(r.empirical).c_str(),
                    g6(ratio).c_str());
    }
    std::printf("%s\n", all_ok ? "all ratios within bounds" : "BOUND VIOLATION");
    return all_ok ? 0 : 2;
}

template <class Real>
int run_train(const RunConfig& cfg) {
    Dataset data = load_dataset(cfg);
    TrainOutcomeT<Real> out = train<Real>(cfg, data, &std::cerr);
    const MetricsRow& last = out.metrics.back();
    std::cout << "final: epoch " << last.epoch << " step " << last.step << " loss " << g6(last.loss)
              << " accuracy " << g6(last.accuracy) << " fwd_nfes " << last.fwd_nfes << " bwd_nfes "
              << last.bwd_nfes << "\n";
    std::cout << "forward convergence " << g6(100.0 * out.fwd_converged_fraction) << "% over "
              << out.metrics.size() << " steps, mean fwd NFEs " << g6(out.mean_fwd_nfes) << "\n";
    std::cout << "checkpoint: " << cfg.out_dir << "/checkpoint\n";
    std::cout << "metrics: " << cfg.out_dir << "/metrics.csv\n";
    return 0;
}

template <class Real>
int run_eval(const RunConfig& cfg, const std::string& ckpt) {
    ModelT<Real> model = checkpoint_load<Real>(ckpt);
    Dataset data = load_dataset(cfg);
    EvalResultT<Real> r = evaluate(model, data, cfg.solver_fwd, cfg.batch_size);
    std::cout << "accuracy = " << g6(r.accuracy) << "\n";
    std::cout << "mean_fwd_nfes = " << g6(r.mean_nfes) << "\n";
    std::cout << "mean_residual = " << g6(r.mean_residual) << "\n";
    std::cout << "converged_fraction = " << g6(r.converged_fraction) << "\n";
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"Lipschitz-budgeted multiscale deep equilibrium engine"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::string sweep_param, sweep_values, out_path, ckpt_dir;
    int pairs = 200;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "INI config file");
        sub->add_option("--set", overrides, "key=value override (repeatable)");
    };

    CLI::App* budget = app.add_subcommand("budget", "print the closed-form Lipschitz budget");
    add_common(budget);
    CLI::App* sweep = app.add_subcommand("sweep", "CSV sensitivity sweep of one parameter");
    add_common(sweep);
    sweep->add_option("--param", sweep_param, "one of alpha1,alpha2,c,gamma_bar,a,p,n")->required();
    sweep->add_option("--values", sweep_values, "comma-separated values")->required();
    sweep->add_option("--out", out_path, "output file (default stdout)");
    CLI::App* lipcheck = app.add_subcommand("lipcheck", "empirical vs analytic bound table");
    add_common(lipcheck);
    lipcheck->add_option("--pairs", pairs, "random pairs per op");
    CLI::App* solve = app.add_subcommand("solve", "one forward solve, residual trace CSV");
    add_common(solve);
    solve->add_option("--out", out_path, "output file (default stdout)");
    CLI::App* tr = app.add_subcommand("train", "train per the run config");
    add_common(tr);
    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(ev);
    ev->add_option("--checkpoint", ckpt_dir, "checkpoint directory")->required();

    std::vector<const char*> argv;
    argv.push_back("ldeq");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const RunConfig cfg = make_run_config(config_path, overrides);
        if (budget->parsed()) return cmd_budget(cfg);
        if (sweep->parsed()) return cmd_sweep(cfg, sweep_param, sweep_values, out_path);
        if (lipcheck->parsed()) return cmd_lipcheck(cfg, pairs);
        if (solve->parsed()) return cmd_solve(cfg, out_path);
        if (tr->parsed())
            return cfg.precision == RunConfig::Precision::F64 ? run_train<double>(cfg) : run_train<float>(cfg);
        if (ev->parsed())
            return cfg.precision == RunConfig::Precision::F64 ? run_eval<double>(cfg, ckpt_dir)
                                                              : run_eval<float>(cfg, ckpt_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace ldeq
