// SPDX-License-Identifier: Apache-2.0

#include "ldeq/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <vector>

#include "ldeq/errors.hpp"

namespace ldeq {

void RunConfig::validate() const {
    model.validate();
    solver_fwd.validate();
    solver_bwd.validate();
    if (!(lr > 0.0)) throw ConfigError("train: learning rate must be > 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
    if (dataset != "synthetic" && dataset != "idx") throw ConfigError("data: dataset must be synthetic or idx");
    if (dataset == "idx" && (idx_images.empty() || idx_labels.empty()))
        throw ConfigError("data: idx dataset needs images and labels paths");
    if (data_count < 1) throw ConfigError("data: count must be >= 1");
    if (!(data_noise >= 0.0)) throw ConfigError("data: noise must be >= 0");
}

RunConfig default_run_config() {
    RunConfig cfg;
    // desk-scale model at the reference hyperparameters
    cfg.model.branches = 4;
    cfg.model.channels = {4, 4, 8, 8};
    cfg.model.height = 32;
    cfg.model.width = 32;
    cfg.model.lip.branches = 4;
    cfg.solver_fwd.max_iter = 18;
    cfg.solver_bwd.max_iter = 20;
    return cfg;
}

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_key(const std::string& section, const std::string& key, int line) {
    throw ConfigError("unknown key '" + key + "' in section [" + section + "] (line " +
                      std::to_string(line) + ")");
}

[[noreturn]] void bad_value(const std::string& key, const std::string& why, int line) {
    throw ConfigError("invalid value for '" + key + "': " + why + " (line " + std::to_string(line) + ")");
}

double parse_double(const std::string& key, const std::string& v, int line) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) bad_value(key, "not a number: '" + v + "'", line);
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        bad_value(key, "not a number: '" + v + "'", line);
    }
}

long parse_int(const std::string& key, const std::string& v, int line) {
    try {
        std::size_t pos = 0;
        const long x = std::stol(v, &pos);
        if (pos != v.size()) bad_value(key, "not an integer: '" + v + "'", line);
        return x;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        bad_value(key, "not an integer: '" + v + "'", line);
    }
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v, int line) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(static_cast<int>(parse_int(key, trim(item), line)));
    if (out.empty()) bad_value(key, "empty list", line);
    return out;
}

// One key assignment; `line` is for error context (0 for --set overrides).
void set_key(RunConfig& cfg, const std::string& section, const std::string& key, const std::string& value,
             int line) {
    auto duo = [&](double lo, double hi, bool lo_open, bool hi_open) {
        const double x = parse_double(key, value, line);
        const bool ok = (lo_open ? x > lo : x >= lo) && (hi_open ? x < hi : x <= hi);
        if (!ok)
            bad_value(key,
                      "domain " + std::string(lo_open ? "(" : "[") + std::to_string(lo) + "," +
                          std::to_string(hi) + (hi_open ? ")" : "]"),
                      line);
        return x;
    };
    if (section == "model") {
        if (key == "n") {
            cfg.model.branches = static_cast<int>(parse_int(key, value, line));
            cfg.model.lip.branches = cfg.model.branches;
        } else if (key == "channels") {
            cfg.model.channels = parse_int_list(key, value, line);
        } else if (key == "in_channels") {
            cfg.model.in_channels = static_cast<int>(parse_int(key, value, line));
        } else if (key == "height") {
            cfg.model.height = static_cast<int>(parse_int(key, value, line));
        } else if (key == "width") {
            cfg.model.width = static_cast<int>(parse_int(key, value, line));
        } else if (key == "classes") {
            cfg.model.classes = static_cast<int>(parse_int(key, value, line));
        } else if (key == "alpha1") {
            cfg.model.lip.alpha1 = duo(0.0, 1.0, true, true);
        } else if (key == "alpha2") {
            cfg.model.lip.alpha2 = duo(0.0, 1.0, true, true);
        } else if (key == "c") {
            const double x = parse_double(key, value, line);
            if (!(x > 0.0)) bad_value(key, "must be > 0", line);
            cfg.model.lip.conv_norm = x;
        } else if (key == "gamma_bar") {
            const double x = parse_double(key, value, line);
            if (!(x > 0.0)) bad_value(key, "must be > 0", line);
            cfg.model.lip.gamma_bar = x;
        } else if (key == "a") {
            cfg.model.lip.srelu_slope = duo(0.0, 1.0, true, false);
        } else if (key == "p") {
            cfg.model.lip.drop_rate = duo(0.0, 1.0, false, true);
        } else if (key == "mode") {
            if (value == "lipschitz")
                cfg.model.variant = ModelConfig::Variant::Lipschitz;
            else if (value == "baseline")
                cfg.model.variant = ModelConfig::Variant::Baseline;
            else
                bad_value(key, "must be lipschitz or baseline", line);
        } else if (key == "seed") {
            cfg.model.seed = static_cast<std::uint64_t>(parse_int(key, value, line));
        } else if (key == "gn_epsilon") {
            const double x = parse_double(key, value, line);
            if (!(x > 0.0)) bad_value(key, "must be > 0", line);
            cfg.model.gn_epsilon = x;
        } else {
            bad_key(section, key, line);
        }
    } else if (section == "solver") {
        auto both = [&](auto setter) {
            setter(cfg.solver_fwd);
            setter(cfg.solver_bwd);
        };
        if (key == "kind") {
            if (value == "banach")
                both([](SolverConfig& s) { s.kind = SolverKind::Banach; });
            else if (value == "anderson")
                both([](SolverConfig& s) { s.kind = SolverKind::Anderson; });
            else
                bad_value(key, "must be banach or anderson", line);
        } else if (key == "tol") {
            const double x = parse_double(key, value, line);
            if (!(x > 0.0)) bad_value(key, "must be > 0", line);
            both([x](SolverConfig& s) { s.tol = x; });
        } else if (key == "metric") {
            if (value == "relative")
                both([](SolverConfig& s) { s.metric = ResidualMetric::Relative; });
            else if (value == "absolute")
                both([](SolverConfig& s) { s.metric = ResidualMetric::Absolute; });
            else
                bad_value(key, "must be relative or absolute", line);
        } else if (key == "max_iter_fwd") {
            cfg.solver_fwd.max_iter = static_cast<int>(parse_int(key, value, line));
        } else if (key == "max_iter_bwd") {
            cfg.solver_bwd.max_iter = static_cast<int>(parse_int(key, value, line));
        } else if (key == "anderson_m") {
            const int x = static_cast<int>(parse_int(key, value, line));
            both([x](SolverConfig& s) { s.anderson_m = x; });
        } else if (key == "anderson_lambda") {
            const double x = parse_double(key, value, line);
            if (x < 0.0) bad_value(key, "must be >= 0", line);
            both([x](SolverConfig& s) { s.anderson_lambda = x; });
        } else if (key == "anderson_beta") {
            const double x = duo(0.0, 1.0, true, false);
            both([x](SolverConfig& s) { s.anderson_beta = x; });
        } else {
            bad_key(section, key, line);
        }
    } else if (section == "train") {
        if (key == "backward") {
            if (value == "implicit")
                cfg.backward = BackwardKind::Implicit;
            else if (value == "jfb")
                cfg.backward = BackwardKind::Jfb;
            else
                bad_value(key, "must be implicit or jfb", line);
        } else if (key == "lr") {
            const double x = parse_double(key, value, line);
            if (!(x > 0.0)) bad_value(key, "must be > 0", line);
            cfg.lr = x;
        } else if (key == "epochs") {
            cfg.epochs = static_cast<int>(parse_int(key, value, line));
        } else if (key == "batch_size") {
            cfg.batch_size = static_cast<int>(parse_int(key, value, line));
        } else if (key == "precision") {
            if (value == "f32")
                cfg.precision = RunConfig::Precision::F32;
            else if (value == "f64")
                cfg.precision = RunConfig::Precision::F64;
            else
                bad_value(key, "must be f32 or f64", line);
        } else if (key == "out_dir") {
            cfg.out_dir = value;
        } else {
            bad_key(section, key, line);
        }
    } else if (section == "data") {
        if (key == "dataset") {
            cfg.dataset = value;
        } else if (key == "count") {
            cfg.data_count = static_cast<int>(parse_int(key, value, line));
        } else if (key == "noise") {
            const double x = parse_double(key, value, line);
            if (x < 0.0) bad_value(key, "must be >= 0", line);
            cfg.data_noise = x;
        } else if (key == "images") {
            cfg.idx_images = value;
        } else if (key == "labels") {
            cfg.idx_labels = value;
        } else {
            bad_key(section, key, line);
        }
    } else {
        throw ConfigError("unknown section [" + section + "] (line " + std::to_string(line) + ")");
    }
}

const char* const kSections[] = {"model", "solver", "train", "data"};

}  // namespace

RunConfig parse_config(const std::string& text) {
    RunConfig cfg = default_run_config();
    std::istringstream is(text);
    std::string raw;
    std::string section;
    int line = 0;
    while (std::getline(is, raw)) {
        ++line;
        std::string s = raw;
        const auto hash = s.find('#');
        if (hash != std::string::npos) s.erase(hash);
        s = trim(s);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') throw ConfigError("malformed section header (line " + std::to_string(line) + ")");
            section = trim(s.substr(1, s.size() - 2));
            bool known = false;
            for (const char* k : kSections) known |= section == k;
            if (!known) throw ConfigError("unknown section [" + section + "] (line " + std::to_string(line) + ")");
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected 'key = value' (line " + std::to_string(line) + ")");
        if (section.empty())
            throw ConfigError("key outside any section (line " + std::to_string(line) + ")");
        const std::string key = trim(s.substr(0, eq));
        const std::string value = trim(s.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("expected 'key = value' (line " + std::to_string(line) + ")");
        set_key(cfg, section, key, value, line);
    }
    if (const char* env = std::getenv("LDEQ_SEED")) {
        cfg.model.seed = static_cast<std::uint64_t>(std::strtoull(env, nullptr, 10));
    }
    cfg.validate();
    return cfg;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: '" + assignment + "'");
    std::string key = trim(assignment.substr(0, eq));
    const std::string value = trim(assignment.substr(eq + 1));
    std::string section;
    const auto dotpos = key.find('.');
    if (dotpos != std::string::npos) {
        section = key.substr(0, dotpos);
        key = key.substr(dotpos + 1);
        set_key(cfg, section, key, value, 0);
    } else {
        // bare key: try each section; key names are unique across sections
        std::string last_err;
        for (const char* sec : kSections) {
            try {
                set_key(cfg, sec, key, value, 0);
                return;
            } catch (const ConfigError& e) {
                const std::string what = e.what();
                if (what.find("unknown key") == std::string::npos) throw;  // value error: surface it
                last_err = what;
            }
        }
        throw ConfigError("unknown override key '" + key + "'");
    }
}

std::string model_config_echo(const ModelConfig& cfg) {
    std::ostringstream os;
    os << "model.n = " << cfg.branches << "\n";
    os << "model.channels = ";
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) os << (i ? "," : "") << cfg.channels[i];
    os << "\n";
    os << "model.in_channels = " << cfg.in_channels << "\n";
    os << "model.height = " << cfg.height << "\n";
    os << "model.width = " << cfg.width << "\n";
    os << "model.classes = " << cfg.classes << "\n";
    char buf[64];
    auto g17 = [&buf](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    os << "model.alpha1 = " << g17(cfg.lip.alpha1) << "\n";
    os << "model.alpha2 = " << g17(cfg.lip.alpha2) << "\n";
    os << "model.c = " << g17(cfg.lip.conv_norm) << "\n";
    os << "model.gamma_bar = " << g17(cfg.lip.gamma_bar) << "\n";
    os << "model.a = " << g17(cfg.lip.srelu_slope) << "\n";
    os << "model.p = " << g17(cfg.lip.drop_rate) << "\n";
    os << "model.mode = " << (cfg.variant == ModelConfig::Variant::Lipschitz ? "lipschitz" : "baseline") << "\n";
    os << "model.seed = " << cfg.seed << "\n";
    os << "model.gn_epsilon = " << g17(cfg.gn_epsilon) << "\n";
    return os.str();
}

ModelConfig parse_model_echo(const std::string& text) {
    RunConfig tmp = default_run_config();
    std::istringstream is(text);
    std::string raw;
    int line = 0;
    while (std::getline(is, raw)) {
        ++line;
        const std::string s = trim(raw);
        if (s.empty() || s.rfind("model.", 0) != 0) continue;
        const auto eq = s.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = trim(s.substr(6, eq - 6));
        const std::string value = trim(s.substr(eq + 1));
        set_key(tmp, "model", key, value, line);
    }
    tmp.model.validate();
    return tmp.model;
}

}  // namespace ldeq
