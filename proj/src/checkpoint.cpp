// SPDX-License-Identifier: Apache-2.0

#include "ldeq/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "ldeq/config.hpp"
#include "ldeq/errors.hpp"

namespace ldeq {

namespace {

constexpr const char* kFormat = "LDEQ1";

struct ManifestEntry {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;  // bytes into weights.bin
};

struct Manifest {
    ModelConfig cfg;
    std::vector<ManifestEntry> tensors;
};

// weights.bin stores little-endian float32 regardless of the host's Real.
void put_f32_le(std::vector<unsigned char>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    out.push_back(static_cast<unsigned char>(bits & 0xff));
    out.push_back(static_cast<unsigned char>((bits >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((bits >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((bits >> 24) & 0xff));
}

float get_f32_le(const unsigned char* p) {
    const std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                               (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

Manifest read_manifest(const std::string& dir) {
    const std::string path = dir + "/manifest.txt";
    std::ifstream f(path);
    if (!f) throw IoError("cannot open checkpoint manifest: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string text = ss.str();

    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            const auto b = s.find_last_not_of(" \t\r");
            return s.substr(a, b - a + 1);
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    const auto fmt = kv.find("format");
    if (fmt == kv.end() || fmt->second != kFormat)
        throw IoError("unsupported checkpoint format '" + (fmt == kv.end() ? "<missing>" : fmt->second) +
                      "' (expected " + kFormat + ")");

    Manifest man;
    man.cfg = parse_model_echo(text);
    const auto cnt = kv.find("tensor_count");
    if (cnt == kv.end()) throw IoError("manifest missing tensor_count");
    const int count = std::stoi(cnt->second);
    for (int i = 0; i < count; ++i) {
        const std::string base = "tensor." + std::to_string(i);
        ManifestEntry e;
        auto need = [&](const std::string& k) {
            const auto it = kv.find(base + "." + k);
            if (it == kv.end()) throw IoError("manifest missing " + base + "." + k);
            return it->second;
        };
        e.name = need("name");
        std::stringstream shs(need("shape"));
        std::string item;
        while (std::getline(shs, item, ',')) e.shape.push_back(std::stoi(item));
        e.offset = static_cast<std::size_t>(std::stoull(need("offset")));
        man.tensors.push_back(std::move(e));
    }
    return man;
}

template <class Real>
void load_weights(ModelT<Real>& m, const Manifest& man, const std::string& dir) {
    const std::string path = dir + "/weights.bin";
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint weights: " + path);
    std::vector<unsigned char> blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    auto regs = param_registry(m, true);
    std::map<std::string, TensorT<Real>*> by_name;
    for (auto& [name, t] : regs) by_name[name] = t;
    if (by_name.size() != man.tensors.size())
        throw IoError("checkpoint lists " + std::to_string(man.tensors.size()) + " tensors, model has " +
                      std::to_string(by_name.size()));

    for (const ManifestEntry& e : man.tensors) {
        const auto it = by_name.find(e.name);
        if (it == by_name.end()) throw IoError("checkpoint tensor not in model: " + e.name);
        TensorT<Real>* t = it->second;
        if (t->shape != e.shape) throw IoError("shape mismatch for tensor " + e.name);
        const std::size_t bytes = t->size() * 4;
        if (e.offset + bytes > blob.size())
            throw IoError("weights.bin truncated while reading tensor " + e.name);
        for (std::size_t k = 0; k < t->size(); ++k)
            t->data[k] = static_cast<Real>(get_f32_le(blob.data() + e.offset + 4 * k));
    }
}

}  // namespace

template <class Real>
void checkpoint_save(ModelT<Real>& m, const std::string& dir) {
    std::filesystem::create_directories(dir);
    auto regs = param_registry(m, true);

    std::vector<unsigned char> blob;
    std::ostringstream man;
    man << "format = " << kFormat << "\n";
    man << model_config_echo(m.cfg);
    man << "tensor_count = " << regs.size() << "\n";
    std::size_t offset = 0;
    for (std::size_t i = 0; i < regs.size(); ++i) {
        const auto& [name, t] = regs[i];
        man << "tensor." << i << ".name = " << name << "\n";
        man << "tensor." << i << ".shape = ";
        for (std::size_t k = 0; k < t->shape.size(); ++k) man << (k ? "," : "") << t->shape[k];
        man << "\n";
        man << "tensor." << i << ".offset = " << offset << "\n";
        for (Real v : t->data) put_f32_le(blob, static_cast<float>(v));
        offset += t->size() * 4;
    }

    std::ofstream mf(dir + "/manifest.txt");
    if (!mf) throw IoError("cannot write checkpoint manifest in " + dir);
    mf << man.str();
    mf.close();
    std::ofstream wf(dir + "/weights.bin", std::ios::binary);
    if (!wf) throw IoError("cannot write checkpoint weights in " + dir);
    wf.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
}

template <class Real>
ModelT<Real> checkpoint_load(const std::string& dir) {
    const Manifest man = read_manifest(dir);
    ModelT<Real> m = build_model<Real>(man.cfg);
    load_weights(m, man, dir);
    return m;
}

template <class Real>
void checkpoint_load_into(ModelT<Real>& m, const std::string& dir) {
    const Manifest man = read_manifest(dir);
    load_weights(m, man, dir);
}

template void checkpoint_save<float>(ModelT<float>&, const std::string&);
template void checkpoint_save<double>(ModelT<double>&, const std::string&);
template ModelT<float> checkpoint_load<float>(const std::string&);
template ModelT<double> checkpoint_load<double>(const std::string&);
template void checkpoint_load_into<float>(ModelT<float>&, const std::string&);
template void checkpoint_load_into<double>(ModelT<double>&, const std::string&);

}  // namespace ldeq
