#include "occ/params.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "occ/error.hpp"

namespace occ {

Param zeros(num::Shape shape) {
    Param p;
    p.value.assign(static_cast<size_t>(num::numel(shape)), 0.0);
    p.shape = std::move(shape);
    return p;
}

Param full(num::Shape shape, double v) {
    Param p = zeros(std::move(shape));
    std::fill(p.value.begin(), p.value.end(), v);
    return p;
}

Param dense_init(int fan_in, int fan_out, Rng& rng) {
    Param p = zeros({fan_in, fan_out});
    double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : p.value) v = rng.uniform(-limit, limit);
    return p;
}

Param vector_init(int n, double stddev, Rng& rng) {
    Param p = zeros({n});
    for (double& v : p.value) v = rng.normal(0.0, stddev);
    return p;
}

Binder::Binder(num::Tape& tape, const ParamMap& params)
    : Binder(tape, params, [](const std::string&) { return true; }) {}

Binder::Binder(num::Tape& tape, const ParamMap& params, std::function<bool(const std::string&)> trainable)
    : tape_(tape), params_(params), trainable_(std::move(trainable)) {}

num::Tensor Binder::operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto pit = params_.find(name);
    if (pit == params_.end()) throw ConfigError("unknown parameter: " + name);
    num::Tensor t = trainable_(name) ? tape_.leaf(pit->second.shape, pit->second.value, name)
                                     : tape_.input(pit->second.shape, pit->second.value);
    bound_.emplace(name, t);
    return t;
}

void Binder::accumulate_grads(GradMap& out) const {
    for (const auto& [name, t] : bound_) {
        if (!t.grad_enabled()) continue;
        auto& slot = out[name];
        if (slot.empty()) slot.assign(t.values().size(), 0.0);
        if (!tape_.has_grad(t)) continue;
        const auto& g = tape_.grad(t);
        for (size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
    }
}

void scale_grads(GradMap& grads, double factor) {
    for (auto& [name, g] : grads)
        for (double& v : g) v *= factor;
}

void sgd_step(ParamMap& params, const GradMap& grads, double learning_rate, double weight_decay) {
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw ConfigError("gradient for unknown parameter: " + name);
        auto& v = it->second.value;
        if (v.size() != g.size())
            throw DimensionError("gradient size mismatch for " + name);
        for (size_t i = 0; i < v.size(); ++i)
            v[i] -= learning_rate * (g[i] + weight_decay * v[i]);
    }
}

uint64_t param_checksum(const ParamMap& params) {
    uint64_t h = 0xCBF29CE484222325ULL;
    auto mix = [&h](const void* data, size_t n) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001B3ULL;
        }
    };
    for (const auto& [name, p] : params) {
        mix(name.data(), name.size());
        for (int d : p.shape) mix(&d, sizeof(d));
        mix(p.value.data(), p.value.size() * sizeof(double));
    }
    return h;
}

void save_checkpoint(const ParamMap& params, const std::string& path) {
    nlohmann::json j;
    j["format_version"] = 1;
    auto& block = j["params"];
    for (const auto& [name, p] : params) {
        block[name] = {{"shape", p.shape}, {"values", p.value}};
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out << j.dump();
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

ParamMap load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint parse error in " + path + ": " + e.what());
    }
    if (!j.contains("format_version") || j["format_version"] != 1)
        throw FormatError("checkpoint " + path + " missing format_version 1");
    ParamMap params;
    for (const auto& [name, entry] : j.at("params").items()) {
        Param p;
        p.shape = entry.at("shape").get<num::Shape>();
        p.value = entry.at("values").get<std::vector<double>>();
        if (num::numel(p.shape) != static_cast<int64_t>(p.value.size()))
            throw FormatError("checkpoint entry " + name + " has inconsistent shape");
        params.emplace(name, std::move(p));
    }
    return params;
}

}  // namespace occ
