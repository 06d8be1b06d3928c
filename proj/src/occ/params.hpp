#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "occ/rng.hpp"
#include "occ/tensor.hpp"

namespace occ {

struct Param {
    num::Shape shape;
    std::vector<double> value;
};

// Named parameters in deterministic (lexicographic) order. A ParamMap is a value:
// copying it snapshots the model, and snapshots may be shared read-only across threads.
using ParamMap = std::map<std::string, Param>;

Param zeros(num::Shape shape);
Param full(num::Shape shape, double v);
// Uniform(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out)).
Param dense_init(int fan_in, int fan_out, Rng& rng);
Param vector_init(int n, double stddev, Rng& rng);

// Binds ParamMap entries onto a tape. Trainable names become grad-enabled leaves,
// the rest plain inputs; each name is bound at most once per tape.
class Binder {
public:
    Binder(num::Tape& tape, const ParamMap& params);
    Binder(num::Tape& tape, const ParamMap& params, std::function<bool(const std::string&)> trainable);

    num::Tensor operator()(const std::string& name);

    // Tape gradients for every trainable bound name, summed into `out`
    // (missing gradients count as zero). Call after tape.backward().
    void accumulate_grads(std::map<std::string, std::vector<double>>& out) const;

private:
    num::Tape& tape_;
    const ParamMap& params_;
    std::function<bool(const std::string&)> trainable_;
    std::map<std::string, num::Tensor> bound_;
};

using GradMap = std::map<std::string, std::vector<double>>;

void scale_grads(GradMap& grads, double factor);
// theta <- theta - lr * (grad + weight_decay * theta)
void sgd_step(ParamMap& params, const GradMap& grads, double learning_rate, double weight_decay);

// Order- and content-sensitive FNV-1a over names, shapes and raw value bytes.
uint64_t param_checksum(const ParamMap& params);

// Checkpoint file: JSON {"format_version": 1, "params": {name: {"shape": [...], "values": [...]}}}.
void save_checkpoint(const ParamMap& params, const std::string& path);
ParamMap load_checkpoint(const std::string& path);

}  // namespace occ
