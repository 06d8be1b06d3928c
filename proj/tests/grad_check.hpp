#pragma once

// Central finite-difference oracle for reverse-mode gradients. The function
// under test rebuilds its graph from a ParamMap on every call, so the oracle
// stays independent of any recorded tape.

#include <cmath>
#include <functional>
#include <string>

#include "occ/params.hpp"

namespace gradcheck {

struct Result {
    double worst_rel = 0.0;
    std::string worst_at;
    bool ok = true;
};

using ScalarFn = std::function<double(const occ::ParamMap&)>;

// Compares tape gradients against (f(x+h) - f(x-h)) / 2h coordinate-wise.
// Coordinates where both values are tiny are accepted on absolute error.
inline Result compare(const ScalarFn& fn, const occ::ParamMap& params, const occ::GradMap& grads,
                      double rel_tol, double h = 1e-5, int max_coords_per_param = 0) {
    Result r;
    for (const auto& [name, g] : grads) {
        int checked = 0;
        for (size_t i = 0; i < g.size(); ++i) {
            if (max_coords_per_param > 0 && checked >= max_coords_per_param) break;
            // stride through large tensors instead of checking every coordinate
            size_t stride = 1;
            if (max_coords_per_param > 0 && g.size() > static_cast<size_t>(max_coords_per_param))
                stride = g.size() / static_cast<size_t>(max_coords_per_param);
            size_t idx = i * stride;
            if (idx >= g.size()) break;
            ++checked;

            occ::ParamMap plus = params, minus = params;
            plus.at(name).value[idx] += h;
            minus.at(name).value[idx] -= h;
            double fd = (fn(plus) - fn(minus)) / (2.0 * h);
            double an = g[idx];
            double denom = std::max({1e-8, std::fabs(fd), std::fabs(an)});
            double rel = std::fabs(fd - an) / denom;
            if (std::fabs(fd - an) < 1e-9) rel = 0.0;  // both effectively zero
            if (rel > r.worst_rel) {
                r.worst_rel = rel;
                r.worst_at = name + "[" + std::to_string(idx) + "]";
            }
            if (rel > rel_tol) r.ok = false;
        }
    }
    return r;
}

// Runs fn once on a tape to collect analytic gradients, then compares.
inline Result check(const ScalarFn& fn,
                    const std::function<occ::GradMap(const occ::ParamMap&)>& grad_fn,
                    const occ::ParamMap& params, double rel_tol, int max_coords_per_param = 0) {
    return compare(fn, params, grad_fn(params), rel_tol, 1e-5, max_coords_per_param);
}

}  // namespace gradcheck
