#pragma once

// Central finite-difference checking against hand-written backward passes.

#include <cmath>
#include <functional>
#include <vector>

#include "layoutforge/field.hpp"

namespace fd {

using layoutforge::ParamBlock;

/// Central difference of eval() w.r.t. block.w[idx], using the float values
/// actually stored so rounding of the probe offsets cancels.
template <typename F>
double central_diff(ParamBlock& block, size_t idx, double h, F&& eval) {
    float orig = block.w[idx];
    block.w[idx] = static_cast<float>(static_cast<double>(orig) + h);
    double hi = static_cast<double>(block.w[idx]);
    double fp = eval();
    block.w[idx] = static_cast<float>(static_cast<double>(orig) - h);
    double lo = static_cast<double>(block.w[idx]);
    double fm = eval();
    block.w[idx] = orig;
    return (fp - fm) / (hi - lo);
}

inline double rel_error(double analytic, double numeric, double floor = 1e-7) {
    double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

/// Indices probing the start, end and interior of a block.
inline std::vector<size_t> probe_indices(size_t block_size, size_t count) {
    std::vector<size_t> idx;
    if (block_size == 0) return idx;
    for (size_t k = 0; k < count; ++k) {
        size_t i = (k * 2654435761u + 17) % block_size;
        idx.push_back(i);
    }
    idx.push_back(0);
    idx.push_back(block_size - 1);
    return idx;
}

/// Checks every probed index of a block: analytic gradient (already in
/// block.g) against central differences of eval(). Returns the worst
/// relative error among entries where either side is above `signif`.
template <typename F>
double check_block(ParamBlock& block, F&& eval, size_t probes = 6, double h = 1e-4,
                   double signif = 1e-9) {
    double worst = 0.0;
    for (size_t idx : probe_indices(block.w.size(), probes)) {
        double analytic = block.g[idx];
        double numeric = central_diff(block, idx, h, eval);
        if (std::abs(analytic) < signif && std::abs(numeric) < signif) continue;
        worst = std::max(worst, rel_error(analytic, numeric));
    }
    return worst;
}

}  // namespace fd
