#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "soupkit/autodiff.hpp"

namespace soup {

struct GradCheckOptions {
    double step = 1e-3;
    // Number of randomly chosen parameter entries to probe; 0 probes every entry.
    std::size_t probes = 0;
    std::uint64_t seed = 0;
    // Denominator floor for the relative error so that near-zero gradients are
    // judged on an absolute scale.
    double denom_floor = 1e-2;
    // Multiply the floor by max(1, |loss|). Rounding noise of a 32-bit loss
    // grows with its magnitude, so large-valued losses need a wider floor.
    bool floor_scales_with_loss = false;
    // Accuracy order of the central stencil: 2 (f(x+h) - f(x-h)) / 2h, or 4
    // (five-point). The fourth-order stencil tolerates the larger steps that
    // 32-bit evaluation needs to keep rounding noise down.
    int order = 2;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t probed = 0;
    // Worst entry: parameter index, element index, analytic and numeric values.
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Compares reverse-mode gradients of `loss` (rebuilt from the current leaf
// values on every call) against central differences. Throws NumericError
// if the loss is ever non-finite. Leaves are restored on exit.
template <class T>
GradCheckResult finite_diff_check(const std::function<ad::Var<T>()>& loss, std::vector<ad::Var<T>> params,
                                  const GradCheckOptions& options = {});

}  // namespace soup
