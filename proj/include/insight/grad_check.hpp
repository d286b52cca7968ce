#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "insight/ops.hpp"

namespace insight {

struct GradCheckOptions {
    double epsilon = 1e-5;
    double tolerance = 1e-4;
    /// Lower bound on the relative-error denominator, so that entries whose
    /// true gradient is at the finite-difference noise floor do not dominate.
    double denominator_floor = 1e-6;
};

struct GradCheckBlock {
    std::string name;
    std::size_t entries = 0;
    double max_relative_error = 0.0;
    double max_absolute_error = 0.0;
    std::size_t worst_index = 0;
};

struct GradCheckReport {
    std::vector<GradCheckBlock> blocks;
    double max_relative_error = 0.0;
    double tolerance = 0.0;
    std::size_t entries = 0;

    [[nodiscard]] bool passed() const { return max_relative_error < tolerance; }
};

/// Compares analytic gradients against central finite differences.
///
/// `loss` must be a deterministic function of the parameter values.
/// `accumulate_gradients` must add dloss/dparam into each Parameter::grad;
/// the checker zeroes gradients before calling it.
[[nodiscard]] GradCheckReport grad_check(const std::function<double()>& loss,
                                         const std::function<void()>& accumulate_gradients,
                                         const ParameterList& params,
                                         const GradCheckOptions& options = {});

}  // namespace insight
