#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "insight/circuits.hpp"

namespace insight {

enum class ConstraintSense { AtLeast, AtMost };

[[nodiscard]] std::string_view to_string(ConstraintSense s) noexcept;
[[nodiscard]] ConstraintSense constraint_sense_from_string(std::string_view s);

/// One specification bound. value() is <= 0 exactly when the bound holds.
struct Constraint {
    std::size_t metric = 0;
    ConstraintSense sense = ConstraintSense::AtLeast;
    double threshold = 0.0;
    double weight = 1.0;

    [[nodiscard]] double value(const PerformanceVector& perf) const;
};

/// Objective plus clamped constraint penalties:
///   FoM = w0 * f0 + sum_i min(1, max(0, w_i * f_i)),  lower is better.
/// A maximized objective is encoded as f0 = -metric.
struct FoMSpec {
    std::optional<std::size_t> objective;
    bool minimize_objective = true;
    double objective_weight = 0.0;
    std::vector<Constraint> constraints;

    /// Throws std::invalid_argument on bad indices or non-positive/non-finite weights.
    void validate(std::size_t num_metrics) const;
};

/// f0 for the spec's objective (0 when there is none).
[[nodiscard]] double objective_value(const FoMSpec& spec, const PerformanceVector& perf);

/// min(1, max(0, w * f)) for one constraint.
[[nodiscard]] double constraint_penalty(double weighted_violation) noexcept;

[[nodiscard]] double fom(const FoMSpec& spec, const PerformanceVector& perf);

/// Same scalarization from precomputed terms.
[[nodiscard]] double fom_from_terms(double objective_weight, double objective,
                                    std::span<const double> weighted_violations);

/// True iff every constraint value is <= 0. Boundary (== 0) counts as met.
[[nodiscard]] bool constraints_met(const FoMSpec& spec, const PerformanceVector& perf);

}  // namespace insight
