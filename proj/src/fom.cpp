#include "insight/fom.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace insight {

std::string_view to_string(ConstraintSense s) noexcept {
    return s == ConstraintSense::AtLeast ? ">=" : "<=";
}

ConstraintSense constraint_sense_from_string(std::string_view s) {
    if (s == ">=" || s == "min" || s == "at_least") return ConstraintSense::AtLeast;
    if (s == "<=" || s == "max" || s == "at_most") return ConstraintSense::AtMost;
    throw std::invalid_argument("unknown constraint sense '" + std::string(s) + "'");
}

double Constraint::value(const PerformanceVector& perf) const {
    const double v = perf.values.at(metric);
    return sense == ConstraintSense::AtLeast ? threshold - v : v - threshold;
}

void FoMSpec::validate(std::size_t num_metrics) const {
    if (objective && *objective >= num_metrics) {
        throw std::invalid_argument("FoM objective index out of range");
    }
    if (!std::isfinite(objective_weight)) {
        throw std::invalid_argument("FoM objective weight must be finite");
    }
    for (const auto& c : constraints) {
        if (c.metric >= num_metrics) {
            throw std::invalid_argument("FoM constraint index out of range");
        }
        if (!std::isfinite(c.weight) || !(c.weight > 0.0) || !std::isfinite(c.threshold)) {
            throw std::invalid_argument("FoM constraint weight must be finite and positive");
        }
    }
}

double objective_value(const FoMSpec& spec, const PerformanceVector& perf) {
    if (!spec.objective) {
        return 0.0;
    }
    const double v = perf.values.at(*spec.objective);
    return spec.minimize_objective ? v : -v;
}

double constraint_penalty(double weighted_violation) noexcept {
    return std::min(1.0, std::max(0.0, weighted_violation));
}

double fom_from_terms(double objective_weight, double objective,
                      std::span<const double> weighted_violations) {
    double total = objective_weight * objective;
    for (double wf : weighted_violations) {
        total += constraint_penalty(wf);
    }
    return total;
}

double fom(const FoMSpec& spec, const PerformanceVector& perf) {
    double total = spec.objective_weight * objective_value(spec, perf);
    for (const auto& c : spec.constraints) {
        total += constraint_penalty(c.weight * c.value(perf));
    }
    return total;
}

bool constraints_met(const FoMSpec& spec, const PerformanceVector& perf) {
    return std::all_of(spec.constraints.begin(), spec.constraints.end(),
                       [&](const Constraint& c) { return c.value(perf) <= 0.0; });
}

}  // namespace insight
