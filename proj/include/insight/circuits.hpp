#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace insight {

/// Raised for names that are not present in the topology/technology registry.
class UnknownNameError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a design point violates its topology's parameter space.
class DesignError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class MetricClass { DC = 0, AC = 1, Transient = 2 };

[[nodiscard]] std::string_view to_string(MetricClass c) noexcept;
[[nodiscard]] MetricClass metric_class_from_string(std::string_view s);

struct MetricSpec {
    std::string name;
    std::string unit;
    MetricClass metric_class = MetricClass::DC;
    bool log_scale = false;  // spans decades; log10 before standardization
    bool positive = false;   // must be strictly > 0
    std::vector<std::string> derived_from;
};

struct MetricSchema {
    std::vector<MetricSpec> metrics;

    [[nodiscard]] std::size_t size() const noexcept { return metrics.size(); }
    [[nodiscard]] std::optional<std::size_t> index_of(std::string_view name) const;
    [[nodiscard]] std::vector<std::string> names() const;
    [[nodiscard]] std::vector<bool> log_flags() const;

    friend bool operator==(const MetricSchema&, const MetricSchema&);
};

bool operator==(const MetricSpec& a, const MetricSpec& b);

struct ParameterSpec {
    std::string name;
    std::string unit;
    double lower = 0.0;
    double upper = 1.0;
    double step = 0.1;

    [[nodiscard]] std::size_t grid_points() const;
    [[nodiscard]] double grid_value(std::size_t index) const;
    [[nodiscard]] double midpoint() const noexcept { return 0.5 * (lower + upper); }
    [[nodiscard]] double range() const noexcept { return upper - lower; }

    friend bool operator==(const ParameterSpec&, const ParameterSpec&) = default;
};

struct DeviceConstants {
    double kprime = 0.0;  // A/V^2
    double vth = 0.0;     // V
    double lambda = 0.0;  // 1/V
};

struct TechnologyProfile {
    std::string name;
    DeviceConstants nmos;
    DeviceConstants pmos;
    double vdd = 0.0;       // V
    double unit_cap = 0.0;  // F per unit W/L

    /// Throws std::invalid_argument unless all constants are positive and vdd > vth.
    void validate() const;
};

struct DesignPoint {
    std::vector<double> values;
    friend bool operator==(const DesignPoint&, const DesignPoint&) = default;
};

struct PerformanceVector {
    std::vector<double> values;
    friend bool operator==(const PerformanceVector&, const PerformanceVector&) = default;
};

struct CircuitTopology {
    std::string name;
    std::string description;
    std::vector<ParameterSpec> parameters;
    MetricSchema schema;
    std::string evaluator;

    [[nodiscard]] std::size_t num_parameters() const noexcept { return parameters.size(); }
    [[nodiscard]] std::size_t num_metrics() const noexcept { return schema.size(); }

    /// Throws DesignError if the length is wrong or any component is out of bounds.
    void check_design(const DesignPoint& design) const;
    /// Throws std::invalid_argument on malformed bounds, grids or schema.
    void validate() const;
};

// Registry ------------------------------------------------------------------

[[nodiscard]] const CircuitTopology& topology(std::string_view name);
[[nodiscard]] const TechnologyProfile& technology(std::string_view name);
[[nodiscard]] std::vector<std::string> topology_names();
[[nodiscard]] std::vector<std::string> technology_names();

/// Closed-form behavioral stand-in for a transistor-level simulation.
///
/// Pure function of its arguments. Every call increments a process-wide
/// instrumentation counter (see oracle_invocations()).
[[nodiscard]] PerformanceVector evaluate_oracle(const CircuitTopology& topology,
                                                const TechnologyProfile& tech,
                                                const DesignPoint& design);

[[nodiscard]] PerformanceVector evaluate_oracle(std::string_view topology_name,
                                                std::string_view tech_name,
                                                const DesignPoint& design);

/// Total number of evaluate_oracle calls made by this process.
[[nodiscard]] std::uint64_t oracle_invocations() noexcept;

}  // namespace insight
