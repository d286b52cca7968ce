#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "insight/circuits.hpp"
#include "insight/tensor.hpp"

namespace insight {

/// Raised for malformed dataset files, bad splits and unusable statistics.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Labeled design samples for one topology on one technology.
struct Dataset {
    std::string topology;
    std::string technology;
    std::vector<ParameterSpec> parameters;
    MetricSchema schema;
    std::uint64_t seed = 0;
    Tensor designs;  // [rows x N]
    Tensor metrics;  // [rows x M]
    /// Free-form provenance (config hash, tool version, ...), carried through files.
    std::map<std::string, std::string> metadata;

    [[nodiscard]] std::size_t size() const noexcept { return designs.rows(); }
    [[nodiscard]] std::size_t num_parameters() const noexcept { return parameters.size(); }
    [[nodiscard]] std::size_t num_metrics() const noexcept { return schema.size(); }
    [[nodiscard]] DesignPoint design(std::size_t row) const;
    [[nodiscard]] PerformanceVector performance(std::size_t row) const;

    /// Throws DataError on inconsistent shapes or non-finite entries.
    void validate() const;

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Empty dataset carrying the schema of `topology` on `technology`.
[[nodiscard]] Dataset empty_dataset(const CircuitTopology& topology, std::string technology,
                                    std::uint64_t seed);

/// Gaussian samples centred on each range midpoint with sigma = range / 4,
/// redrawn per component until inside the bounds.
[[nodiscard]] std::vector<DesignPoint> sample_designs(const CircuitTopology& topology,
                                                      std::size_t n, std::uint64_t seed);

/// Samples `n` designs and labels them with the oracle. Labelling fans out over
/// `threads` workers (0 picks the hardware count); rows stay in sample order.
[[nodiscard]] Dataset build_dataset(std::string_view topology, std::string_view technology,
                                    std::size_t n, std::uint64_t seed, unsigned threads = 0);

/// Rows `indices` of `data`, in the given order.
[[nodiscard]] Dataset subset(const Dataset& data, const std::vector<std::size_t>& indices);

/// Seeded shuffle into disjoint train/test parts of the requested sizes.
[[nodiscard]] std::pair<Dataset, Dataset> split(const Dataset& data, std::size_t n_train,
                                                std::size_t n_test, std::uint64_t seed);

/// Same, with n_train = round(fraction * size) and the rest as test.
[[nodiscard]] std::pair<Dataset, Dataset> split_fraction(const Dataset& data,
                                                         double train_fraction,
                                                         std::uint64_t seed);

void save_dataset(const Dataset& data, std::ostream& out);
void save_dataset(const Dataset& data, const std::string& path);
[[nodiscard]] Dataset load_dataset(std::istream& in);
[[nodiscard]] Dataset load_dataset(const std::string& path);

/// Per-column z-scoring, with log10 applied first to flagged metrics.
struct NormStats {
    std::vector<double> x_mean;
    std::vector<double> x_std;
    std::vector<double> y_mean;
    std::vector<double> y_std;
    std::vector<bool> y_log;

    /// Fits on every row of `train`. Throws DataError on an empty set, a
    /// constant column, or a non-positive value under a log-flagged metric.
    [[nodiscard]] static NormStats fit(const Dataset& train);

    [[nodiscard]] Tensor normalize_designs(const Tensor& designs) const;
    [[nodiscard]] Tensor denormalize_designs(const Tensor& z) const;
    [[nodiscard]] Tensor normalize_metrics(const Tensor& metrics) const;
    [[nodiscard]] Tensor denormalize_metrics(const Tensor& z) const;

    [[nodiscard]] std::vector<double> normalize_design(const DesignPoint& d) const;
    [[nodiscard]] std::vector<double> normalize_performance(const PerformanceVector& p) const;
    [[nodiscard]] PerformanceVector denormalize_performance(std::span<const double> z) const;

    [[nodiscard]] double normalize_metric(std::size_t m, double v) const;
    [[nodiscard]] double denormalize_metric(std::size_t m, double z) const;

    friend bool operator==(const NormStats&, const NormStats&) = default;
};

}  // namespace insight
