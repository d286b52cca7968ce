#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "insight/model.hpp"
#include "insight/sizing.hpp"
#include "insight/train.hpp"

namespace insight::cli {

/// Malformed or unknown configuration content.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct SizePoint {
    std::size_t train = 0;
    std::size_t test = 0;
    friend bool operator==(const SizePoint&, const SizePoint&) = default;
};

/// Parses "300:100,1500:500".
[[nodiscard]] std::vector<SizePoint> parse_sizes(const std::string& text);

struct RunConfig {
    // [topology]
    std::string topology = "ota2_nmos";
    // [technology]
    std::string technology = "synth45";

    // [model]
    InsightConfig model;
    FCEnsembleConfig fc;
    std::size_t gradcheck_parameters = 4;
    std::size_t gradcheck_metrics = 3;
    double gradcheck_epsilon = 1e-5;
    double gradcheck_tolerance = 1e-4;

    // [training]
    std::uint64_t seed = 0;
    std::size_t train_size = 1500;
    std::size_t test_size = 500;
    unsigned threads = 0;
    TrainRunConfig run;         // seed is filled from `seed`
    std::size_t fc_epochs = 300;
    std::vector<std::string> metric_order;  // empty selects the canonical order
    EvalMode eval_mode = EvalMode::Rollout;
    std::size_t known_prefix_len = 0;

    // [sizing]
    std::size_t budget = 1000;
    std::vector<std::size_t> grid_points;
    std::vector<std::size_t> start;
    std::string targets;  // "iq<=0.6,dc_gain>=58"; empty uses the topology defaults
    EnvConfig env;
    std::size_t baseline_lanes = 1;
    PPOConfig ppo;
    InsightMConfig insight_m;

    // [report]
    bool table = true;
    std::vector<SizePoint> sweep_sizes{{1500, 500}};
    std::vector<std::string> sweep_topologies;  // empty runs every registered topology
    std::size_t bench_batch = 1000;
    std::size_t bench_repeats = 5;

    /// Throws ConfigError for values the library would reject.
    void validate() const;
};

/// Strict INI parsing: unknown sections and keys are rejected.
[[nodiscard]] RunConfig parse_config(std::istream& in);
[[nodiscard]] RunConfig load_config(const std::string& path);

/// Every knob as "section.key = value" lines in a fixed order.
[[nodiscard]] std::string canonical_config(const RunConfig& config);
/// 16 hex digits of a CRC-64 over canonical_config().
[[nodiscard]] std::string config_hash(const RunConfig& config);

/// The sizing task described by the [topology], [technology] and [sizing] sections.
[[nodiscard]] SizingTask sizing_task(const RunConfig& config);
/// Resolves metric names in `metric_order` against the topology's schema.
[[nodiscard]] std::vector<std::size_t> resolved_metric_order(const RunConfig& config);

}  // namespace insight::cli
