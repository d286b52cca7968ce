#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "insight/data.hpp"
#include "insight/model.hpp"

namespace insight {

/// Raised when the training loss becomes non-finite.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainRunConfig {
    std::size_t epochs = 300;
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    double min_learning_rate = 0.0;
    std::size_t schedule_epochs = 0;  // cosine horizon; 0 means `epochs`
    std::uint64_t seed = 0;
    std::size_t patience = 0;  // epochs without validation improvement; 0 disables
    double validation_fraction = 0.1;
    double grad_clip = 1.0;  // global-norm clip; 0 disables

    /// Throws std::invalid_argument for unusable settings.
    void validate() const;
    friend bool operator==(const TrainRunConfig&, const TrainRunConfig&) = default;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double validation_loss = 0.0;  // NaN without a validation carve-out
    double learning_rate = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;  // 0 means the initial weights were kept
    double best_validation_loss = 0.0;
    std::size_t train_rows = 0;
    std::size_t validation_rows = 0;
    double seconds = 0.0;
};

struct TrainResult {
    SurrogateCheckpoint checkpoint;
    TrainHistory history;
};

/// Teacher-forced minibatch training from scratch. An empty `metric_order`
/// selects order_metrics(schema). Normalization is fitted on the rows that
/// remain after the validation carve-out.
[[nodiscard]] TrainResult train_insight(const Dataset& train, const InsightConfig& config,
                                        const TrainRunConfig& run,
                                        std::vector<std::size_t> metric_order = {});

/// Continues training `start` on `train` with its normalization unchanged.
[[nodiscard]] TrainResult fine_tune(const SurrogateCheckpoint& start, const Dataset& train,
                                    const TrainRunConfig& run);

/// Warm start from a checkpoint of the same topology in another technology.
/// Normalization is refitted on the target training rows before fine-tuning.
[[nodiscard]] TrainResult transfer_finetune(const SurrogateCheckpoint& source,
                                            const Dataset& target_train,
                                            const TrainRunConfig& run);

struct FCTrainResult {
    FCEnsemble ensemble;
    std::vector<TrainHistory> member_histories;
    std::vector<double> member_validation_mse;
    double ensemble_validation_mse = 0.0;  // NaN without a validation carve-out
};

/// Trains every member on the same rows with its own initialization and
/// shuffling stream.
[[nodiscard]] FCTrainResult train_fc_ensemble(const Dataset& train,
                                              const FCEnsembleConfig& config,
                                              const TrainRunConfig& run);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// 1 - sum((p - y)^2) / sum((y - mean(y))^2); nullopt for a constant column.
[[nodiscard]] std::optional<double> r2_score(std::span<const double> truth,
                                             std::span<const double> predicted);
[[nodiscard]] double mean_squared_error(std::span<const double> truth,
                                        std::span<const double> predicted);

enum class EvalMode { TeacherForced, Rollout };

[[nodiscard]] std::string_view to_string(EvalMode mode) noexcept;
[[nodiscard]] EvalMode eval_mode_from_string(std::string_view s);

struct MetricScore {
    std::string name;
    std::optional<double> r2;  // normalized space; nullopt when undefined
    double mse = 0.0;          // normalized space
    double mae = 0.0;          // raw units
    bool included = true;      // false for known-prefix slots and constant columns
    std::string note;
};

struct EvalReport {
    std::string model;  // "insight" or "fc_ensemble"
    std::string topology;
    std::string technology;
    EvalMode mode = EvalMode::Rollout;
    std::size_t known_prefix_len = 0;
    std::vector<MetricScore> metrics;  // schema order
    double aggregate_r2 = 0.0;         // unweighted mean over included metrics
    double aggregate_mse = 0.0;
    std::size_t train_size = 0;
    std::size_t test_size = 0;
    double seconds = 0.0;
    std::vector<std::string> warnings;
};

/// Scores normalized predictions [B x M] against normalized truth, both in
/// schema order. `included[j] == false` removes metric j from the aggregates.
[[nodiscard]] EvalReport score_predictions(const MetricSchema& schema, const NormStats& stats,
                                           const Tensor& truth_z, const Tensor& predicted_z,
                                           std::vector<bool> included);

/// `known_prefix_len` true metrics (layout order) are supplied in rollout mode
/// and excluded from the scores.
[[nodiscard]] EvalReport evaluate(const SurrogateCheckpoint& ckpt, const Dataset& test,
                                  EvalMode mode = EvalMode::Rollout,
                                  std::size_t known_prefix_len = 0);
[[nodiscard]] EvalReport evaluate(const FCEnsemble& ensemble, const Dataset& test);

/// Schema-order normalized predictions of the surrogate on `test`.
[[nodiscard]] Tensor predict_z(const SurrogateCheckpoint& ckpt, const Dataset& test,
                               EvalMode mode, std::size_t known_prefix_len);

/// Metric order by class (DC, AC, transient), ties by schema position, with
/// every derived metric after its sources. Throws std::invalid_argument on an
/// unknown source or a dependency cycle.
[[nodiscard]] std::vector<std::size_t> order_metrics(const MetricSchema& schema);

// Report emission -------------------------------------------------------------

void write_history_csv(const TrainHistory& history, std::ostream& out);
/// Column header matching write_eval_csv_rows: one row per metric, then an aggregate row.
[[nodiscard]] std::string eval_csv_header();
void write_eval_csv_rows(const EvalReport& report, std::ostream& out);
void print_eval_table(const EvalReport& report, std::ostream& out);

}  // namespace insight
