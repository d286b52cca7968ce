#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "insight/circuits.hpp"
#include "insight/data.hpp"
#include "insight/grad_check.hpp"
#include "insight/ops.hpp"

namespace insight {

/// Architecture of the decoder-only surrogate.
struct InsightConfig {
    std::size_t d_model = 76;
    std::size_t heads = 4;
    std::size_t layers = 3;
    std::size_t ff_multiplier = 4;
    std::size_t output_heads = 5;  // K scalar heads on the shared trunk
    double init_std = 0.02;
    double layer_norm_epsilon = 1e-5;
    double dropout = 0.0;  // only 0 is supported

    [[nodiscard]] std::size_t ff_width() const noexcept { return ff_multiplier * d_model; }
    /// Throws std::invalid_argument for unusable settings.
    void validate() const;
    friend bool operator==(const InsightConfig&, const InsightConfig&) = default;
};

/// Token layout [x_1..x_N, y_o(1)..y_o(M-1)]; the prediction for the i-th
/// metric in `order` is read at position N-1+i.
struct SequenceLayout {
    std::size_t num_parameters = 0;
    std::size_t num_metrics = 0;
    std::vector<std::size_t> order;  // schema index of each sequence slot

    [[nodiscard]] static SequenceLayout identity(std::size_t n, std::size_t m);
    [[nodiscard]] std::size_t sequence_length() const noexcept {
        return num_parameters + num_metrics - 1;
    }
    [[nodiscard]] std::size_t max_length() const noexcept { return num_parameters + num_metrics; }
    [[nodiscard]] std::size_t prediction_position(std::size_t i) const noexcept {
        return num_parameters - 1 + i;
    }
    /// Throws std::invalid_argument unless `order` is a permutation of 0..M-1.
    void validate() const;
    friend bool operator==(const SequenceLayout&, const SequenceLayout&) = default;
};

struct TransformerBlock {
    LayerNorm ln1;
    CausalSelfAttention attn;
    LayerNorm ln2;
    Linear ff1;
    Linear ff2;
};

/// Intermediate values of one forward pass needed by backward().
struct ForwardCache {
    std::size_t batch = 0;
    Tensor tokens;  // [B x T]
    struct Block {
        Tensor input;
        LayerNormCache ln1;
        Tensor ln1_out;
        AttentionCache attn;
        Tensor mid;
        LayerNormCache ln2;
        Tensor ln2_out;
        Tensor ff_pre;
        Tensor ff_act;
    };
    std::vector<Block> blocks;
    Tensor trunk;  // output of the last block
    LayerNormCache final_ln;
    Tensor gathered;  // final-norm rows at prediction positions [B*M x d]
    Tensor heads;     // [B*M x K]
};

/// Normalized-space output of a teacher-forced pass on one sample.
struct TeacherForcedOutput {
    std::vector<double> predictions;  // head mean per sequence slot, length M
    double loss = 0.0;
};

/// Per-slot mean and spread across output heads.
struct UncertainOutput {
    std::vector<double> mean;
    std::vector<double> stddev;
};

/// Decoder-only transformer over scalar tokens. Works entirely in normalized
/// space and in layout (sequence-slot) order.
class InsightModel {
public:
    InsightModel() = default;
    InsightModel(InsightConfig config, SequenceLayout layout, std::uint64_t seed);

    [[nodiscard]] const InsightConfig& config() const noexcept { return config_; }
    [[nodiscard]] const SequenceLayout& layout() const noexcept { return layout_; }

    /// All learned tensors in a fixed order.
    [[nodiscard]] ParameterList parameters();
    [[nodiscard]] std::vector<const Parameter*> parameters() const;
    [[nodiscard]] std::size_t parameter_count() const;

    /// Token embeddings for a design and a metric prefix (layout order). The
    /// result has N + min(k, M-1) rows.
    [[nodiscard]] Tensor embed_sequence(std::span<const double> design_z,
                                        std::span<const double> prefix_z) const;

    /// Head outputs [B*M x K] for token rows [B x T] where T = N+M-1.
    [[nodiscard]] Tensor forward(const Tensor& tokens, ForwardCache* cache = nullptr) const;

    /// Mean squared error over samples, slots and heads.
    [[nodiscard]] double loss(const Tensor& heads, const Tensor& targets) const;

    /// Accumulates parameter gradients of loss() for the cached pass.
    void backward(const ForwardCache& cache, const Tensor& targets);

    /// Forward pass from block `first` onward given that block's input rows.
    [[nodiscard]] Tensor forward_from(std::size_t first, const Tensor& block_input,
                                      std::size_t batch) const;

    [[nodiscard]] TeacherForcedOutput teacher_forced(std::span<const double> design_z,
                                                     std::span<const double> target_z) const;

    /// Greedy autoregression. The first k slots are echoed from `known_z`, the
    /// remaining head means are fed back one slot at a time.
    [[nodiscard]] std::vector<double> rollout(std::span<const double> design_z,
                                              std::span<const double> known_z) const;

    /// Same feedback path as rollout(), also reporting the spread across heads.
    /// Known slots carry zero spread.
    [[nodiscard]] UncertainOutput rollout_with_uncertainty(std::span<const double> design_z,
                                                           std::span<const double> known_z) const;

    /// Batched rollout over rows of `designs_z` [B x N] with `known_z` [B x k].
    /// Returns head means [B x M] and, when requested, head spreads.
    [[nodiscard]] Tensor rollout_batch(const Tensor& designs_z, const Tensor& known_z,
                                       Tensor* stddev = nullptr) const;

    /// Builds token rows [B x T] from designs [B x N] and targets [B x M].
    [[nodiscard]] Tensor teacher_tokens(const Tensor& designs_z, const Tensor& targets_z) const;

    // Learned tensors, public for tests and the gradient checker.
    Linear lift;         // 1 -> d
    Parameter position;  // [N+M x d]
    std::vector<TransformerBlock> blocks;
    LayerNorm final_norm;
    Linear head;  // d -> K

private:
    Tensor run_blocks(std::size_t first, Tensor x, std::size_t batch, ForwardCache* cache) const;
    Tensor finish(const Tensor& trunk, std::size_t batch, ForwardCache* cache) const;
    UncertainOutput decode(std::span<const double> design_z, std::span<const double> known_z,
                           bool want_spread) const;

    InsightConfig config_;
    SequenceLayout layout_;
};

/// Central-difference check of every model tensor against backward() for the
/// teacher-forced loss on `tokens` / `targets`.
[[nodiscard]] GradCheckReport grad_check_model(InsightModel& model, const Tensor& tokens,
                                               const Tensor& targets,
                                               const GradCheckOptions& options = {});

/// A trained surrogate bound to its topology, technology and normalization.
class SurrogateCheckpoint {
public:
    static constexpr std::uint32_t kFormatVersion = 1;

    std::string topology;
    std::string technology;
    std::vector<ParameterSpec> parameters;
    MetricSchema schema;
    NormStats stats;
    InsightModel model;
    std::map<std::string, std::string> metadata;

    [[nodiscard]] const SequenceLayout& layout() const noexcept { return model.layout(); }

    /// Normalized targets for a performance vector, in layout order.
    [[nodiscard]] std::vector<double> targets_z(const PerformanceVector& perf) const;

    /// Full metric vector in schema order. `known_prefix` holds raw values of
    /// the first k metrics in layout order.
    [[nodiscard]] PerformanceVector rollout(const DesignPoint& design,
                                            std::span<const double> known_prefix = {}) const;

    struct Uncertain {
        PerformanceVector mean;      // schema order, raw units
        std::vector<double> mean_z;  // schema order, normalized
        std::vector<double> std_z;   // schema order, normalized
    };
    [[nodiscard]] Uncertain rollout_with_uncertainty(const DesignPoint& design,
                                                     std::span<const double> known_prefix = {}) const;

    /// Teacher-forced predictions (raw units, schema order) and normalized loss.
    [[nodiscard]] std::pair<PerformanceVector, double> teacher_forced(
        const DesignPoint& design, const PerformanceVector& target) const;

    /// Designs [B x N] and targets [B x M] of a dataset in model space.
    [[nodiscard]] Tensor design_matrix(const Dataset& data) const;
    [[nodiscard]] Tensor target_matrix(const Dataset& data) const;

    /// Throws std::invalid_argument if `data` does not match this checkpoint.
    void check_compatible(const Dataset& data) const;
};

/// Fresh, untrained checkpoint for `data` (stats fitted on all its rows).
[[nodiscard]] SurrogateCheckpoint make_checkpoint(const Dataset& train, const InsightConfig& config,
                                                  std::vector<std::size_t> metric_order,
                                                  std::uint64_t seed);

void save_checkpoint(const SurrogateCheckpoint& ckpt, std::ostream& out);
void save_checkpoint(const SurrogateCheckpoint& ckpt, const std::string& path);
[[nodiscard]] SurrogateCheckpoint load_checkpoint(std::istream& in);
[[nodiscard]] SurrogateCheckpoint load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Fully connected ensemble baseline
// ---------------------------------------------------------------------------

struct FCEnsembleConfig {
    std::vector<std::size_t> hidden{200, 200, 200, 200, 200};
    std::size_t members = 7;
    double learning_rate = 1e-3;
    friend bool operator==(const FCEnsembleConfig&, const FCEnsembleConfig&) = default;
};

/// ReLU multilayer perceptron mapping N normalized parameters to M metrics.
class FCNet {
public:
    FCNet() = default;
    FCNet(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t outputs,
          std::uint64_t seed, std::string name = "fc");

    struct Cache {
        std::vector<Tensor> inputs;  // input of every layer
    };
    [[nodiscard]] Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
    /// Accumulates gradients of mean squared error against `targets`.
    void backward(const Cache& cache, const Tensor& output, const Tensor& targets);
    [[nodiscard]] ParameterList parameters();
    [[nodiscard]] std::vector<const Parameter*> parameters() const;

    std::vector<Linear> layers;
};

struct EnsemblePrediction {
    PerformanceVector mean;      // raw units, schema order
    std::vector<double> mean_z;  // normalized
    std::vector<double> std_z;   // normalized spread across members
};

class FCEnsemble {
public:
    std::string topology;
    std::string technology;
    std::vector<ParameterSpec> parameters;
    MetricSchema schema;
    NormStats stats;
    FCEnsembleConfig config;
    std::vector<FCNet> members;
    std::map<std::string, std::string> metadata;

    /// Normalized member-mean predictions [B x M] for normalized designs [B x N].
    [[nodiscard]] Tensor predict_z(const Tensor& designs_z, Tensor* stddev = nullptr) const;
    [[nodiscard]] EnsemblePrediction predict(const DesignPoint& design) const;
};

[[nodiscard]] FCEnsemble make_fc_ensemble(const Dataset& train, const FCEnsembleConfig& config,
                                          std::uint64_t seed);

void save_fc_ensemble(const FCEnsemble& ens, std::ostream& out);
void save_fc_ensemble(const FCEnsemble& ens, const std::string& path);
[[nodiscard]] FCEnsemble load_fc_ensemble(std::istream& in);
[[nodiscard]] FCEnsemble load_fc_ensemble(const std::string& path);

}  // namespace insight
