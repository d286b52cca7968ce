#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "insight/circuits.hpp"
#include "insight/data.hpp"
#include "insight/fom.hpp"
#include "insight/model.hpp"
#include "insight/optim.hpp"
#include "insight/train.hpp"

namespace insight {

/// Raised when a real simulation is requested after the budget is spent.
class BudgetExhausted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SizingTask {
    std::string topology;
    std::string technology;
    FoMSpec fom;
    std::vector<std::size_t> grid_points;  // per parameter; empty uses each parameter's step
    std::vector<std::size_t> start;        // grid indices; empty is the centre of the grid
    std::size_t budget = 1000;             // real simulations
    std::uint64_t seed = 0;

    [[nodiscard]] const CircuitTopology& circuit() const;
    [[nodiscard]] std::vector<std::size_t> resolved_grid() const;
    [[nodiscard]] std::vector<std::size_t> start_indices() const;
    [[nodiscard]] DesignPoint design_at(std::span<const std::size_t> indices) const;
    /// Throws std::invalid_argument for unusable tasks.
    void validate() const;
};

/// Targets used when the configuration does not override them.
[[nodiscard]] SizingTask default_sizing_task(std::string_view topology,
                                             std::string_view technology);

// ---------------------------------------------------------------------------
// Metric sources and accounting
// ---------------------------------------------------------------------------

/// Tracks real simulations against a budget.
class RealSimCounter {
public:
    explicit RealSimCounter(std::size_t budget) : budget_(budget) {}
    /// Records one simulation; throws BudgetExhausted when none remain.
    void charge();
    [[nodiscard]] std::size_t count() const noexcept { return count_; }
    [[nodiscard]] std::size_t budget() const noexcept { return budget_; }
    [[nodiscard]] std::size_t remaining() const noexcept { return budget_ - count_; }

private:
    std::size_t budget_;
    std::size_t count_ = 0;
};

class MetricSource {
public:
    virtual ~MetricSource() = default;
    [[nodiscard]] virtual std::vector<PerformanceVector> evaluate(
        const std::vector<DesignPoint>& designs) = 0;
};

/// Behavioral oracle, one counter charge per design.
class OracleSource final : public MetricSource {
public:
    OracleSource(const SizingTask& task, RealSimCounter& counter);
    [[nodiscard]] std::vector<PerformanceVector> evaluate(
        const std::vector<DesignPoint>& designs) override;

private:
    const CircuitTopology* topology_;
    const TechnologyProfile* technology_;
    RealSimCounter* counter_;
};

/// Batched surrogate rollout with a per-design cache.
class SurrogateSource final : public MetricSource {
public:
    explicit SurrogateSource(const SurrogateCheckpoint& ckpt) : ckpt_(&ckpt) {}
    [[nodiscard]] std::vector<PerformanceVector> evaluate(
        const std::vector<DesignPoint>& designs) override;
    void clear_cache() { cache_.clear(); }

private:
    const SurrogateCheckpoint* ckpt_;
    std::map<std::vector<double>, PerformanceVector> cache_;
};

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

struct EnvConfig {
    std::size_t horizon = 40;
    double success_bonus = 10.0;
    std::size_t lanes = 16;  // parallel episodes stepped in lockstep

    void validate() const;
};

struct StepOutcome {
    double reward = 0.0;
    bool done = false;
    bool success = false;
    double fom = 0.0;  // after the move
    std::vector<std::size_t> indices;  // state reached by the move
    PerformanceVector metrics;
};

/// Grid-stepping sizing environment with `lanes` independent episodes. Every
/// lane starts at the task's start indices and restarts there as soon as its
/// episode ends. Actions are per-parameter moves in {-1, 0, +1}.
class SizingEnv {
public:
    SizingEnv(const SizingTask& task, EnvConfig config, MetricSource& source);

    [[nodiscard]] std::size_t lanes() const noexcept { return config_.lanes; }
    [[nodiscard]] std::size_t num_parameters() const noexcept { return grid_.size(); }
    [[nodiscard]] std::size_t observation_size() const noexcept;
    [[nodiscard]] const EnvConfig& config() const noexcept { return config_; }
    [[nodiscard]] bool started() const noexcept { return have_start_; }

    /// Resets every lane; evaluates the start design once per environment.
    void reset();
    /// Moves every lane; `moves` holds lanes x N entries in {-1, 0, +1}.
    std::vector<StepOutcome> step(std::span<const int> moves);

    /// Observations for all lanes [lanes x observation_size()].
    [[nodiscard]] Tensor observations() const;
    [[nodiscard]] std::span<const std::size_t> indices(std::size_t lane) const;
    [[nodiscard]] DesignPoint design(std::size_t lane) const;
    [[nodiscard]] const PerformanceVector& metrics(std::size_t lane) const;
    [[nodiscard]] double fom(std::size_t lane) const { return lanes_[lane].fom; }
    [[nodiscard]] std::size_t step_count(std::size_t lane) const { return lanes_[lane].steps; }

private:
    struct Lane {
        std::vector<std::size_t> idx;
        PerformanceVector metrics;
        double fom = 0.0;
        std::size_t steps = 0;
    };
    void restart(Lane& lane) const;

    const SizingTask* task_;
    EnvConfig config_;
    MetricSource* source_;
    std::vector<std::size_t> grid_;
    std::vector<std::size_t> start_;
    PerformanceVector start_metrics_;
    bool have_start_ = false;
    std::vector<Lane> lanes_;
};

/// Per-lane observation: grid positions scaled to [-1, 1], clipped weighted
/// constraint values, the weighted objective, and the remaining horizon.
[[nodiscard]] std::vector<double> observe(const SizingTask& task, std::span<const std::size_t> idx,
                                          std::span<const std::size_t> grid,
                                          const PerformanceVector& metrics, std::size_t steps,
                                          std::size_t horizon);

// ---------------------------------------------------------------------------
// PPO
// ---------------------------------------------------------------------------

struct PPOConfig {
    std::vector<std::size_t> hidden{64, 64};
    double clip = 0.2;
    double gamma = 0.99;
    double gae_lambda = 0.95;
    std::size_t steps_per_iteration = 512;  // transitions collected per update
    std::size_t epochs = 4;
    std::size_t minibatch = 64;
    double entropy_coef = 0.01;
    double value_coef = 0.5;
    double learning_rate = 3e-4;
    double max_grad_norm = 0.5;

    void validate() const;
};

/// Tanh multilayer perceptron with a linear output layer.
class TanhMLP {
public:
    TanhMLP() = default;
    TanhMLP(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t outputs,
            std::uint64_t seed, double output_scale, std::string name);

    struct Cache {
        std::vector<Tensor> inputs;
    };
    [[nodiscard]] Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
    /// Accumulates parameter gradients for upstream gradient `dy`.
    void backward(const Cache& cache, const Tensor& dy);
    [[nodiscard]] ParameterList parameters();

    std::vector<Linear> layers;
};

/// Factored categorical policy over {-1, 0, +1} per parameter plus a value head.
class Policy {
public:
    Policy() = default;
    Policy(std::size_t observation_size, std::size_t num_parameters, const PPOConfig& config,
           std::uint64_t seed);

    [[nodiscard]] std::size_t num_parameters() const noexcept { return num_parameters_; }
    /// Logits [B x 3N]; group g occupies columns 3g..3g+2 for moves -1, 0, +1.
    [[nodiscard]] Tensor logits(const Tensor& obs, TanhMLP::Cache* cache = nullptr) const;
    [[nodiscard]] Tensor values(const Tensor& obs, TanhMLP::Cache* cache = nullptr) const;

    /// Samples choices (0, 1, 2 per parameter) for every row; returns log-probabilities.
    std::vector<double> sample(const Tensor& obs, std::mt19937_64& rng,
                               std::vector<int>& choices) const;
    /// Most likely choice per parameter for every row.
    [[nodiscard]] std::vector<int> greedy(const Tensor& obs) const;

    TanhMLP actor;
    TanhMLP critic;

private:
    std::size_t num_parameters_ = 0;
};

/// Sum over parameter groups of log pi(choice) for each row of `logits`.
[[nodiscard]] std::vector<double> log_probabilities(const Tensor& logits,
                                                    std::span<const int> choices,
                                                    std::size_t num_parameters);

/// Clipped surrogate objective (negated, averaged over rows) minus the entropy
/// bonus. Writes d(loss)/d(logits) into `grad` when non-null.
[[nodiscard]] double ppo_policy_loss(const Tensor& logits, std::span<const int> choices,
                                     std::span<const double> old_log_probs,
                                     std::span<const double> advantages, double clip,
                                     double entropy_coef, std::size_t num_parameters,
                                     Tensor* grad);

/// Generalized advantage estimates and bootstrapped returns for one lane.
/// `dones[t]` marks the last step of an episode; `last_value` bootstraps a
/// trajectory cut before it finished.
void compute_gae(std::span<const double> rewards, std::span<const double> values,
                 std::span<const std::uint8_t> dones, double last_value, double gamma,
                 double lambda, std::span<double> advantages, std::span<double> returns);

struct PPOIterationStats {
    std::size_t episodes = 0;
    std::size_t successes = 0;
    double mean_return = 0.0;            // over episodes finished this iteration
    std::size_t first_success_step = 0;  // 1-based transition index; 0 if none
    std::vector<std::size_t> success_indices;
    PerformanceVector success_metrics;
};

/// Collects transitions from the environment and applies clipped updates.
class PPOTrainer {
public:
    PPOTrainer(Policy& policy, PPOConfig config, std::uint64_t seed);

    /// One rollout collection plus update. `stop_on_success` ends collection
    /// at the first successful transition (used when steps cost real simulations).
    PPOIterationStats iterate(SizingEnv& env, bool stop_on_success = false);

private:
    Policy* policy_;
    PPOConfig config_;
    std::mt19937_64 rng_;
    Adam actor_opt_;
    Adam critic_opt_;
    const SizingEnv* env_ = nullptr;
    std::vector<double> running_;  // return so far of each lane's current episode
};

struct SurrogatePPOResult {
    Policy policy;
    std::vector<PPOIterationStats> iterations;
};

/// Policy trained entirely inside the surrogate.
[[nodiscard]] SurrogatePPOResult ppo_train_in_surrogate(const SizingTask& task,
                                                        const SurrogateCheckpoint& ckpt,
                                                        const PPOConfig& ppo,
                                                        const EnvConfig& env,
                                                        std::size_t iterations);

/// Mean episodic return of `policy` (sampled) or of uniform random moves
/// (when `policy` is null) over `episodes` episodes from the start state.
[[nodiscard]] double mean_episode_return(const SizingTask& task, MetricSource& source,
                                         const EnvConfig& env, const Policy* policy,
                                         std::size_t episodes, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Sizing runs
// ---------------------------------------------------------------------------

/// Fine-tuning schedule used inside the sizing loop.
[[nodiscard]] TrainRunConfig default_sizing_finetune();

struct InsightMConfig {
    std::size_t initial_iterations = 30;  // PPO iterations before the first real check
    std::size_t refresh_iterations = 10;  // per later round
    std::size_t candidate_episodes = 32;  // sampled trajectories scored per round
    double ucb_beta = 0.0;
    double pretrain_ratio = 4.0;  // pre-training rows per replay row in fine-tuning
    bool finetune_on_failure = true;
    double fom_tolerance = 0.05;  // fine-tune when |surrogate - real| FoM exceeds this
    TrainRunConfig finetune = default_sizing_finetune();
    EnvConfig env;

    void validate() const;
};

struct SizingResult {
    bool success = false;
    std::size_t real_simulations = 0;
    DesignPoint final_design;
    PerformanceVector final_metrics;
    std::vector<double> fom_trace;  // real FoM per real simulation
    std::size_t finetune_rounds = 0;
    std::size_t rounds = 0;
    std::vector<std::string> log;  // JSON lines
};

/// UCB score: FoM of the metrics shifted by beta * spread toward the
/// favourable side of each constrained or objective metric (normalized space).
[[nodiscard]] double ucb_score(const SizingTask& task, const SurrogateCheckpoint& ckpt,
                               const SurrogateCheckpoint::Uncertain& prediction, double beta);

/// Model-based sizing: anchor simulation, then rounds of surrogate PPO, one
/// real check of the best endpoint, and fine-tuning on the replay buffer mixed
/// with pre-training rows. `pretrain` may be null.
[[nodiscard]] SizingResult insight_m_run(const SizingTask& task, const SurrogateCheckpoint& ckpt,
                                         const PPOConfig& ppo, const InsightMConfig& knobs,
                                         const Dataset* pretrain);

/// PPO directly on the oracle; every environment step is one real simulation.
/// Stops at the first successful step or when the budget is spent.
[[nodiscard]] SizingResult pure_ppo_baseline(const SizingTask& task, const PPOConfig& ppo,
                                             const EnvConfig& env);

/// Human-readable summary of a result.
[[nodiscard]] std::string format_sizing_result(const SizingTask& task, const SizingResult& r);

}  // namespace insight
