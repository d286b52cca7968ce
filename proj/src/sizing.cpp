#include "insight/sizing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "insight/optim.hpp"
#include "insight/seeding.hpp"
#include "json.hpp"

namespace insight {

namespace {

using json = nlohmann::json;

constexpr int kChoices = 3;  // moves -1, 0, +1

void require(bool ok, const std::string& message) {
    if (!ok) throw std::invalid_argument(message);
}

Constraint at_least(const MetricSchema& s, std::string_view name, double threshold) {
    return {*s.index_of(name), ConstraintSense::AtLeast, threshold, 1.0 / std::abs(threshold)};
}

Constraint at_most(const MetricSchema& s, std::string_view name, double threshold) {
    return {*s.index_of(name), ConstraintSense::AtMost, threshold, 1.0 / std::abs(threshold)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Task
// ---------------------------------------------------------------------------

const CircuitTopology& SizingTask::circuit() const { return insight::topology(topology); }

std::vector<std::size_t> SizingTask::resolved_grid() const {
    const auto& params = circuit().parameters;
    if (grid_points.empty()) {
        std::vector<std::size_t> out;
        for (const auto& p : params) out.push_back(p.grid_points());
        return out;
    }
    return grid_points;
}

std::vector<std::size_t> SizingTask::start_indices() const {
    if (!start.empty()) return start;
    std::vector<std::size_t> out;
    for (std::size_t points : resolved_grid()) out.push_back((points - 1) / 2);
    return out;
}

DesignPoint SizingTask::design_at(std::span<const std::size_t> indices) const {
    const auto& params = circuit().parameters;
    const auto grid = resolved_grid();
    require(indices.size() == params.size(), "grid index vector has the wrong length");
    DesignPoint d;
    for (std::size_t j = 0; j < params.size(); ++j) {
        const auto& p = params[j];
        require(indices[j] < grid[j], "grid index out of range for '" + p.name + "'");
        if (grid[j] == p.grid_points()) {
            d.values.push_back(p.grid_value(indices[j]));
        } else {
            const double t = static_cast<double>(indices[j]) / static_cast<double>(grid[j] - 1);
            d.values.push_back(std::clamp(p.lower + t * p.range(), p.lower, p.upper));
        }
    }
    return d;
}

void SizingTask::validate() const {
    const auto& topo = circuit();
    (void)insight::technology(technology);
    require(budget >= 1, "sizing budget must be at least 1");
    fom.validate(topo.num_metrics());
    require(grid_points.empty() || grid_points.size() == topo.num_parameters(),
            "grid needs one point count per parameter");
    for (std::size_t points : grid_points) require(points >= 2, "grid needs at least 2 points");
    const auto grid = resolved_grid();
    if (!start.empty()) {
        require(start.size() == topo.num_parameters(), "start needs one index per parameter");
        for (std::size_t j = 0; j < start.size(); ++j) {
            require(start[j] < grid[j], "start index out of range");
        }
    }
}

SizingTask default_sizing_task(std::string_view topology_name, std::string_view technology_name) {
    SizingTask t;
    t.topology = std::string(topology_name);
    t.technology = std::string(technology_name);
    const MetricSchema& s = insight::topology(topology_name).schema;
    auto amplifier = [&](double iq, double gain, double ugbw, double pm) {
        t.fom.constraints = {at_most(s, "iq", iq), at_least(s, "dc_gain", gain),
                             at_least(s, "ugbw", ugbw), at_least(s, "phase_margin", pm)};
    };
    if (topology_name == "ota2_nmos") {
        amplifier(0.6, 58.0, 90.0, 60.0);
    } else if (topology_name == "ota2_pmos") {
        amplifier(0.6, 58.0, 60.0, 75.0);
    } else if (topology_name == "tia2") {
        amplifier(0.5, 90.0, 330.0, 55.0);
    } else if (topology_name == "tia3") {
        amplifier(0.8, 90.0, 70.0, 58.0);
    } else if (topology_name == "comparator") {
        t.fom.constraints = {at_most(s, "dc_power", 3e-4), at_most(s, "avg_delay", 3e-10)};
    } else if (topology_name == "level_shifter") {
        t.fom.constraints = {at_most(s, "dc_power", 4.4e-5), at_least(s, "ratio", 0.93),
                             at_most(s, "avg_delay", 4.5e-10),
                             at_most(s, "delay_balance", 1.0e-10)};
    } else {
        throw std::invalid_argument("no default sizing task for topology '" +
                                    std::string(topology_name) + "'");
    }
    t.validate();
    return t;
}

// ---------------------------------------------------------------------------
// Sources
// ---------------------------------------------------------------------------

void RealSimCounter::charge() {
    if (count_ >= budget_) {
        throw BudgetExhausted("real-simulation budget of " + std::to_string(budget_) +
                              " exhausted");
    }
    ++count_;
}

OracleSource::OracleSource(const SizingTask& task, RealSimCounter& counter)
    : topology_(&task.circuit()),
      technology_(&insight::technology(task.technology)),
      counter_(&counter) {}

std::vector<PerformanceVector> OracleSource::evaluate(const std::vector<DesignPoint>& designs) {
    std::vector<PerformanceVector> out;
    out.reserve(designs.size());
    for (const auto& d : designs) {
        counter_->charge();
        out.push_back(evaluate_oracle(*topology_, *technology_, d));
    }
    return out;
}

std::vector<PerformanceVector> SurrogateSource::evaluate(const std::vector<DesignPoint>& designs) {
    std::vector<std::size_t> missing;
    for (std::size_t i = 0; i < designs.size(); ++i) {
        if (!cache_.contains(designs[i].values)) missing.push_back(i);
    }
    if (!missing.empty()) {
        const std::size_t n = ckpt_->layout().num_parameters;
        Tensor x = Tensor::matrix(missing.size(), n);
        for (std::size_t r = 0; r < missing.size(); ++r) {
            const auto z = ckpt_->stats.normalize_design(designs[missing[r]]);
            std::copy(z.begin(), z.end(), x.row(r).begin());
        }
        const Tensor means = ckpt_->model.rollout_batch(x, Tensor());
        const auto& order = ckpt_->layout().order;
        std::vector<double> z(order.size());
        for (std::size_t r = 0; r < missing.size(); ++r) {
            for (std::size_t i = 0; i < order.size(); ++i) z[order[i]] = means(r, i);
            cache_[designs[missing[r]].values] = ckpt_->stats.denormalize_performance(z);
        }
    }
    std::vector<PerformanceVector> out;
    out.reserve(designs.size());
    for (const auto& d : designs) out.push_back(cache_.at(d.values));
    return out;
}

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

void EnvConfig::validate() const {
    require(horizon >= 1, "episode horizon must be at least 1");
    require(lanes >= 1, "environment needs at least one lane");
    require(std::isfinite(success_bonus) && success_bonus >= 0.0,
            "success bonus must be finite and non-negative");
}

std::vector<double> observe(const SizingTask& task, std::span<const std::size_t> idx,
                            std::span<const std::size_t> grid, const PerformanceVector& metrics,
                            std::size_t steps, std::size_t horizon) {
    std::vector<double> obs;
    obs.reserve(idx.size() + task.fom.constraints.size() + 2);
    for (std::size_t j = 0; j < idx.size(); ++j) {
        obs.push_back(2.0 * static_cast<double>(idx[j]) / static_cast<double>(grid[j] - 1) - 1.0);
    }
    for (const auto& c : task.fom.constraints) {
        obs.push_back(std::clamp(c.weight * c.value(metrics), -2.0, 2.0));
    }
    if (task.fom.objective) {
        obs.push_back(std::clamp(task.fom.objective_weight * objective_value(task.fom, metrics),
                                 -5.0, 5.0));
    }
    obs.push_back(static_cast<double>(horizon - steps) / static_cast<double>(horizon));
    return obs;
}

SizingEnv::SizingEnv(const SizingTask& task, EnvConfig config, MetricSource& source)
    : task_(&task), config_(config), source_(&source) {
    task.validate();
    config_.validate();
    grid_ = task.resolved_grid();
    start_ = task.start_indices();
    lanes_.resize(config_.lanes);
}

std::size_t SizingEnv::observation_size() const noexcept {
    return grid_.size() + task_->fom.constraints.size() + (task_->fom.objective ? 1 : 0) + 1;
}

void SizingEnv::restart(Lane& lane) const {
    lane.idx = start_;
    lane.metrics = start_metrics_;
    lane.fom = insight::fom(task_->fom, start_metrics_);
    lane.steps = 0;
}

void SizingEnv::reset() {
    if (!have_start_) {
        start_metrics_ = source_->evaluate({task_->design_at(start_)}).front();
        have_start_ = true;
    }
    for (auto& lane : lanes_) restart(lane);
}

std::vector<StepOutcome> SizingEnv::step(std::span<const int> moves) {
    if (!have_start_) reset();
    const std::size_t n = grid_.size();
    if (moves.size() != lanes_.size() * n) {
        throw std::invalid_argument("step needs lanes x parameters moves");
    }
    std::vector<std::vector<std::size_t>> next(lanes_.size());
    std::vector<DesignPoint> designs;
    designs.reserve(lanes_.size());
    for (std::size_t l = 0; l < lanes_.size(); ++l) {
        next[l] = lanes_[l].idx;
        for (std::size_t j = 0; j < n; ++j) {
            const int m = moves[l * n + j];
            if (m < -1 || m > 1) throw std::invalid_argument("moves must be -1, 0 or +1");
            if (m < 0 && next[l][j] > 0) --next[l][j];
            if (m > 0 && next[l][j] + 1 < grid_[j]) ++next[l][j];
        }
        designs.push_back(task_->design_at(next[l]));
    }
    auto metrics = source_->evaluate(designs);
    std::vector<StepOutcome> out(lanes_.size());
    for (std::size_t l = 0; l < lanes_.size(); ++l) {
        Lane& lane = lanes_[l];
        StepOutcome& o = out[l];
        o.fom = insight::fom(task_->fom, metrics[l]);
        o.success = constraints_met(task_->fom, metrics[l]);
        o.reward = lane.fom - o.fom + (o.success ? config_.success_bonus : 0.0);
        lane.idx = next[l];
        lane.metrics = std::move(metrics[l]);
        lane.fom = o.fom;
        ++lane.steps;
        o.done = o.success || lane.steps >= config_.horizon;
        o.indices = lane.idx;
        o.metrics = lane.metrics;
        if (o.done) restart(lane);
    }
    return out;
}

Tensor SizingEnv::observations() const {
    if (!have_start_) throw std::logic_error("environment observed before reset()");
    Tensor obs = Tensor::matrix(lanes_.size(), observation_size());
    for (std::size_t l = 0; l < lanes_.size(); ++l) {
        const auto row = observe(*task_, lanes_[l].idx, grid_, lanes_[l].metrics, lanes_[l].steps,
                                 config_.horizon);
        std::copy(row.begin(), row.end(), obs.row(l).begin());
    }
    return obs;
}

std::span<const std::size_t> SizingEnv::indices(std::size_t lane) const { return lanes_[lane].idx; }

DesignPoint SizingEnv::design(std::size_t lane) const { return task_->design_at(lanes_[lane].idx); }

const PerformanceVector& SizingEnv::metrics(std::size_t lane) const {
    return lanes_[lane].metrics;
}

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

void PPOConfig::validate() const {
    require(clip > 0.0 && clip < 1.0, "clip ratio must lie in (0, 1)");
    require(gamma > 0.0 && gamma <= 1.0, "discount must lie in (0, 1]");
    require(gae_lambda >= 0.0 && gae_lambda <= 1.0, "GAE lambda must lie in [0, 1]");
    require(steps_per_iteration >= 1 && epochs >= 1 && minibatch >= 1,
            "PPO batch sizes must be positive");
    require(learning_rate > 0.0, "PPO learning rate must be positive");
    require(entropy_coef >= 0.0 && value_coef >= 0.0, "PPO loss coefficients must be >= 0");
}

TanhMLP::TanhMLP(std::size_t inputs, const std::vector<std::size_t>& hidden, std::size_t outputs,
                 std::uint64_t seed, double output_scale, std::string name) {
    std::mt19937_64 rng(seed);
    std::size_t in = inputs;
    for (std::size_t i = 0; i <= hidden.size(); ++i) {
        const std::size_t out = i < hidden.size() ? hidden[i] : outputs;
        layers.emplace_back(name + ".l" + std::to_string(i), in, out);
        const double scale = i < hidden.size() ? 1.0 : output_scale;
        layers.back().init_normal(rng, scale / std::sqrt(static_cast<double>(in)));
        layers.back().bias.value.fill(0.0);
        in = out;
    }
}

Tensor TanhMLP::forward(const Tensor& x, Cache* cache) const {
    if (cache) cache->inputs.clear();
    Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (cache) cache->inputs.push_back(h);
        h = layers[i].forward(h);
        if (i + 1 < layers.size()) h = insight::tanh(h);
    }
    return h;
}

void TanhMLP::backward(const Cache& cache, const Tensor& dy) {
    Tensor d = dy;
    for (std::size_t i = layers.size(); i-- > 0;) {
        d = layers[i].backward(cache.inputs[i], d);
        if (i > 0) d = tanh_backward(cache.inputs[i], d);
    }
}

ParameterList TanhMLP::parameters() {
    ParameterList out;
    for (auto& l : layers) l.collect(out);
    return out;
}

Policy::Policy(std::size_t observation_size, std::size_t num_parameters, const PPOConfig& config,
               std::uint64_t seed)
    : actor(observation_size, config.hidden, kChoices * num_parameters, derive_seed(seed, 0), 0.01,
            "actor"),
      critic(observation_size, config.hidden, 1, derive_seed(seed, 1), 1.0, "critic"),
      num_parameters_(num_parameters) {}

Tensor Policy::logits(const Tensor& obs, TanhMLP::Cache* cache) const {
    return actor.forward(obs, cache);
}

Tensor Policy::values(const Tensor& obs, TanhMLP::Cache* cache) const {
    return critic.forward(obs, cache);
}

namespace {

/// Softmax over one group of three logits.
void group_softmax(const double* z, double* p) {
    const double mx = std::max({z[0], z[1], z[2]});
    double s = 0.0;
    for (int k = 0; k < kChoices; ++k) s += (p[k] = std::exp(z[k] - mx));
    for (int k = 0; k < kChoices; ++k) p[k] /= s;
}

}  // namespace

std::vector<double> Policy::sample(const Tensor& obs, std::mt19937_64& rng,
                                   std::vector<int>& choices) const {
    const Tensor z = logits(obs);
    const std::size_t n = num_parameters_;
    choices.assign(obs.rows() * n, 1);
    std::vector<double> logp(obs.rows(), 0.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double p[kChoices];
    for (std::size_t r = 0; r < obs.rows(); ++r) {
        for (std::size_t g = 0; g < n; ++g) {
            group_softmax(z.row(r).data() + kChoices * g, p);
            const double draw = u(rng);
            int k = 0;
            double acc = p[0];
            while (k + 1 < kChoices && draw >= acc) acc += p[++k];
            choices[r * n + g] = k;
            logp[r] += std::log(p[k]);
        }
    }
    return logp;
}

std::vector<int> Policy::greedy(const Tensor& obs) const {
    const Tensor z = logits(obs);
    const std::size_t n = num_parameters_;
    std::vector<int> choices(obs.rows() * n);
    for (std::size_t r = 0; r < obs.rows(); ++r) {
        for (std::size_t g = 0; g < n; ++g) {
            const double* row = z.row(r).data() + kChoices * g;
            choices[r * n + g] = static_cast<int>(std::max_element(row, row + kChoices) - row);
        }
    }
    return choices;
}

std::vector<double> log_probabilities(const Tensor& logits, std::span<const int> choices,
                                      std::size_t n) {
    std::vector<double> out(logits.rows(), 0.0);
    double p[kChoices];
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        for (std::size_t g = 0; g < n; ++g) {
            group_softmax(logits.row(r).data() + kChoices * g, p);
            out[r] += std::log(p[choices[r * n + g]]);
        }
    }
    return out;
}

double ppo_policy_loss(const Tensor& logits, std::span<const int> choices,
                       std::span<const double> old_log_probs, std::span<const double> advantages,
                       double clip, double entropy_coef, std::size_t n, Tensor* grad) {
    const std::size_t rows = logits.rows();
    if (logits.cols() != kChoices * n || choices.size() != rows * n ||
        old_log_probs.size() != rows || advantages.size() != rows) {
        throw std::invalid_argument("ppo_policy_loss: inconsistent batch shapes");
    }
    if (grad) *grad = Tensor::matrix(rows, logits.cols());
    const double inv = 1.0 / static_cast<double>(rows);
    double loss = 0.0;
    std::vector<double> p(kChoices * n);
    for (std::size_t r = 0; r < rows; ++r) {
        double logp = 0.0, entropy = 0.0;
        std::vector<double> group_entropy(n);
        for (std::size_t g = 0; g < n; ++g) {
            group_softmax(logits.row(r).data() + kChoices * g, &p[kChoices * g]);
            logp += std::log(p[kChoices * g + choices[r * n + g]]);
            double h = 0.0;
            for (int k = 0; k < kChoices; ++k) {
                const double pk = p[kChoices * g + k];
                if (pk > 0.0) h -= pk * std::log(pk);
            }
            group_entropy[g] = h;
            entropy += h;
        }
        const double ratio = std::exp(logp - old_log_probs[r]);
        const double a = advantages[r];
        const double unclipped = ratio * a;
        const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip) * a;
        loss += (-std::min(unclipped, clipped) - entropy_coef * entropy) * inv;
        if (!grad) continue;
        // The clipped branch is flat in the logits, so only the unclipped one carries gradient.
        const bool binding = (a > 0.0 && ratio > 1.0 + clip) || (a < 0.0 && ratio < 1.0 - clip);
        const double dlogp = binding ? 0.0 : -a * ratio * inv;
        for (std::size_t g = 0; g < n; ++g) {
            for (int k = 0; k < kChoices; ++k) {
                const double pk = p[kChoices * g + k];
                const double onehot = choices[r * n + g] == k ? 1.0 : 0.0;
                double d = dlogp * (onehot - pk);
                if (pk > 0.0) d += entropy_coef * inv * pk * (std::log(pk) + group_entropy[g]);
                (*grad)(r, kChoices * g + k) = d;
            }
        }
    }
    return loss;
}

void compute_gae(std::span<const double> rewards, std::span<const double> values,
                 std::span<const std::uint8_t> dones, double last_value, double gamma,
                 double lambda, std::span<double> advantages, std::span<double> returns) {
    const std::size_t t_max = rewards.size();
    double gae = 0.0;
    for (std::size_t t = t_max; t-- > 0;) {
        const double next = t + 1 < t_max ? values[t + 1] : last_value;
        const double live = dones[t] ? 0.0 : 1.0;
        const double delta = rewards[t] + gamma * next * live - values[t];
        gae = delta + gamma * lambda * live * gae;
        advantages[t] = gae;
        returns[t] = gae + values[t];
    }
}

// ---------------------------------------------------------------------------
// PPO trainer
// ---------------------------------------------------------------------------

PPOTrainer::PPOTrainer(Policy& policy, PPOConfig config, std::uint64_t seed)
    : policy_(&policy),
      config_(std::move(config)),
      rng_(seed),
      actor_opt_(policy.actor.parameters(),
                 CosineSchedule{config_.learning_rate, config_.learning_rate, 1}),
      critic_opt_(policy.critic.parameters(),
                  CosineSchedule{config_.learning_rate, config_.learning_rate, 1}) {
    config_.validate();
}

PPOIterationStats PPOTrainer::iterate(SizingEnv& env, bool stop_on_success) {
    if (env_ != &env || !env.started()) {
        env.reset();
        env_ = &env;
        running_.assign(env.lanes(), 0.0);
    }
    const std::size_t lanes = env.lanes();
    const std::size_t n = policy_->num_parameters();
    const std::size_t steps = (config_.steps_per_iteration + lanes - 1) / lanes;
    const std::size_t obs_dim = env.observation_size();

    // Storage is [step][lane].
    std::vector<Tensor> obs;
    std::vector<std::vector<int>> choices;
    std::vector<std::vector<double>> logp, value, reward;
    std::vector<std::vector<std::uint8_t>> done;
    PPOIterationStats stats;
    double return_sum = 0.0;
    std::size_t transitions = 0;

    for (std::size_t t = 0; t < steps; ++t) {
        Tensor o = env.observations();
        std::vector<int> c;
        std::vector<double> lp = policy_->sample(o, rng_, c);
        const Tensor v = policy_->values(o);
        std::vector<int> moves(c.size());
        for (std::size_t i = 0; i < c.size(); ++i) moves[i] = c[i] - 1;
        const auto outcomes = env.step(moves);
        std::vector<double> r(lanes);
        std::vector<std::uint8_t> d(lanes);
        for (std::size_t l = 0; l < lanes; ++l) {
            ++transitions;
            r[l] = outcomes[l].reward;
            d[l] = outcomes[l].done ? 1 : 0;
            running_[l] += r[l];
            if (outcomes[l].success) {
                ++stats.successes;
                if (stats.first_success_step == 0) {
                    stats.first_success_step = transitions;
                    stats.success_indices = outcomes[l].indices;
                    stats.success_metrics = outcomes[l].metrics;
                    if (stop_on_success) return stats;
                }
            }
            if (outcomes[l].done) {
                ++stats.episodes;
                return_sum += running_[l];
                running_[l] = 0.0;
            }
        }
        obs.push_back(std::move(o));
        choices.push_back(std::move(c));
        logp.push_back(std::move(lp));
        value.push_back(std::vector<double>(v.values().begin(), v.values().end()));
        reward.push_back(std::move(r));
        done.push_back(std::move(d));
    }
    stats.mean_return = stats.episodes ? return_sum / static_cast<double>(stats.episodes) : 0.0;

    // Advantages per lane, then flatten into batch order t * lanes + l.
    const std::size_t batch = steps * lanes;
    const Tensor last = policy_->values(env.observations());
    std::vector<double> adv(batch), ret(batch);
    {
        std::vector<double> r(steps), v(steps), a(steps), g(steps);
        std::vector<std::uint8_t> d(steps);
        for (std::size_t l = 0; l < lanes; ++l) {
            for (std::size_t t = 0; t < steps; ++t) {
                r[t] = reward[t][l];
                v[t] = value[t][l];
                d[t] = done[t][l];
            }
            compute_gae(r, v, d, last[l], config_.gamma, config_.gae_lambda, a, g);
            for (std::size_t t = 0; t < steps; ++t) {
                adv[t * lanes + l] = a[t];
                ret[t * lanes + l] = g[t];
            }
        }
    }
    const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / static_cast<double>(batch);
    double var = 0.0;
    for (double a : adv) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(var / static_cast<double>(batch)) + 1e-8;
    for (double& a : adv) a = (a - mean) / sd;

    Tensor all_obs = Tensor::matrix(batch, obs_dim);
    std::vector<int> all_choices(batch * n);
    std::vector<double> all_logp(batch);
    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t l = 0; l < lanes; ++l) {
            const std::size_t i = t * lanes + l;
            std::copy(obs[t].row(l).begin(), obs[t].row(l).end(), all_obs.row(i).begin());
            std::copy_n(choices[t].begin() + static_cast<std::ptrdiff_t>(l * n), n,
                        all_choices.begin() + static_cast<std::ptrdiff_t>(i * n));
            all_logp[i] = logp[t][l];
        }
    }

    std::vector<std::size_t> order(batch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto actor_params = policy_->actor.parameters();
    auto critic_params = policy_->critic.parameters();
    for (std::size_t epoch = 0; epoch < config_.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng_);
        for (std::size_t lo = 0; lo < batch; lo += config_.minibatch) {
            const std::size_t hi = std::min(batch, lo + config_.minibatch);
            const std::size_t b = hi - lo;
            Tensor mb_obs = Tensor::matrix(b, obs_dim);
            std::vector<int> mb_choices(b * n);
            std::vector<double> mb_logp(b), mb_adv(b);
            Tensor mb_ret = Tensor::matrix(b, 1);
            for (std::size_t k = 0; k < b; ++k) {
                const std::size_t i = order[lo + k];
                std::copy(all_obs.row(i).begin(), all_obs.row(i).end(), mb_obs.row(k).begin());
                std::copy_n(all_choices.begin() + static_cast<std::ptrdiff_t>(i * n), n,
                            mb_choices.begin() + static_cast<std::ptrdiff_t>(k * n));
                mb_logp[k] = all_logp[i];
                mb_adv[k] = adv[i];
                mb_ret[k] = ret[i];
            }
            actor_opt_.zero_grad();
            TanhMLP::Cache ac;
            const Tensor z = policy_->logits(mb_obs, &ac);
            Tensor dz;
            (void)ppo_policy_loss(z, mb_choices, mb_logp, mb_adv, config_.clip,
                                  config_.entropy_coef, n, &dz);
            policy_->actor.backward(ac, dz);
            if (config_.max_grad_norm > 0.0) clip_grad_norm(actor_params, config_.max_grad_norm);
            actor_opt_.step();

            critic_opt_.zero_grad();
            TanhMLP::Cache cc;
            const Tensor v = policy_->values(mb_obs, &cc);
            Tensor dv = Tensor::matrix(b, 1);
            for (std::size_t k = 0; k < b; ++k) {
                dv[k] = 2.0 * config_.value_coef * (v[k] - mb_ret[k]) / static_cast<double>(b);
            }
            policy_->critic.backward(cc, dv);
            if (config_.max_grad_norm > 0.0) clip_grad_norm(critic_params, config_.max_grad_norm);
            critic_opt_.step();
        }
    }
    return stats;
}

SurrogatePPOResult ppo_train_in_surrogate(const SizingTask& task, const SurrogateCheckpoint& ckpt,
                                          const PPOConfig& ppo, const EnvConfig& env_config,
                                          std::size_t iterations) {
    SurrogateSource source(ckpt);
    SizingEnv env(task, env_config, source);
    SurrogatePPOResult out;
    out.policy = Policy(env.observation_size(), env.num_parameters(), ppo,
                        derive_seed(task.seed, 10));
    PPOTrainer trainer(out.policy, ppo, derive_seed(task.seed, 11));
    for (std::size_t i = 0; i < iterations; ++i) out.iterations.push_back(trainer.iterate(env));
    return out;
}

double mean_episode_return(const SizingTask& task, MetricSource& source, const EnvConfig& env_config,
                           const Policy* policy, std::size_t episodes, std::uint64_t seed) {
    SizingEnv env(task, env_config, source);
    env.reset();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> uniform(0, kChoices - 1);
    std::vector<double> running(env.lanes(), 0.0);
    double total = 0.0;
    std::size_t finished = 0;
    const std::size_t n = env.num_parameters();
    while (finished < episodes) {
        std::vector<int> c;
        if (policy) {
            (void)policy->sample(env.observations(), rng, c);
        } else {
            c.resize(env.lanes() * n);
            for (int& v : c) v = uniform(rng);
        }
        for (int& v : c) v -= 1;
        const auto outcomes = env.step(c);
        for (std::size_t l = 0; l < env.lanes(); ++l) {
            running[l] += outcomes[l].reward;
            if (outcomes[l].done) {
                if (finished < episodes) total += running[l];
                ++finished;
                running[l] = 0.0;
            }
        }
    }
    return total / static_cast<double>(episodes);
}

// ---------------------------------------------------------------------------
// Sizing runs
// ---------------------------------------------------------------------------

TrainRunConfig default_sizing_finetune() {
    TrainRunConfig r;
    r.epochs = 20;
    r.batch_size = 16;
    r.learning_rate = 3e-4;
    r.validation_fraction = 0.0;
    return r;
}

void InsightMConfig::validate() const {
    require(initial_iterations >= 1, "INSIGHT-M needs at least one initial PPO iteration");
    require(candidate_episodes >= 1, "INSIGHT-M needs at least one candidate episode");
    require(std::isfinite(ucb_beta) && ucb_beta >= 0.0, "UCB beta must be finite and >= 0");
    require(pretrain_ratio >= 0.0, "pre-training ratio must be non-negative");
    require(fom_tolerance >= 0.0, "FoM tolerance must be non-negative");
    finetune.validate();
    env.validate();
}

double ucb_score(const SizingTask& task, const SurrogateCheckpoint& ckpt,
                 const SurrogateCheckpoint::Uncertain& prediction, double beta) {
    const std::size_t m = ckpt.schema.size();
    std::vector<int> direction(m, 0);
    auto vote = [&](std::size_t j, int d) {
        direction[j] = (direction[j] == 0 || direction[j] == d) ? d : 2;
    };
    for (const auto& c : task.fom.constraints) {
        vote(c.metric, c.sense == ConstraintSense::AtLeast ? 1 : -1);
    }
    if (task.fom.objective) vote(*task.fom.objective, task.fom.minimize_objective ? -1 : 1);
    std::vector<double> z = prediction.mean_z;
    for (std::size_t j = 0; j < m; ++j) {
        // A metric pulled both ways gets no optimism.
        if (direction[j] == 1 || direction[j] == -1) {
            z[j] += beta * prediction.std_z[j] * direction[j];
        }
    }
    return fom(task.fom, ckpt.stats.denormalize_performance(z));
}

namespace {

json design_json(const DesignPoint& d) { return d.values; }

class RunRecorder {
public:
    RunRecorder(const SizingTask& task, SizingResult& result, OracleSource& real,
                RealSimCounter& counter)
        : task_(task), result_(result), real_(real), counter_(counter) {}

    PerformanceVector simulate(const DesignPoint& d, const std::string& kind,
                               std::size_t round) {
        PerformanceVector m = real_.evaluate({d}).front();
        const double f = fom(task_.fom, m);
        const bool met = constraints_met(task_.fom, m);
        result_.fom_trace.push_back(f);
        result_.real_simulations = counter_.count();
        result_.final_design = d;
        result_.final_metrics = m;
        result_.success = met;
        json rec = {{"event", "real_simulation"}, {"kind", kind},      {"round", round},
                    {"counter", counter_.count()}, {"design", design_json(d)},
                    {"metrics", m.values},        {"fom", f},          {"met", met}};
        result_.log.push_back(rec.dump());
        return m;
    }

    void note(json rec) { result_.log.push_back(rec.dump()); }

private:
    const SizingTask& task_;
    SizingResult& result_;
    OracleSource& real_;
    RealSimCounter& counter_;
};

Dataset append_rows(Dataset base, const Dataset& extra) {
    const std::size_t n = base.num_parameters();
    const std::size_t m = base.num_metrics();
    const std::size_t rows = base.size() + extra.size();
    Tensor x = Tensor::matrix(rows, n);
    Tensor y = Tensor::matrix(rows, m);
    for (std::size_t r = 0; r < rows; ++r) {
        const bool first = r < base.size();
        const Dataset& src = first ? base : extra;
        const std::size_t sr = first ? r : r - base.size();
        std::copy(src.designs.row(sr).begin(), src.designs.row(sr).end(), x.row(r).begin());
        std::copy(src.metrics.row(sr).begin(), src.metrics.row(sr).end(), y.row(r).begin());
    }
    base.designs = std::move(x);
    base.metrics = std::move(y);
    return base;
}

void push_row(Dataset& d, const DesignPoint& x, const PerformanceVector& y) {
    Dataset one = d;
    one.designs = Tensor({1, x.values.size()}, x.values);
    one.metrics = Tensor({1, y.values.size()}, y.values);
    d = append_rows(std::move(d), one);
}

}  // namespace

SizingResult insight_m_run(const SizingTask& task, const SurrogateCheckpoint& ckpt,
                           const PPOConfig& ppo, const InsightMConfig& knobs,
                           const Dataset* pretrain) {
    task.validate();
    ppo.validate();
    knobs.validate();
    if (ckpt.topology != task.topology || ckpt.schema.size() != task.circuit().num_metrics()) {
        throw std::invalid_argument("checkpoint does not match the sizing task's topology");
    }
    SizingResult result;
    RealSimCounter counter(task.budget);
    OracleSource real(task, counter);
    RunRecorder rec(task, result, real, counter);

    const auto start = task.start_indices();
    Dataset buffer = empty_dataset(task.circuit(), task.technology, task.seed);
    std::set<std::vector<std::size_t>> simulated{start};
    {
        const DesignPoint d = task.design_at(start);
        const PerformanceVector m = rec.simulate(d, "anchor", 0);
        push_row(buffer, d, m);
        if (result.success) return result;
    }

    SurrogateCheckpoint work = ckpt;
    Policy policy;
    std::unique_ptr<PPOTrainer> trainer;
    std::mt19937_64 rng(derive_seed(task.seed, 20));

    while (counter.remaining() > 0) {
        ++result.rounds;
        const std::size_t round = result.rounds;
        SurrogateSource source(work);
        SizingEnv env(task, knobs.env, source);
        if (!trainer) {
            policy = Policy(env.observation_size(), env.num_parameters(), ppo,
                            derive_seed(task.seed, 10));
            trainer = std::make_unique<PPOTrainer>(policy, ppo, derive_seed(task.seed, 11));
        }
        const std::size_t iters = round == 1 ? knobs.initial_iterations : knobs.refresh_iterations;
        for (std::size_t i = 0; i < iters; ++i) (void)trainer->iterate(env);

        // Candidate endpoints from sampled and greedy surrogate trajectories.
        std::vector<std::vector<std::size_t>> endpoints, visited;
        {
            EnvConfig probe = knobs.env;
            probe.lanes = 1;
            SizingEnv walk(task, probe, source);
            walk.reset();
            const std::size_t n = walk.num_parameters();
            for (std::size_t e = 0; e <= knobs.candidate_episodes; ++e) {
                const bool greedy = e == knobs.candidate_episodes;
                while (true) {
                    std::vector<int> c;
                    const Tensor o = walk.observations();
                    if (greedy) {
                        c = policy.greedy(o);
                    } else {
                        (void)policy.sample(o, rng, c);
                    }
                    for (int& v : c) v -= 1;
                    const auto out = walk.step(c);
                    visited.push_back(out[0].indices);
                    if (out[0].done) {
                        endpoints.push_back(out[0].indices);
                        break;
                    }
                }
                (void)n;
            }
        }
        auto pick = [&](const std::vector<std::vector<std::size_t>>& pool)
            -> std::optional<std::vector<std::size_t>> {
            std::optional<std::vector<std::size_t>> best;
            double best_score = std::numeric_limits<double>::infinity();
            std::set<std::vector<std::size_t>> seen;
            for (const auto& idx : pool) {
                if (simulated.contains(idx) || !seen.insert(idx).second) continue;
                const auto pred = work.rollout_with_uncertainty(task.design_at(idx));
                const double s = ucb_score(task, work, pred, knobs.ucb_beta);
                if (s < best_score) {
                    best_score = s;
                    best = idx;
                }
            }
            return best;
        };
        auto choice = pick(endpoints);
        if (!choice) choice = pick(visited);
        if (!choice) {
            // Every state the policy reaches was already simulated; probe a neighbour.
            const auto grid = task.resolved_grid();
            std::vector<std::size_t> idx = start;
            std::uniform_int_distribution<int> move(-1, 1);
            for (int attempt = 0; attempt < 1000 && simulated.contains(idx); ++attempt) {
                for (std::size_t j = 0; j < idx.size(); ++j) {
                    const int m = move(rng);
                    if (m < 0 && idx[j] > 0) --idx[j];
                    if (m > 0 && idx[j] + 1 < grid[j]) ++idx[j];
                }
            }
            choice = idx;
        }

        const DesignPoint d = task.design_at(*choice);
        const double predicted = fom(task.fom, work.rollout(d));
        const PerformanceVector m = rec.simulate(d, "endpoint", round);
        simulated.insert(*choice);
        push_row(buffer, d, m);
        if (result.success) return result;

        const double gap = std::abs(predicted - result.fom_trace.back());
        if (counter.remaining() == 0) break;
        if (!(knobs.finetune_on_failure || gap > knobs.fom_tolerance)) continue;

        Dataset data = buffer;
        if (pretrain && pretrain->size() > 0) {
            const std::size_t want = std::min(
                pretrain->size(),
                static_cast<std::size_t>(std::llround(knobs.pretrain_ratio *
                                                      static_cast<double>(buffer.size()))));
            std::vector<std::size_t> rows(pretrain->size());
            std::iota(rows.begin(), rows.end(), std::size_t{0});
            std::shuffle(rows.begin(), rows.end(), rng);
            rows.resize(want);
            data = append_rows(subset(*pretrain, rows), buffer);
        }
        TrainRunConfig ft = knobs.finetune;
        ft.seed = derive_seed(task.seed, 100 + round);
        TrainResult tuned = fine_tune(work, data, ft);
        work = std::move(tuned.checkpoint);
        ++result.finetune_rounds;
        rec.note({{"event", "finetune"},
                  {"round", round},
                  {"counter", counter.count()},
                  {"replay_rows", buffer.size()},
                  {"pretrain_rows", data.size() - buffer.size()},
                  {"fom_gap", gap},
                  {"final_train_loss",
                   tuned.history.epochs.empty() ? 0.0 : tuned.history.epochs.back().train_loss}});
    }
    return result;
}

SizingResult pure_ppo_baseline(const SizingTask& task, const PPOConfig& ppo,
                               const EnvConfig& env_config) {
    task.validate();
    ppo.validate();
    SizingResult result;
    RealSimCounter counter(task.budget);
    OracleSource real(task, counter);
    SizingEnv env(task, env_config, real);
    try {
        env.reset();
        result.real_simulations = counter.count();
        result.final_design = env.design(0);
        result.final_metrics = env.metrics(0);
        result.fom_trace.push_back(env.fom(0));
        if (constraints_met(task.fom, env.metrics(0))) {
            result.success = true;
            return result;
        }
        Policy policy(env.observation_size(), env.num_parameters(), ppo,
                      derive_seed(task.seed, 10));
        PPOTrainer trainer(policy, ppo, derive_seed(task.seed, 11));
        while (true) {
            ++result.rounds;
            const PPOIterationStats s = trainer.iterate(env, true);
            result.real_simulations = counter.count();
            result.fom_trace.push_back(s.mean_return);
            if (s.first_success_step) {
                result.success = true;
                result.final_design = task.design_at(s.success_indices);
                result.final_metrics = s.success_metrics;
                break;
            }
        }
    } catch (const BudgetExhausted&) {
        result.success = false;
    }
    result.real_simulations = counter.count();
    json rec = {{"event", "baseline_done"},
                {"counter", counter.count()},
                {"success", result.success},
                {"iterations", result.rounds}};
    result.log.push_back(rec.dump());
    return result;
}

std::string format_sizing_result(const SizingTask& task, const SizingResult& r) {
    std::ostringstream os;
    const auto& params = task.circuit().parameters;
    const auto& schema = task.circuit().schema;
    os << "success: " << (r.success ? "yes" : "no") << '\n'
       << "real simulations: " << r.real_simulations << " (budget " << task.budget << ")\n"
       << "rounds: " << r.rounds << ", fine-tune rounds: " << r.finetune_rounds << '\n';
    if (!r.final_design.values.empty()) {
        os << "final design:\n";
        for (std::size_t j = 0; j < params.size(); ++j) {
            os << "  " << params[j].name << " = " << r.final_design.values[j]
               << (params[j].unit.empty() ? "" : " " + params[j].unit) << '\n';
        }
    }
    if (!r.final_metrics.values.empty()) {
        os << "final metrics:\n";
        for (std::size_t j = 0; j < schema.size(); ++j) {
            os << "  " << schema.metrics[j].name << " = " << r.final_metrics.values[j]
               << (schema.metrics[j].unit.empty() ? "" : " " + schema.metrics[j].unit) << '\n';
        }
        os << "final FoM: " << fom(task.fom, r.final_metrics) << '\n';
    }
    return os.str();
}

}  // namespace insight
