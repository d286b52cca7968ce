#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "insight/seeding.hpp"
#include "insight/sizing.hpp"
#include "test_support.hpp"

using namespace insight;

namespace {

SurrogateCheckpoint small_surrogate() {
    static const SurrogateCheckpoint ckpt = [] {
        InsightConfig c;
        c.d_model = 16;
        c.heads = 2;
        c.layers = 1;
        c.output_heads = 3;
        TrainRunConfig r;
        r.epochs = 30;
        r.batch_size = 32;
        r.seed = 3;
        r.validation_fraction = 0.0;
        return train_insight(build_dataset("ota2_nmos", "synth45", 400, 11), c, r).checkpoint;
    }();
    return ckpt;
}

PPOConfig small_ppo() {
    PPOConfig p;
    p.hidden = {16};
    p.steps_per_iteration = 64;
    p.minibatch = 32;
    p.epochs = 2;
    p.learning_rate = 1e-3;
    return p;
}

InsightMConfig small_knobs() {
    InsightMConfig k;
    k.initial_iterations = 2;
    k.refresh_iterations = 1;
    k.candidate_episodes = 4;
    k.finetune.epochs = 2;
    k.env.horizon = 10;
    k.env.lanes = 4;
    return k;
}

SizingTask impossible_task(std::size_t budget) {
    SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    t.fom.constraints[0].threshold = 1e-9;  // iq <= 1 nA is out of reach
    t.budget = budget;
    return t;
}

SizingTask trivial_task() {
    SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    for (auto& c : t.fom.constraints) {
        c.threshold = c.sense == ConstraintSense::AtLeast ? -1e9 : 1e9;
        c.weight = 1e-9;
    }
    return t;
}

double softmax_prob(const double* z, int k) {
    const double mx = std::max({z[0], z[1], z[2]});
    double s = 0.0;
    for (int i = 0; i < 3; ++i) s += std::exp(z[i] - mx);
    return std::exp(z[k] - mx) / s;
}

}  // namespace

// Task ------------------------------------------------------------------------

TEST(SizingTask, DefaultsExistForEveryTopology) {
    for (const auto& name : topology_names()) {
        const SizingTask t = default_sizing_task(name, "synth45");
        EXPECT_NO_THROW(t.validate()) << name;
        EXPECT_FALSE(t.fom.constraints.empty()) << name;
        // The centre of the grid is not already a solution.
        const auto m = evaluate_oracle(name, "synth45", t.design_at(t.start_indices()));
        EXPECT_FALSE(constraints_met(t.fom, m)) << name;
    }
}

TEST(SizingTask, NaturalGridMatchesParameterSteps) {
    const SizingTask t = default_sizing_task("comparator", "synth45");
    const auto& params = t.circuit().parameters;
    const auto grid = t.resolved_grid();
    std::vector<std::size_t> idx = t.start_indices();
    for (std::size_t j = 0; j < params.size(); ++j) {
        EXPECT_EQ(grid[j], params[j].grid_points());
        EXPECT_EQ(idx[j], (grid[j] - 1) / 2);
        idx[j] = grid[j] - 1;
    }
    const DesignPoint top = t.design_at(idx);
    for (std::size_t j = 0; j < params.size(); ++j) {
        EXPECT_DOUBLE_EQ(top.values[j], params[j].grid_value(grid[j] - 1));
    }
}

TEST(SizingTask, CustomGridSpansBounds) {
    SizingTask t = default_sizing_task("tia2", "synth45");
    const auto& params = t.circuit().parameters;
    t.grid_points.assign(params.size(), 5);
    std::vector<std::size_t> lo(params.size(), 0), hi(params.size(), 4), mid(params.size(), 2);
    for (std::size_t j = 0; j < params.size(); ++j) {
        EXPECT_DOUBLE_EQ(t.design_at(lo).values[j], params[j].lower);
        EXPECT_DOUBLE_EQ(t.design_at(hi).values[j], params[j].upper);
        EXPECT_NEAR(t.design_at(mid).values[j], params[j].midpoint(), 1e-12 * params[j].range());
    }
    hi[0] = 5;
    EXPECT_THROW((void)t.design_at(hi), std::invalid_argument);
}

TEST(SizingTask, ValidationRejectsBadTasks) {
    SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    t.budget = 0;
    EXPECT_THROW(t.validate(), std::invalid_argument);
    t = default_sizing_task("ota2_nmos", "synth45");
    t.start = {1, 2};
    EXPECT_THROW(t.validate(), std::invalid_argument);
    t = default_sizing_task("ota2_nmos", "synth45");
    t.grid_points.assign(t.circuit().num_parameters(), 1);
    EXPECT_THROW(t.validate(), std::invalid_argument);
    EXPECT_THROW((void)default_sizing_task("nonexistent", "synth45"), std::invalid_argument);
}

// Accounting ------------------------------------------------------------------

TEST(RealSimCounter, ChargesUpToBudget) {
    RealSimCounter c(2);
    c.charge();
    c.charge();
    EXPECT_EQ(c.count(), 2u);
    EXPECT_EQ(c.remaining(), 0u);
    EXPECT_THROW(c.charge(), BudgetExhausted);
    EXPECT_EQ(c.count(), 2u);
}

TEST(OracleSource, OneChargePerDesign) {
    const SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    RealSimCounter c(10);
    OracleSource src(t, c);
    const auto before = oracle_invocations();
    const DesignPoint d = t.design_at(t.start_indices());
    const auto out = src.evaluate({d, d, d});
    EXPECT_EQ(c.count(), 3u);
    EXPECT_EQ(oracle_invocations() - before, 3u);
    EXPECT_EQ(out[0], evaluate_oracle("ota2_nmos", "synth45", d));
}

TEST(SurrogateSource, MatchesCheckpointRollout) {
    const SurrogateCheckpoint ckpt = small_surrogate();
    const SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    SurrogateSource src(ckpt);
    auto idx = t.start_indices();
    const DesignPoint a = t.design_at(idx);
    idx[0] += 3;
    const DesignPoint b = t.design_at(idx);
    const auto before = oracle_invocations();
    const auto out = src.evaluate({a, b, a});
    EXPECT_EQ(oracle_invocations(), before);
    const auto ra = ckpt.rollout(a);
    const auto rb = ckpt.rollout(b);
    for (std::size_t j = 0; j < ra.values.size(); ++j) {
        EXPECT_NEAR(out[0].values[j], ra.values[j], 1e-9 * (1.0 + std::abs(ra.values[j])));
        EXPECT_NEAR(out[1].values[j], rb.values[j], 1e-9 * (1.0 + std::abs(rb.values[j])));
    }
    EXPECT_EQ(out[0], out[2]);
}

// Environment -----------------------------------------------------------------

TEST(SizingEnv, ZeroActionGivesZeroReward) {
    const SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    RealSimCounter c(100);
    OracleSource src(t, c);
    EnvConfig e;
    e.lanes = 2;
    SizingEnv env(t, e, src);
    env.reset();
    EXPECT_EQ(c.count(), 1u);
    const std::vector<int> zero(2 * env.num_parameters(), 0);
    const auto out = env.step(zero);
    for (const auto& o : out) {
        EXPECT_EQ(o.reward, 0.0);
        EXPECT_FALSE(o.done);
        EXPECT_EQ(o.indices, t.start_indices());
    }
    EXPECT_EQ(c.count(), 3u);
}

TEST(SizingEnv, MovesClampAtGridBoundary) {
    SizingTask t = default_sizing_task("level_shifter", "synth45");
    const auto grid = t.resolved_grid();
    t.start.assign(grid.size(), 0);
    t.start[1] = grid[1] - 1;
    RealSimCounter c(100);
    OracleSource src(t, c);
    EnvConfig e;
    e.lanes = 1;
    SizingEnv env(t, e, src);
    env.reset();
    std::vector<int> moves(grid.size(), -1);
    moves[1] = +1;
    const auto out = env.step(moves);
    EXPECT_EQ(out[0].indices, t.start);
    EXPECT_EQ(out[0].reward, 0.0);
    std::vector<int> bad(grid.size(), 2);
    EXPECT_THROW((void)env.step(bad), std::invalid_argument);
    EXPECT_THROW((void)env.step(std::vector<int>(grid.size() + 1, 0)), std::invalid_argument);
}

TEST(SizingEnv, RewardsTelescope) {
    const SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    RealSimCounter c(1000);
    OracleSource src(t, c);
    EnvConfig e;
    e.lanes = 1;
    e.horizon = 25;
    SizingEnv env(t, e, src);
    env.reset();
    const double start_fom = fom(t.fom, evaluate_oracle("ota2_nmos", "synth45",
                                                      t.design_at(t.start_indices())));
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> move(-1, 1);
    for (int episode = 0; episode < 5; ++episode) {
        double total = 0.0, bonuses = 0.0, end_fom = start_fom;
        for (std::size_t s = 0; s < e.horizon; ++s) {
            std::vector<int> m(env.num_parameters());
            for (int& v : m) v = move(rng);
            const auto out = env.step(m);
            total += out[0].reward;
            if (out[0].success) bonuses += e.success_bonus;
            end_fom = fom(t.fom, evaluate_oracle("ota2_nmos", "synth45",
                                                 t.design_at(out[0].indices)));
            EXPECT_DOUBLE_EQ(out[0].fom, end_fom);
            if (out[0].done) break;
        }
        EXPECT_NEAR(total, start_fom - end_fom + bonuses, 1e-12);
        EXPECT_EQ(env.step_count(0), 0u);  // auto-restarted
        EXPECT_EQ(std::vector<std::size_t>(env.indices(0).begin(), env.indices(0).end()),
                  t.start_indices());
    }
}

TEST(SizingEnv, EpisodeEndsAtHorizon) {
    const SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    SurrogateCheckpoint ckpt = small_surrogate();
    SurrogateSource src(ckpt);
    EnvConfig e;
    e.lanes = 3;
    e.horizon = 4;
    SizingEnv env(t, e, src);
    env.reset();
    const std::vector<int> zero(3 * env.num_parameters(), 0);
    for (int s = 1; s <= 4; ++s) {
        const auto out = env.step(zero);
        for (const auto& o : out) EXPECT_EQ(o.done, s == 4);
    }
}

TEST(SizingEnv, StartEvaluatedOncePerEnvironment) {
    const SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    RealSimCounter c(100);
    OracleSource src(t, c);
    SizingEnv env(t, EnvConfig{}, src);
    env.reset();
    env.reset();
    EXPECT_EQ(c.count(), 1u);
}

TEST(SizingEnv, BudgetOneAllowsOnlyTheStart) {
    const SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    RealSimCounter c(1);
    OracleSource src(t, c);
    EnvConfig e;
    e.lanes = 1;
    SizingEnv env(t, e, src);
    env.reset();
    EXPECT_THROW((void)env.step(std::vector<int>(env.num_parameters(), 1)), BudgetExhausted);
    EXPECT_EQ(c.count(), 1u);
}

TEST(Observe, HandExample) {
    SizingTask t = default_sizing_task("comparator", "synth45");
    const std::vector<std::size_t> grid{5, 3};
    const std::vector<std::size_t> idx{0, 1};
    PerformanceVector m;
    m.values.assign(t.circuit().num_metrics(), 0.0);
    const std::size_t p = *t.circuit().schema.index_of("dc_power");
    const std::size_t d = *t.circuit().schema.index_of("avg_delay");
    m.values[p] = 6e-4;   // double the bound -> weighted violation 1
    m.values[d] = 1e-10;  // well inside the bound -> -2/3
    const auto obs = observe(t, idx, grid, m, 10, 40);
    ASSERT_EQ(obs.size(), 5u);
    EXPECT_DOUBLE_EQ(obs[0], -1.0);
    EXPECT_DOUBLE_EQ(obs[1], 0.0);
    EXPECT_NEAR(obs[2], 1.0, 1e-12);
    EXPECT_NEAR(obs[3], -2.0 / 3.0, 1e-12);
    EXPECT_DOUBLE_EQ(obs[4], 0.75);
    m.values[p] = 1.0;
    EXPECT_DOUBLE_EQ(observe(t, idx, grid, m, 10, 40)[2], 2.0);
}

// PPO pieces ------------------------------------------------------------------

TEST(PPO, LogProbabilitiesMatchSoftmax) {
    std::mt19937_64 rng(1);
    const Tensor z = test::random_tensor({4, 6}, rng, 2.0);
    const std::vector<int> choices{0, 2, 1, 1, 2, 0, 0, 0};
    const auto lp = log_probabilities(z, choices, 2);
    for (std::size_t r = 0; r < 4; ++r) {
        const double expect = std::log(softmax_prob(z.row(r).data(), choices[2 * r])) +
                              std::log(softmax_prob(z.row(r).data() + 3, choices[2 * r + 1]));
        EXPECT_NEAR(lp[r], expect, 1e-12);
    }
}

TEST(PPO, PolicyLossGradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(2);
    const std::size_t rows = 6, n = 3;
    const Tensor z = test::random_tensor({rows, 3 * n}, rng);
    std::vector<int> choices(rows * n);
    std::uniform_int_distribution<int> pick(0, 2);
    for (int& c : choices) c = pick(rng);
    // Old log-probs a little off the current ones so some ratios leave the clip range.
    std::vector<double> old = log_probabilities(z, choices, n);
    std::normal_distribution<double> noise(0.0, 0.3);
    for (double& v : old) v += noise(rng);
    std::vector<double> adv(rows);
    for (double& a : adv) a = noise(rng) * 3.0;
    Tensor grad;
    (void)ppo_policy_loss(z, choices, old, adv, 0.2, 0.05, n, &grad);
    const Tensor fd = test::numeric_gradient(
        [&](const Tensor& x) { return ppo_policy_loss(x, choices, old, adv, 0.2, 0.05, n, nullptr); },
        z);
    for (std::size_t i = 0; i < grad.size(); ++i) EXPECT_NEAR(grad[i], fd[i], 1e-7);
}

TEST(PPO, ClippedRowsCarryNoPolicyGradient) {
    const Tensor z = Tensor::from_rows({{0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}});
    const std::vector<int> choices{0, 0, 0};
    const double lp = std::log(1.0 / 3.0);
    // Row 0: ratio 2 with positive advantage (clipped). Row 1: ratio 0.5 with
    // negative advantage (clipped). Row 2: ratio 1 (active).
    const std::vector<double> old{lp - std::log(2.0), lp + std::log(2.0), lp};
    const std::vector<double> adv{1.0, -1.0, 1.0};
    Tensor grad;
    const double loss = ppo_policy_loss(z, choices, old, adv, 0.2, 0.0, 1, &grad);
    EXPECT_NEAR(loss, (-1.2 + 0.8 - 1.0) / 3.0, 1e-12);
    for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(grad(0, k), 0.0);
        EXPECT_EQ(grad(1, k), 0.0);
    }
    // d/dz of -ratio/3 at uniform logits: -(onehot - 1/3) / 3.
    EXPECT_NEAR(grad(2, 0), -(2.0 / 3.0) / 3.0, 1e-12);
    EXPECT_NEAR(grad(2, 1), (1.0 / 3.0) / 3.0, 1e-12);
    // Pessimistic side is never clipped: ratio 2 with a negative advantage.
    const std::vector<double> adv_neg{-1.0, -1.0, 1.0};
    (void)ppo_policy_loss(z, choices, old, adv_neg, 0.2, 0.0, 1, &grad);
    EXPECT_NE(grad(0, 0), 0.0);
}

TEST(PPO, EntropyBonusAtUniformIsMaximal) {
    const Tensor z = Tensor::from_rows({{0.0, 0.0, 0.0}});
    const std::vector<int> choices{1};
    const std::vector<double> old{std::log(1.0 / 3.0)};
    const std::vector<double> adv{0.0};
    Tensor grad;
    const double loss = ppo_policy_loss(z, choices, old, adv, 0.2, 0.5, 1, &grad);
    EXPECT_NEAR(loss, -0.5 * std::log(3.0), 1e-12);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(grad[k], 0.0, 1e-15);
}

TEST(PPO, GaeHandExample) {
    const std::vector<double> r{1.0, 2.0, 3.0};
    const std::vector<double> v{0.5, 0.25, 1.0};
    const std::vector<std::uint8_t> done{0, 1, 0};
    std::vector<double> adv(3), ret(3);
    compute_gae(r, v, done, 4.0, 0.9, 0.5, adv, ret);
    // Step 2 bootstraps from last_value, step 1 ends an episode.
    const double d2 = 3.0 + 0.9 * 4.0 - 1.0;
    const double d1 = 2.0 - 0.25;
    const double d0 = 1.0 + 0.9 * 0.25 - 0.5;
    EXPECT_NEAR(adv[2], d2, 1e-12);
    EXPECT_NEAR(adv[1], d1, 1e-12);
    EXPECT_NEAR(adv[0], d0 + 0.9 * 0.5 * d1, 1e-12);
    for (int t = 0; t < 3; ++t) EXPECT_NEAR(ret[t], adv[t] + v[t], 1e-12);
}

TEST(PPO, GaeWithUnitLambdaIsMonteCarlo) {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> g;
    const std::size_t n = 12;
    std::vector<double> r(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
        r[i] = g(rng);
        v[i] = g(rng);
    }
    std::vector<std::uint8_t> done(n, 0);
    done[n - 1] = 1;
    std::vector<double> adv(n), ret(n);
    compute_gae(r, v, done, 123.0, 1.0, 1.0, adv, ret);
    for (std::size_t t = 0; t < n; ++t) {
        const double mc = std::accumulate(r.begin() + static_cast<long>(t), r.end(), 0.0);
        EXPECT_NEAR(ret[t], mc, 1e-12);
    }
}

TEST(PPO, TanhMLPBackwardMatchesFiniteDifferences) {
    TanhMLP net(4, {5, 3}, 2, 9, 1.0, "net");
    std::mt19937_64 rng(3);
    const Tensor x = test::random_tensor({3, 4}, rng);
    const Tensor w = test::random_tensor({3, 2}, rng);
    auto loss = [&](const TanhMLP& m) {
        const Tensor y = m.forward(x);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
        return s;
    };
    TanhMLP::Cache cache;
    (void)net.forward(x, &cache);
    for (auto* p : net.parameters()) p->grad.fill(0.0);
    net.backward(cache, w);
    for (auto* p : net.parameters()) {
        const Tensor fd = test::numeric_gradient(
            [&](const Tensor& v) {
                TanhMLP copy = net;
                for (auto* q : copy.parameters()) {
                    if (q->name == p->name) q->value = v;
                }
                return loss(copy);
            },
            p->value);
        EXPECT_LT(test::max_relative_error(p->grad, fd, 1e-6), 1e-6) << p->name;
    }
}

TEST(PPO, GreedyAndSampling) {
    PPOConfig cfg = small_ppo();
    Policy pol(5, 2, cfg, 1);
    std::mt19937_64 rng(2);
    const Tensor obs = test::random_tensor({3, 5}, rng);
    const Tensor z = pol.logits(obs);
    const auto g = pol.greedy(obs);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t k = 0; k < 2; ++k) {
            const double* row = z.row(r).data() + 3 * k;
            EXPECT_EQ(g[r * 2 + k], std::max_element(row, row + 3) - row);
        }
    }
    std::mt19937_64 a(5), b(5);
    std::vector<int> ca, cb;
    const auto la = pol.sample(obs, a, ca);
    const auto lb = pol.sample(obs, b, cb);
    EXPECT_EQ(ca, cb);
    EXPECT_EQ(la, lb);
    const auto lp = log_probabilities(z, ca, 2);
    for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(la[r], lp[r], 1e-12);
}

TEST(PPO, SamplingFrequenciesFollowSoftmax) {
    PPOConfig cfg = small_ppo();
    Policy pol(2, 1, cfg, 1);
    // Make the actor output fixed logits (1, 0, -1) regardless of input.
    auto& last = pol.actor.layers.back();
    last.weight.value.fill(0.0);
    last.bias.value = Tensor::vector({1.0, 0.0, -1.0});
    const Tensor obs = Tensor::matrix(1, 2);
    std::mt19937_64 rng(8);
    std::vector<int> counts(3, 0);
    const int draws = 30000;
    for (int i = 0; i < draws; ++i) {
        std::vector<int> c;
        (void)pol.sample(obs, rng, c);
        ++counts[c[0]];
    }
    const double zrow[3] = {1.0, 0.0, -1.0};
    for (int k = 0; k < 3; ++k) {
        const double p = softmax_prob(zrow, k);
        EXPECT_NEAR(counts[k] / double(draws), p, 4.0 * std::sqrt(p * (1 - p) / draws));
    }
}

TEST(PPO, ConfigValidation) {
    PPOConfig p;
    EXPECT_NO_THROW(p.validate());
    p.clip = 0.0;
    EXPECT_THROW(p.validate(), std::invalid_argument);
    p = PPOConfig{};
    p.gamma = 1.5;
    EXPECT_THROW(p.validate(), std::invalid_argument);
    p = PPOConfig{};
    p.minibatch = 0;
    EXPECT_THROW(p.validate(), std::invalid_argument);
    EnvConfig e;
    e.horizon = 0;
    EXPECT_THROW(e.validate(), std::invalid_argument);
}

// Training in the surrogate ---------------------------------------------------

TEST(SurrogatePPO, BeatsUniformRandomByTwoFold) {
    const SurrogateCheckpoint ckpt = small_surrogate();
    const SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    PPOConfig p;
    p.steps_per_iteration = 256;
    const auto before = oracle_invocations();
    const auto res = ppo_train_in_surrogate(t, ckpt, p, EnvConfig{}, 20);
    EXPECT_EQ(oracle_invocations(), before);
    SurrogateSource src(ckpt);
    const double trained = mean_episode_return(t, src, EnvConfig{}, &res.policy, 128, 5);
    const double random = mean_episode_return(t, src, EnvConfig{}, nullptr, 128, 5);
    EXPECT_GT(trained, 0.0);
    EXPECT_GE(trained, 2.0 * std::abs(random));
}

TEST(SurrogatePPO, DeterministicUnderSeed) {
    const SurrogateCheckpoint ckpt = small_surrogate();
    const SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    EnvConfig e;
    e.lanes = 4;
    const auto a = ppo_train_in_surrogate(t, ckpt, small_ppo(), e, 3);
    const auto b = ppo_train_in_surrogate(t, ckpt, small_ppo(), e, 3);
    ASSERT_EQ(a.iterations.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(a.iterations[i].mean_return, b.iterations[i].mean_return);
    }
    const auto pa = a.policy.actor.layers[0].weight.value.values();
    const auto pb = b.policy.actor.layers[0].weight.value.values();
    EXPECT_TRUE(std::equal(pa.begin(), pa.end(), pb.begin()));
}

// Sizing runs -------------------------------------------------------------------

TEST(Ucb, ZeroBetaIsMeanFoM) {
    const SurrogateCheckpoint ckpt = small_surrogate();
    const SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    auto idx = t.start_indices();
    for (int i = 0; i < 5; ++i) {
        idx[static_cast<std::size_t>(i)] += static_cast<std::size_t>(i);
        const auto u = ckpt.rollout_with_uncertainty(t.design_at(idx));
        EXPECT_DOUBLE_EQ(ucb_score(t, ckpt, u, 0.0), fom(t.fom, u.mean));
    }
}

TEST(Ucb, OptimismNeverRaisesTheScore) {
    const SurrogateCheckpoint ckpt = small_surrogate();
    const SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    const auto u = ckpt.rollout_with_uncertainty(t.design_at(t.start_indices()));
    double prev = ucb_score(t, ckpt, u, 0.0);
    for (double beta : {0.5, 1.0, 2.0, 4.0}) {
        const double s = ucb_score(t, ckpt, u, beta);
        EXPECT_LE(s, prev + 1e-12);
        prev = s;
    }
}

TEST(InsightM, SatisfiedStartNeedsOneSimulation) {
    const SurrogateCheckpoint ckpt = small_surrogate();
    const auto before = oracle_invocations();
    const auto r = insight_m_run(trivial_task(), ckpt, small_ppo(), small_knobs(), nullptr);
    EXPECT_TRUE(r.success);
    EXPECT_EQ(r.real_simulations, 1u);
    EXPECT_EQ(oracle_invocations() - before, 1u);
    EXPECT_EQ(r.rounds, 0u);
}

TEST(InsightM, BudgetOneFailingCheck) {
    const SurrogateCheckpoint ckpt = small_surrogate();
    const auto r = insight_m_run(impossible_task(1), ckpt, small_ppo(), small_knobs(), nullptr);
    EXPECT_FALSE(r.success);
    EXPECT_EQ(r.real_simulations, 1u);
}

TEST(InsightM, AccountingAndBudgetSafety) {
    const SurrogateCheckpoint ckpt = small_surrogate();
    const Dataset pretrain = build_dataset("ota2_nmos", "synth45", 50, 2);
    for (std::size_t budget : {2u, 4u}) {
        const auto before = oracle_invocations();
        const auto r =
            insight_m_run(impossible_task(budget), ckpt, small_ppo(), small_knobs(), &pretrain);
        EXPECT_FALSE(r.success);
        EXPECT_EQ(r.real_simulations, budget);
        EXPECT_EQ(oracle_invocations() - before, budget);
        EXPECT_EQ(r.fom_trace.size(), budget);
        EXPECT_EQ(r.rounds, budget - 1);
        EXPECT_EQ(r.finetune_rounds, budget - 2);  // none after the last check
        std::size_t sims = 0, last_counter = 0;
        for (const auto& line : r.log) {
            if (line.find("\"real_simulation\"") != std::string::npos) {
                ++sims;
                const auto pos = line.find("\"counter\":");
                const std::size_t counter = std::stoul(line.substr(pos + 10));
                EXPECT_EQ(counter, last_counter + 1);
                last_counter = counter;
            }
        }
        EXPECT_EQ(sims, budget);
    }
}

TEST(InsightM, DeterministicUnderSeed) {
    const SurrogateCheckpoint ckpt = small_surrogate();
    const Dataset pretrain = build_dataset("ota2_nmos", "synth45", 50, 2);
    SizingTask t = impossible_task(3);
    t.seed = 17;
    const auto a = insight_m_run(t, ckpt, small_ppo(), small_knobs(), &pretrain);
    const auto b = insight_m_run(t, ckpt, small_ppo(), small_knobs(), &pretrain);
    EXPECT_EQ(a.log, b.log);
    EXPECT_EQ(a.fom_trace, b.fom_trace);
}

TEST(InsightM, SuccessIsConfirmedByTheOracle) {
    const SurrogateCheckpoint ckpt = small_surrogate();
    SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    // Loosened targets that the centre misses but a few moves reach.
    t.fom.constraints[2].threshold = 72.0;
    t.budget = 15;
    InsightMConfig k = small_knobs();
    k.initial_iterations = 6;
    const auto r = insight_m_run(t, ckpt, small_ppo(), k, nullptr);
    ASSERT_FALSE(r.fom_trace.empty());
    EXPECT_LE(r.real_simulations, t.budget);
    if (r.success) {
        const auto m = evaluate_oracle("ota2_nmos", "synth45", r.final_design);
        EXPECT_TRUE(constraints_met(t.fom, m));
        EXPECT_EQ(m, r.final_metrics);
        EXPECT_DOUBLE_EQ(r.fom_trace.back(), fom(t.fom, m));
    }
    EXPECT_NE(format_sizing_result(t, r).find("real simulations"), std::string::npos);
}

TEST(InsightM, RejectsMismatchedCheckpoint) {
    const SurrogateCheckpoint ckpt = small_surrogate();
    const SizingTask t = default_sizing_task("tia2", "synth45");
    EXPECT_THROW((void)insight_m_run(t, ckpt, small_ppo(), small_knobs(), nullptr),
                 std::invalid_argument);
}

TEST(Baseline, BudgetOneCountsOne) {
    EnvConfig e;
    e.lanes = 1;
    const auto r = pure_ppo_baseline(impossible_task(1), small_ppo(), e);
    EXPECT_FALSE(r.success);
    EXPECT_EQ(r.real_simulations, 1u);
}

TEST(Baseline, CountGrowsOnePerStep) {
    EnvConfig e;
    e.lanes = 1;
    for (std::size_t budget : {10u, 40u, 130u}) {
        const auto before = oracle_invocations();
        const auto r = pure_ppo_baseline(impossible_task(budget), small_ppo(), e);
        EXPECT_FALSE(r.success);
        EXPECT_EQ(r.real_simulations, budget);
        EXPECT_EQ(oracle_invocations() - before, budget);
    }
}

TEST(Baseline, SatisfiedStartNeedsOneSimulation) {
    const auto r = pure_ppo_baseline(trivial_task(), small_ppo(), EnvConfig{});
    EXPECT_TRUE(r.success);
    EXPECT_EQ(r.real_simulations, 1u);
}

TEST(Baseline, SuccessIsConfirmedAndDeterministic) {
    SizingTask t = default_sizing_task("ota2_nmos", "synth45");
    t.fom.constraints[2].threshold = 72.0;
    t.budget = 3000;
    EnvConfig e;
    e.lanes = 1;
    const auto a = pure_ppo_baseline(t, small_ppo(), e);
    const auto b = pure_ppo_baseline(t, small_ppo(), e);
    EXPECT_EQ(a.real_simulations, b.real_simulations);
    EXPECT_EQ(a.final_design, b.final_design);
    if (a.success) {
        EXPECT_TRUE(constraints_met(t.fom, evaluate_oracle("ota2_nmos", "synth45", a.final_design)));
    }
}
