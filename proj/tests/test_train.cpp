#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "insight/seeding.hpp"
#include "insight/train.hpp"

using namespace insight;

namespace {

InsightConfig small_model() {
    InsightConfig c;
    c.d_model = 16;
    c.heads = 2;
    c.layers = 2;
    c.output_heads = 3;
    return c;
}

TrainRunConfig quick_run(std::size_t epochs, std::uint64_t seed = 1) {
    TrainRunConfig r;
    r.epochs = epochs;
    r.batch_size = 16;
    r.seed = seed;
    return r;
}

MetricSpec spec(std::string name, MetricClass c, std::vector<std::string> from = {}) {
    MetricSpec s;
    s.name = std::move(name);
    s.metric_class = c;
    s.derived_from = std::move(from);
    return s;
}

std::vector<std::string> ordered_names(const MetricSchema& s) {
    std::vector<std::string> out;
    for (std::size_t j : order_metrics(s)) out.push_back(s.metrics[j].name);
    return out;
}

}  // namespace

// Metric math ------------------------------------------------------------------

TEST(Metrics, HandArithmeticExample) {
    const std::vector<double> y{1.0, 2.0, 3.0};
    const std::vector<double> p{1.1, 1.9, 3.2};
    // 1.1 - 1 is not exact in binary, so allow a few ulps of rounding.
    EXPECT_NEAR(*r2_score(y, p), 0.97, 1e-15);
    EXPECT_NEAR(mean_squared_error(y, p), 0.02, 1e-15);
}

TEST(Metrics, PerfectAndMeanPredictors) {
    const std::vector<double> y{0.3, -1.2, 2.5, 0.0, 4.1};
    EXPECT_EQ(*r2_score(y, y), 1.0);
    EXPECT_EQ(mean_squared_error(y, y), 0.0);
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / 5.0;
    EXPECT_NEAR(*r2_score(y, std::vector<double>(5, mean)), 0.0, 1e-15);
    EXPECT_FALSE(r2_score(std::vector<double>(4, 2.0), std::vector<double>(4, 1.0)).has_value());
    EXPECT_THROW((void)r2_score(y, std::vector<double>(4, 0.0)), std::invalid_argument);
}

TEST(Metrics, R2NeverExceedsOne) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> d;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> y(20), p(20);
        for (auto& v : y) v = d(rng);
        for (auto& v : p) v = d(rng);
        EXPECT_LE(*r2_score(y, p), 1.0);
        EXPECT_GE(mean_squared_error(y, p), 0.0);
    }
}

TEST(ScorePredictions, AggregateIsMeanOfIncludedMetrics) {
    const Dataset d = build_dataset("ota2_nmos", "synth45", 40, 2);
    const NormStats s = NormStats::fit(d);
    const Tensor truth = s.normalize_metrics(d.metrics);
    Tensor pred = truth;
    std::mt19937_64 rng(2);
    std::normal_distribution<double> noise(0.0, 0.3);
    for (double& v : pred.values()) v += noise(rng);
    const EvalReport rep = score_predictions(d.schema, s, truth, pred, {true, false, true, true});
    EXPECT_FALSE(rep.metrics[1].included);
    EXPECT_EQ(rep.metrics[1].note, "known");
    const double r2 = (*rep.metrics[0].r2 + *rep.metrics[2].r2 + *rep.metrics[3].r2) / 3.0;
    const double mse = (rep.metrics[0].mse + rep.metrics[2].mse + rep.metrics[3].mse) / 3.0;
    EXPECT_DOUBLE_EQ(rep.aggregate_r2, r2);
    EXPECT_DOUBLE_EQ(rep.aggregate_mse, mse);
    // Raw-unit MAE agrees with a direct computation.
    const Tensor raw = s.denormalize_metrics(pred);
    double mae = 0.0;
    for (std::size_t r = 0; r < 40; ++r) mae += std::abs(raw(r, 2) - d.metrics(r, 2)) / 40.0;
    EXPECT_NEAR(rep.metrics[2].mae, mae, 1e-9 * mae);
}

TEST(ScorePredictions, ConstantTestColumnIsExcludedWithWarning) {
    const Dataset d = build_dataset("comparator", "synth45", 30, 2);
    const NormStats s = NormStats::fit(d);
    Tensor truth = s.normalize_metrics(d.metrics);
    for (std::size_t r = 0; r < truth.rows(); ++r) truth(r, 1) = 0.25;
    const Tensor pred = truth;
    const EvalReport rep = score_predictions(d.schema, s, truth, pred, {true, true});
    EXPECT_FALSE(rep.metrics[1].r2.has_value());
    EXPECT_FALSE(rep.metrics[1].included);
    ASSERT_EQ(rep.warnings.size(), 1u);
    EXPECT_EQ(rep.aggregate_r2, 1.0);
}

// Metric ordering -----------------------------------------------------------------

TEST(OrderMetrics, BenchmarkSchemas) {
    EXPECT_EQ(ordered_names(topology("ota2_nmos").schema),
              (std::vector<std::string>{"iq", "dc_gain", "ugbw", "phase_margin"}));
    EXPECT_EQ(ordered_names(topology("level_shifter").schema),
              (std::vector<std::string>{"dc_power", "ratio", "avg_delay", "delay_balance"}));
    EXPECT_EQ(ordered_names(topology("comparator").schema),
              (std::vector<std::string>{"dc_power", "avg_delay"}));
    for (const auto& name : topology_names()) {
        EXPECT_NO_THROW((void)order_metrics(topology(name).schema)) << name;
    }
}

TEST(OrderMetrics, SingleMetricIsItself) {
    const MetricSchema s{{spec("only", MetricClass::AC)}};
    EXPECT_EQ(order_metrics(s), (std::vector<std::size_t>{0}));
}

TEST(OrderMetrics, ClassRankThenSchemaPosition) {
    const MetricSchema s{{spec("t1", MetricClass::Transient), spec("a1", MetricClass::AC),
                          spec("d1", MetricClass::DC), spec("a2", MetricClass::AC),
                          spec("d2", MetricClass::DC)}};
    EXPECT_EQ(ordered_names(s), (std::vector<std::string>{"d1", "d2", "a1", "a2", "t1"}));
}

TEST(OrderMetrics, DerivedMetricFollowsSourcesAcrossClasses) {
    // A DC-tagged metric derived from a transient one still comes after it.
    const MetricSchema s{{spec("energy", MetricClass::DC, {"delay", "power"}),
                          spec("delay", MetricClass::Transient), spec("power", MetricClass::DC),
                          spec("gain", MetricClass::AC)}};
    const auto names = ordered_names(s);
    EXPECT_EQ(names, (std::vector<std::string>{"power", "gain", "delay", "energy"}));
}

TEST(OrderMetrics, PropertyEveryDerivedMetricAfterItsSources) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t m = 1 + rng() % 7;
        MetricSchema s;
        for (std::size_t j = 0; j < m; ++j) {
            std::vector<std::string> from;
            // Sources only among earlier names keeps the graph acyclic.
            for (std::size_t k = 0; k < j; ++k) {
                if (rng() % 3 == 0) from.push_back("m" + std::to_string(k));
            }
            s.metrics.push_back(
                spec("m" + std::to_string(j), static_cast<MetricClass>(rng() % 3), from));
        }
        std::shuffle(s.metrics.begin(), s.metrics.end(), rng);
        const auto order = order_metrics(s);
        std::vector<std::size_t> pos(m);
        for (std::size_t i = 0; i < m; ++i) pos[order[i]] = i;
        std::vector<std::size_t> sorted = order;
        std::sort(sorted.begin(), sorted.end());
        ASSERT_EQ(sorted, [&] {
            std::vector<std::size_t> v(m);
            std::iota(v.begin(), v.end(), std::size_t{0});
            return v;
        }());
        for (std::size_t j = 0; j < m; ++j) {
            for (const auto& src : s.metrics[j].derived_from) {
                EXPECT_LT(pos[*s.index_of(src)], pos[j]);
            }
        }
    }
}

TEST(OrderMetrics, CyclesAndUnknownSourcesRejected) {
    const MetricSchema cycle{{spec("a", MetricClass::DC, {"b"}), spec("b", MetricClass::AC, {"a"}),
                              spec("c", MetricClass::DC)}};
    EXPECT_THROW((void)order_metrics(cycle), std::invalid_argument);
    const MetricSchema self{{spec("a", MetricClass::DC, {"a"})}};
    EXPECT_THROW((void)order_metrics(self), std::invalid_argument);
    const MetricSchema unknown{{spec("a", MetricClass::DC, {"zz"})}};
    EXPECT_THROW((void)order_metrics(unknown), std::invalid_argument);
}

// Training ------------------------------------------------------------------------

TEST(TrainRunConfig, Validation) {
    TrainRunConfig c;
    EXPECT_NO_THROW(c.validate());
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = {};
    c.validation_fraction = 0.6;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c.validation_fraction = 0.5;
    EXPECT_NO_THROW(c.validate());
}

TEST(TrainInsight, MemorizesTenSamples) {
    const Dataset d = build_dataset("ota2_nmos", "synth45", 10, 5);
    TrainRunConfig run = quick_run(400);
    run.batch_size = 10;
    run.validation_fraction = 0.0;
    const TrainResult r = train_insight(d, InsightConfig{}, run);
    EXPECT_EQ(r.history.validation_rows, 0u);
    EXPECT_EQ(r.history.train_rows, 10u);
    ASSERT_EQ(r.history.epochs.size(), 400u);
    // The recorded epoch loss averages over weights that move during the
    // epoch; check the final weights directly as well.
    EXPECT_LT(r.history.epochs.back().train_loss, 1e-3);
    const EvalReport tf = evaluate(r.checkpoint, d, EvalMode::TeacherForced);
    EXPECT_LT(tf.aggregate_mse, 1e-3);
}

TEST(TrainInsight, ReturnsBestValidationCheckpoint) {
    const Dataset d = build_dataset("tia2", "synth45", 200, 6);
    TrainRunConfig run = quick_run(12);
    run.learning_rate = 3e-3;
    const TrainResult r = train_insight(d, small_model(), run);
    ASSERT_EQ(r.history.validation_rows, 20u);
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    for (const auto& e : r.history.epochs) {
        if (e.validation_loss < best) {
            best = e.validation_loss;
            best_epoch = e.epoch;
        }
    }
    EXPECT_EQ(r.history.best_epoch, best_epoch);
    EXPECT_EQ(r.history.best_validation_loss, best);
    // Recompute the carve-out and the loss of the returned weights.
    const auto [fit, val] = split(d, 180, 20, derive_seed(run.seed, 2));
    EXPECT_EQ(r.checkpoint.stats, NormStats::fit(fit));
    const Tensor x = r.checkpoint.design_matrix(val);
    const Tensor y = r.checkpoint.target_matrix(val);
    const auto& m = r.checkpoint.model;
    EXPECT_DOUBLE_EQ(m.loss(m.forward(m.teacher_tokens(x, y)), y), best);
}

TEST(TrainInsight, DeterministicUnderSeed) {
    const Dataset d = build_dataset("comparator", "synth45", 120, 7);
    const TrainResult a = train_insight(d, small_model(), quick_run(4, 11));
    const TrainResult b = train_insight(d, small_model(), quick_run(4, 11));
    const TrainResult c = train_insight(d, small_model(), quick_run(4, 12));
    ASSERT_EQ(a.history.epochs.size(), b.history.epochs.size());
    for (std::size_t i = 0; i < a.history.epochs.size(); ++i) {
        EXPECT_EQ(a.history.epochs[i].train_loss, b.history.epochs[i].train_loss);
        EXPECT_EQ(a.history.epochs[i].validation_loss, b.history.epochs[i].validation_loss);
    }
    EXPECT_NE(a.history.epochs.back().train_loss, c.history.epochs.back().train_loss);
}

TEST(TrainInsight, EarlyStoppingHonoursPatience) {
    const Dataset d = build_dataset("tia2", "synth45", 100, 6);
    TrainRunConfig run = quick_run(200);
    run.learning_rate = 0.05;
    run.patience = 2;
    const TrainResult r = train_insight(d, small_model(), run);
    EXPECT_LT(r.history.epochs.size(), 200u);
    EXPECT_EQ(r.history.epochs.size(), r.history.best_epoch + 2);
}

TEST(TrainInsight, DivergenceRaisesDiagnostic) {
    const Dataset d = build_dataset("tia2", "synth45", 64, 6);
    TrainRunConfig run = quick_run(50);
    run.learning_rate = 1e300;
    run.grad_clip = 0.0;
    try {
        (void)train_insight(d, small_model(), run);
        FAIL() << "expected TrainingError";
    } catch (const TrainingError& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
    }
}

TEST(TrainInsight, RejectsEmptyData) {
    const Dataset d = build_dataset("tia2", "synth45", 0, 6);
    EXPECT_THROW((void)train_insight(d, small_model(), quick_run(1)), std::invalid_argument);
}

TEST(TrainInsight, UsesCanonicalOrderByDefault) {
    const Dataset d = build_dataset("ota2_pmos", "synth45", 40, 6);
    const TrainResult r = train_insight(d, small_model(), quick_run(1));
    EXPECT_EQ(r.checkpoint.layout().order, order_metrics(d.schema));
}

// Evaluation -----------------------------------------------------------------------

class EvaluateTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        const Dataset d = build_dataset("level_shifter", "synth45", 300, 8);
        auto [tr, te] = split(d, 200, 100, 1);
        train_ = new Dataset(tr);
        test_ = new Dataset(te);
        ckpt_ = new SurrogateCheckpoint(train_insight(tr, small_model(), quick_run(8)).checkpoint);
    }
    static void TearDownTestSuite() {
        delete train_;
        delete test_;
        delete ckpt_;
    }
    static Dataset* train_;
    static Dataset* test_;
    static SurrogateCheckpoint* ckpt_;
};
Dataset* EvaluateTest::train_ = nullptr;
Dataset* EvaluateTest::test_ = nullptr;
SurrogateCheckpoint* EvaluateTest::ckpt_ = nullptr;

TEST_F(EvaluateTest, RolloutMatchesPerRowRollout) {
    const Tensor z = predict_z(*ckpt_, *test_, EvalMode::Rollout, 1);
    for (std::size_t r = 0; r < 5; ++r) {
        const auto perf = test_->performance(r);
        const std::vector<double> prefix{perf.values[ckpt_->layout().order[0]]};
        const auto u = ckpt_->rollout_with_uncertainty(test_->design(r), prefix);
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(z(r, j), u.mean_z[j], 1e-9);
    }
}

TEST_F(EvaluateTest, KnownPrefixSlotsAreExcluded) {
    const EvalReport rep = evaluate(*ckpt_, *test_, EvalMode::Rollout, 2);
    const auto& order = ckpt_->layout().order;
    EXPECT_FALSE(rep.metrics[order[0]].included);
    EXPECT_FALSE(rep.metrics[order[1]].included);
    EXPECT_TRUE(rep.metrics[order[2]].included);
    EXPECT_EQ(rep.metrics[order[0]].mse, 0.0);
    const double expect = (*rep.metrics[order[2]].r2 + *rep.metrics[order[3]].r2) / 2.0;
    EXPECT_DOUBLE_EQ(rep.aggregate_r2, expect);
    EXPECT_TRUE(std::isnan(evaluate(*ckpt_, *test_, EvalMode::Rollout, 4).aggregate_r2));
    EXPECT_THROW((void)evaluate(*ckpt_, *test_, EvalMode::Rollout, 5), std::invalid_argument);
    EXPECT_THROW((void)evaluate(*ckpt_, *test_, EvalMode::TeacherForced, 1), std::invalid_argument);
}

TEST_F(EvaluateTest, FirstSlotAgreesAcrossModes) {
    const EvalReport tf = evaluate(*ckpt_, *test_, EvalMode::TeacherForced);
    const EvalReport ro = evaluate(*ckpt_, *test_, EvalMode::Rollout);
    const std::size_t first = ckpt_->layout().order[0];
    EXPECT_NEAR(tf.metrics[first].mse, ro.metrics[first].mse, 1e-12);
    EXPECT_EQ(tf.test_size, 100u);
    EXPECT_EQ(tf.train_size, 180u);
}

TEST_F(EvaluateTest, ReportIndependentOfTestRowOrder) {
    std::vector<std::size_t> perm(test_->size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(3);
    std::shuffle(perm.begin(), perm.end(), rng);
    const EvalReport a = evaluate(*ckpt_, *test_);
    const EvalReport b = evaluate(*ckpt_, subset(*test_, perm));
    EXPECT_NEAR(a.aggregate_r2, b.aggregate_r2, 1e-12);
    EXPECT_NEAR(a.aggregate_mse, b.aggregate_mse, 1e-12);
}

TEST_F(EvaluateTest, RejectsMismatchedDataset) {
    const Dataset other = build_dataset("comparator", "synth45", 10, 1);
    EXPECT_THROW((void)evaluate(*ckpt_, other), std::invalid_argument);
}

TEST_F(EvaluateTest, CsvRowsFollowHeader) {
    const EvalReport rep = evaluate(*ckpt_, *test_, EvalMode::Rollout, 1);
    std::ostringstream os;
    write_eval_csv_rows(rep, os);
    std::istringstream in(os.str());
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) lines.push_back(line);
    ASSERT_EQ(lines.size(), 5u);
    const auto columns = [](const std::string& s) { return std::count(s.begin(), s.end(), ',') + 1; };
    for (const auto& l : lines) EXPECT_EQ(columns(l), columns(eval_csv_header()));
    EXPECT_EQ(lines[0].rfind("insight,level_shifter,synth45,rollout,1,180,100,dc_power,", 0), 0u)
        << lines[0];
    EXPECT_EQ(lines[0].substr(lines[0].size() - 2), ",0");
    EXPECT_EQ(lines[4].rfind("insight,level_shifter,synth45,rollout,1,180,100,aggregate,", 0), 0u);
    std::ostringstream table;
    print_eval_table(rep, table);
    EXPECT_NE(table.str().find("aggregate"), std::string::npos);
}

// FC ensemble -------------------------------------------------------------------------

TEST(TrainFCEnsemble, MembersDifferAndEnsembleBeatsWorstMember) {
    const Dataset d = build_dataset("tia3", "synth45", 150, 4);
    FCEnsembleConfig cfg;
    cfg.members = 3;
    cfg.hidden = {32, 32};
    const FCTrainResult r = train_fc_ensemble(d, cfg, quick_run(10));
    ASSERT_EQ(r.ensemble.members.size(), 3u);
    EXPECT_NE(r.ensemble.members[0].layers[0].weight.value,
              r.ensemble.members[1].layers[0].weight.value);
    const double worst =
        *std::max_element(r.member_validation_mse.begin(), r.member_validation_mse.end());
    EXPECT_LE(r.ensemble_validation_mse, worst);
    const EvalReport rep = evaluate(r.ensemble, d);
    EXPECT_EQ(rep.model, "fc_ensemble");
    EXPECT_EQ(rep.train_size, 135u);
}

TEST(TrainFCEnsemble, DeterministicUnderSeed) {
    const Dataset d = build_dataset("tia3", "synth45", 60, 4);
    FCEnsembleConfig cfg;
    cfg.members = 2;
    cfg.hidden = {8};
    const FCTrainResult a = train_fc_ensemble(d, cfg, quick_run(3, 5));
    const FCTrainResult b = train_fc_ensemble(d, cfg, quick_run(3, 5));
    for (std::size_t m = 0; m < 2; ++m) {
        EXPECT_EQ(a.ensemble.members[m].layers[1].weight.value,
                  b.ensemble.members[m].layers[1].weight.value);
    }
    EXPECT_EQ(a.ensemble_validation_mse, b.ensemble_validation_mse);
}

// Transfer -----------------------------------------------------------------------------

TEST(TransferFinetune, ZeroEpochsKeepsWeightsAndRefitsStats) {
    const Dataset src = build_dataset("ota2_nmos", "synth45", 100, 1);
    const Dataset dst = build_dataset("ota2_nmos", "synth130", 100, 2);
    const SurrogateCheckpoint source = train_insight(src, small_model(), quick_run(2)).checkpoint;
    TrainRunConfig run = quick_run(0);
    const TrainResult r = transfer_finetune(source, dst, run);
    const auto before = source.model.parameters();
    const auto after = r.checkpoint.model.parameters();
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i]->value, after[i]->value);
    EXPECT_EQ(r.checkpoint.technology, "synth130");
    EXPECT_NE(r.checkpoint.stats, source.stats);
    const auto [fit, val] = split(dst, 90, 10, derive_seed(run.seed, 2));
    EXPECT_EQ(r.checkpoint.stats, NormStats::fit(fit));
}

TEST(TransferFinetune, DeterministicAndValidated) {
    const Dataset src = build_dataset("ota2_nmos", "synth45", 80, 1);
    const Dataset dst = build_dataset("ota2_nmos", "synth130", 80, 2);
    const SurrogateCheckpoint source = train_insight(src, small_model(), quick_run(2)).checkpoint;
    const TrainResult a = transfer_finetune(source, dst, quick_run(3, 4));
    const TrainResult b = transfer_finetune(source, dst, quick_run(3, 4));
    EXPECT_EQ(a.checkpoint.model.head.weight.value, b.checkpoint.model.head.weight.value);
    EXPECT_THROW((void)transfer_finetune(source, src, quick_run(1)), std::invalid_argument);
    const Dataset other = build_dataset("ota2_pmos", "synth130", 80, 2);
    EXPECT_THROW((void)transfer_finetune(source, other, quick_run(1)), std::invalid_argument);
}

TEST(FineTune, KeepsNormalization) {
    const Dataset d = build_dataset("tia2", "synth45", 80, 1);
    const Dataset more = build_dataset("tia2", "synth45", 40, 9);
    const SurrogateCheckpoint base = train_insight(d, small_model(), quick_run(2)).checkpoint;
    const TrainResult r = fine_tune(base, more, quick_run(2));
    EXPECT_EQ(r.checkpoint.stats, base.stats);
    EXPECT_NE(r.checkpoint.model.head.weight.value, base.model.head.weight.value);
}

TEST(History, CsvHasOneRowPerEpoch) {
    const Dataset d = build_dataset("tia2", "synth45", 50, 1);
    const TrainResult r = train_insight(d, small_model(), quick_run(3));
    std::ostringstream os;
    write_history_csv(r.history, os);
    const std::string s = os.str();
    EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 4);
    EXPECT_EQ(s.rfind("epoch,train_loss,validation_loss,learning_rate,best\n", 0), 0u);
}
