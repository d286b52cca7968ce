#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "insight/data.hpp"

using namespace insight;

namespace {

std::string to_text(const Dataset& d) {
    std::ostringstream os;
    save_dataset(d, os);
    return os.str();
}

std::vector<std::vector<double>> rows_of(const Dataset& d) {
    std::vector<std::vector<double>> out;
    for (std::size_t r = 0; r < d.size(); ++r) {
        std::vector<double> row(d.designs.row(r).begin(), d.designs.row(r).end());
        row.insert(row.end(), d.metrics.row(r).begin(), d.metrics.row(r).end());
        out.push_back(std::move(row));
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace

TEST(SampleDesigns, PinnedGoldenForFixedSeed) {
    const auto d = sample_designs(topology("ota2_nmos"), 1, 42);
    ASSERT_EQ(d.size(), 1u);
    const std::vector<double> golden{34.459859197050321, 7.7730496680787571, 1.9098178879029701,
                                     35.302080367162638, 20.646374630260695, 8.0954046948307337,
                                     2.3884107959492953, 37.347563047984409};
    ASSERT_EQ(d[0].values.size(), golden.size());
    for (std::size_t i = 0; i < golden.size(); ++i) EXPECT_EQ(d[0].values[i], golden[i]) << i;
}

TEST(SampleDesigns, AllWithinBounds) {
    for (const auto& name : topology_names()) {
        const auto& topo = topology(name);
        for (const auto& d : sample_designs(topo, 10000, 3)) {
            EXPECT_NO_THROW(topo.check_design(d));
        }
    }
}

TEST(SampleDesigns, EmpiricalMeanNearMidpoint) {
    const auto& topo = topology("ota2_nmos");
    const auto samples = sample_designs(topo, 50000, 5);
    for (std::size_t j = 0; j < topo.num_parameters(); ++j) {
        double mean = 0.0;
        for (const auto& d : samples) mean += d.values[j];
        mean /= static_cast<double>(samples.size());
        const double mid = topo.parameters[j].midpoint();
        EXPECT_LT(std::abs(mean - mid), 0.02 * mid) << topo.parameters[j].name;
    }
}

TEST(SampleDesigns, SpreadMatchesTruncatedGaussian) {
    // sigma = range/4 truncated at +-2 sigma has standard deviation ~0.880 sigma.
    const auto& topo = topology("comparator");
    const auto samples = sample_designs(topo, 50000, 6);
    const auto& p = topo.parameters[4];
    double mean = 0.0, sq = 0.0;
    for (const auto& d : samples) mean += d.values[4];
    mean /= static_cast<double>(samples.size());
    for (const auto& d : samples) sq += (d.values[4] - mean) * (d.values[4] - mean);
    const double sd = std::sqrt(sq / static_cast<double>(samples.size()));
    EXPECT_NEAR(sd / (0.25 * p.range()), 0.8796, 0.01);
}

TEST(BuildDataset, EmptyHasValidSchema) {
    const Dataset d = build_dataset("tia3", "synth130", 0, 1);
    EXPECT_EQ(d.size(), 0u);
    EXPECT_EQ(d.schema, topology("tia3").schema);
    EXPECT_EQ(d.designs.shape(), (Shape{0, 9}));
    const Dataset back = [&] {
        std::istringstream in(to_text(d));
        return load_dataset(in);
    }();
    EXPECT_EQ(back, d);
}

TEST(BuildDataset, RoundTripIsBitIdentical) {
    Dataset d = build_dataset("ota2_nmos", "synth45", 2000, 11);
    d.metadata["config_hash"] = "abc123";
    const std::string text = to_text(d);
    std::istringstream in(text);
    const Dataset back = load_dataset(in);
    EXPECT_EQ(back, d);
    EXPECT_EQ(to_text(back), text);
}

TEST(BuildDataset, ParallelLabellingMatchesSerial) {
    const Dataset serial = build_dataset("level_shifter", "synth180", 257, 4, 1);
    const Dataset parallel = build_dataset("level_shifter", "synth180", 257, 4, 4);
    EXPECT_EQ(serial, parallel);
    EXPECT_EQ(to_text(serial), to_text(parallel));
}

TEST(BuildDataset, LabelsMatchOracle) {
    const Dataset d = build_dataset("comparator", "synth45", 20, 9);
    for (std::size_t r = 0; r < d.size(); ++r) {
        EXPECT_EQ(d.performance(r), evaluate_oracle("comparator", "synth45", d.design(r)));
    }
}

TEST(LoadDataset, RejectsMalformedFiles) {
    const Dataset d = build_dataset("comparator", "synth45", 3, 9);
    std::string text = to_text(d);
    {
        std::istringstream in("garbage\n");
        EXPECT_THROW((void)load_dataset(in), DataError);
    }
    {
        std::string t = text;
        t.replace(t.find("x_1"), 3, "q_1");
        std::istringstream in(t);
        EXPECT_THROW((void)load_dataset(in), DataError);
    }
    {
        std::string t = text.substr(0, text.rfind('\n', text.size() - 2) + 1);
        std::istringstream in(t);
        EXPECT_THROW((void)load_dataset(in), DataError);
    }
}

TEST(Split, ExactSizesAndDisjoint) {
    const Dataset d = build_dataset("ota2_nmos", "synth45", 2000, 1);
    const auto [train, test] = split(d, 1500, 500, 7);
    EXPECT_EQ(train.size(), 1500u);
    EXPECT_EQ(test.size(), 500u);
    auto a = rows_of(train);
    auto b = rows_of(test);
    std::vector<std::vector<double>> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    EXPECT_TRUE(common.empty());
}

TEST(Split, SameSeedSamePartition) {
    const Dataset d = build_dataset("tia2", "synth45", 300, 1);
    EXPECT_EQ(split(d, 200, 100, 3), split(d, 200, 100, 3));
    EXPECT_NE(split(d, 200, 100, 3).first, split(d, 200, 100, 4).first);
}

TEST(Split, UnionIsOriginalMultiset) {
    const Dataset d = build_dataset("tia2", "synth45", 300, 1);
    const auto [train, test] = split_fraction(d, 0.7, 5);
    auto all = rows_of(train);
    const auto b = rows_of(test);
    all.insert(all.end(), b.begin(), b.end());
    std::sort(all.begin(), all.end());
    EXPECT_EQ(all, rows_of(d));
}

TEST(Split, OversubscriptionThrows) {
    const Dataset d = build_dataset("tia2", "synth45", 10, 1);
    EXPECT_THROW((void)split(d, 8, 3, 0), DataError);
}

TEST(NormStats, TrainMeanRowMapsToZero) {
    const Dataset d = build_dataset("ota2_pmos", "synth130", 400, 2);
    const NormStats s = NormStats::fit(d);
    Tensor mean_row = Tensor::matrix(1, d.num_parameters());
    for (std::size_t j = 0; j < d.num_parameters(); ++j) mean_row[j] = s.x_mean[j];
    const Tensor z = s.normalize_designs(mean_row);
    for (double v : z.values()) EXPECT_EQ(v, 0.0);
    for (std::size_t j = 0; j < d.num_metrics(); ++j) {
        const double raw = s.y_log[j] ? std::pow(10.0, s.y_mean[j]) : s.y_mean[j];
        EXPECT_NEAR(s.normalize_metric(j, raw), 0.0, 1e-12);
    }
}

TEST(NormStats, RoundTripWithinTolerance) {
    const Dataset d = build_dataset("level_shifter", "synth45", 500, 3);
    const NormStats s = NormStats::fit(d);
    const Tensor y = s.denormalize_metrics(s.normalize_metrics(d.metrics));
    const Tensor x = s.denormalize_designs(s.normalize_designs(d.designs));
    for (std::size_t i = 0; i < y.size(); ++i) {
        EXPECT_LE(std::abs(y[i] - d.metrics[i]), 1e-10 * std::abs(d.metrics[i]));
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        EXPECT_LE(std::abs(x[i] - d.designs[i]), 1e-10 * std::abs(d.designs[i]));
    }
}

TEST(NormStats, LogFlaggedColumnHasUnitStd) {
    const Dataset d = build_dataset("ota2_nmos", "synth45", 1000, 4);
    const NormStats s = NormStats::fit(d);
    const std::size_t ugbw = *d.schema.index_of("ugbw");
    ASSERT_TRUE(s.y_log[ugbw]);
    const Tensor z = s.normalize_metrics(d.metrics);
    double mean = 0.0, sq = 0.0;
    for (std::size_t r = 0; r < z.rows(); ++r) mean += z(r, ugbw);
    mean /= static_cast<double>(z.rows());
    for (std::size_t r = 0; r < z.rows(); ++r) sq += (z(r, ugbw) - mean) * (z(r, ugbw) - mean);
    EXPECT_NEAR(std::sqrt(sq / static_cast<double>(z.rows())), 1.0, 1e-12);
    EXPECT_NEAR(mean, 0.0, 1e-12);
}

TEST(NormStats, ConstantColumnAndBadLogValuesRejected) {
    Dataset d = build_dataset("comparator", "synth45", 50, 4);
    Dataset constant = d;
    for (std::size_t r = 0; r < constant.size(); ++r) constant.designs(r, 2) = 7.0;
    EXPECT_THROW((void)NormStats::fit(constant), DataError);

    Dataset negative = d;
    negative.metrics(3, 0) = -1.0;
    EXPECT_THROW((void)NormStats::fit(negative), DataError);

    const NormStats s = NormStats::fit(d);
    EXPECT_THROW((void)s.normalize_metric(0, 0.0), DataError);
    EXPECT_THROW((void)NormStats::fit(subset(d, {})), DataError);
}

TEST(NormStats, DependOnlyOnTrainingRows) {
    const Dataset d = build_dataset("tia3", "synth45", 600, 8);
    const auto [train, test] = split(d, 400, 200, 1);
    const NormStats before = NormStats::fit(train);
    // Rewrite every row that landed in the test part; the split is content
    // independent, so the same seed yields the same training rows.
    const auto test_rows = rows_of(test);
    Dataset altered = d;
    for (std::size_t r = 0; r < d.size(); ++r) {
        std::vector<double> row(d.designs.row(r).begin(), d.designs.row(r).end());
        row.insert(row.end(), d.metrics.row(r).begin(), d.metrics.row(r).end());
        if (std::binary_search(test_rows.begin(), test_rows.end(), row)) {
            for (double& v : altered.metrics.row(r)) v *= 3.0;
        }
    }
    const auto [train2, test2] = split(altered, 400, 200, 1);
    EXPECT_EQ(train2, train);
    EXPECT_NE(test2, test);
    EXPECT_EQ(NormStats::fit(train2), before);
}
