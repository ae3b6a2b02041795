#include <cmath>

#include <gtest/gtest.h>

#include "dtr/analysis.hpp"
#include "dtr/compression.hpp"
#include "dtr/errors.hpp"
#include "tiny.hpp"

namespace {

using namespace dtr;

TEST(Flops, TwelveLayerSweep) {
    const auto rows = flops_sweep(12);
    const char* expected[] = {"1.0", ".91", ".83", ".75", ".66", ".58", ".50", ".41", ".33", ".25", ".16", ".08"};
    ASSERT_EQ(rows.size(), 12u);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(format_fraction(rows[i].displayed), expected[i]) << i;
        EXPECT_EQ(rows[i].split.input_layers, i);
    }
    EXPECT_NEAR(rows[1].raw, 11.0 / 12.0, 1e-15);
    EXPECT_NEAR(rows[1].raw - rows[2].raw, 1.0 / 12.0, 1e-15);
}

TEST(Flops, SplitFractionValidation) {
    EXPECT_DOUBLE_EQ(flops_split_fraction(SplitSpec{6, 6}, 12).displayed, 0.5);
    EXPECT_THROW(flops_split_fraction(SplitSpec{6, 5}, 12), ConfigError);
    EXPECT_THROW(flops_split_fraction(SplitSpec{12, 0}, 12), ConfigError);
}

ModelConfig base_config() {
    ModelConfig c;
    c.n_layers = 12;
    c.hidden = 768;
    c.heads = 12;
    c.ffn = 3072;
    c.vocab = 30522;
    c.max_positions = 512;
    return c;
}

TEST(Flops, TokenPairRatio) {
    const auto r = flops_detailed(base_config(), SplitSpec{5, 7}, 10, 16, 150);
    EXPECT_EQ(r.lower_pairs_standard, 275'560u);
    EXPECT_EQ(r.lower_pairs_decoupled, 225'256u);
    EXPECT_NEAR(r.lower_pair_ratio, 225'256.0 / 275'560.0, 1e-9);
}

TEST(Flops, LayerCost) {
    // 2 * (4 L d^2 + 2 L^2 d + 2 L d f) at L = 10, d = 4, f = 8
    EXPECT_DOUBLE_EQ(layer_flops(10, 4, 8), 2.0 * (4 * 10 * 16 + 2 * 100 * 4 + 2 * 10 * 4 * 8));
}

TEST(Flops, NoInputLayersIsStandard) {
    const auto r = flops_detailed(base_config(), SplitSpec{0, 12}, 1, 16, 150);
    EXPECT_DOUBLE_EQ(r.decoupled_online_flops, r.standard_flops);
    EXPECT_DOUBLE_EQ(r.online_fraction, 1.0);
    EXPECT_DOUBLE_EQ(r.offline_passage_flops, 0.0);
}

TEST(Flops, DetailedProperties) {
    CounterRng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        ModelConfig c = base_config();
        c.n_layers = 2 + static_cast<std::uint32_t>(rng.below(23));
        c.hidden = 16 * (1 + static_cast<std::uint32_t>(rng.below(64)));
        c.ffn = c.hidden * (1 + static_cast<std::uint32_t>(rng.below(4)));
        const auto x = static_cast<std::uint32_t>(rng.below(c.n_layers));
        const SplitSpec s{x, c.n_layers - x};
        const auto r = flops_detailed(c, s, 1 + rng.below(50), 1 + rng.below(100), 1 + rng.below(500));
        EXPECT_GT(r.online_fraction, 0.0);
        EXPECT_LE(r.online_fraction, 1.0);
        double online = 0.0;
        for (const auto& st : r.breakdown) online += st.online ? st.flops : 0.0;
        EXPECT_NEAR(online, r.decoupled_online_flops, 1e-9 * r.decoupled_online_flops);
        EXPECT_LE(r.lower_pair_ratio, 1.0);
    }
}

TEST(Flops, ShortQuestionLimitIsLayerFraction) {
    for (std::uint32_t x = 1; x < 12; ++x) {
        const SplitSpec s{x, 12 - x};
        const auto r = flops_detailed(base_config(), s, 4, 1, 200'000);
        EXPECT_NEAR(r.online_fraction, flops_split_fraction(s, 12).raw, 1e-4) << x;
    }
}

TEST(Flops, DetailedValidation) {
    EXPECT_THROW(flops_detailed(base_config(), SplitSpec{5, 7}, 0, 16, 150), ConfigError);
    EXPECT_THROW(flops_detailed(base_config(), SplitSpec{5, 6}, 1, 16, 150), ConfigError);
}

TEST(Bench, Median) {
    EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
    EXPECT_DOUBLE_EQ(median({4, 1, 3, 2}), 2.5);
}

TEST(Bench, ReportShape) {
    ModelConfig c = dtr::testing::tiny_config(4, 16, 2);
    c.max_positions = 200;
    const auto standard = init_standard(c, 1);
    const auto dec = split_model(standard, SplitSpec{2, 2});
    const auto comp = attach_compression(dec, 4, 2);
    const auto report = bench(standard, {{"decoupled 2-2", &dec}, {"+ 4x compress", &comp}}, Scenario::short_inputs, 4);
    ASSERT_EQ(report.rows.size(), 4u);
    EXPECT_EQ(report.rows[0].name, "standard");
    EXPECT_EQ(report.rows[0].percent_vs_baseline, 0.0);
    for (const auto& row : report.rows) {
        EXPECT_EQ(row.ms.size(), 4u);
        EXPECT_GT(row.median_ms, 0.0);
    }
    const std::string table = format_bench_table(report);
    EXPECT_NE(table.find("+ 4x compress"), std::string::npos);
    EXPECT_THROW(bench(standard, {}, Scenario::short_inputs, 3), ConfigError);
    EXPECT_THROW(bench(standard, {}, Scenario::long_inputs, 4), ConfigError);
    EXPECT_EQ(parse_scenario("long"), Scenario::long_inputs);
    EXPECT_THROW(parse_scenario("medium"), ConfigError);
}

}  // namespace
