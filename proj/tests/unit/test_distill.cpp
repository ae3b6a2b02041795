#include <cmath>

#include <gtest/gtest.h>
#include "json.hpp"

#include "dtr/distill.hpp"
#include "dtr/errors.hpp"
#include "models.hpp"
#include "tiny.hpp"

namespace {

using namespace dtr;
using dtr::testing::changed;
using dtr::testing::snapshot;
using dtr::testing::tiny_config;

// Logits-only output with one row of `n` positions.
EncodeOutput<float> logits_only(std::vector<float> start, std::vector<float> end) {
    EncodeOutput<float> o;
    o.batch = 1;
    o.length = start.size();
    const std::size_t n = start.size();
    o.start_logits = Tensor<float>({1, n}, std::move(start));
    o.end_logits = Tensor<float>({1, n}, std::move(end));
    return o;
}

DistillConfig kl_only(double lambda, double t) {
    DistillConfig c;
    c.lambda = lambda;
    c.temperature = t;
    c.sigma = 0.0;
    c.use_mse_repr = c.use_mse_attn = false;
    return c;
}

TEST(KdLoss, HandComputedKl) {
    // KL(softmax([2/3, 0]) || softmax([0, 2/3])), brute-forced in double
    // precision outside the library.
    const auto teacher = logits_only({2, 0}, {2, 0});
    const auto student = logits_only({0, 2}, {0, 2});
    const std::uint32_t gold[] = {0};
    const LossBreakdown b = kd_loss(student, &teacher, {gold, gold, {}}, kl_only(1.0, 3.0));
    EXPECT_NEAR(b.kl / 9.0, 0.2143418, 1e-6);
    EXPECT_NEAR(b.kl, 1.9290764, 1e-5);
    EXPECT_NEAR(b.total, b.kl, 1e-6);
}

TEST(KdLoss, IdenticalLogitsGiveZero) {
    const auto t = logits_only({0.3f, -1.0f, 2.0f}, {1.0f, 0.5f, -0.5f});
    const std::uint32_t gold[] = {1};
    const LossBreakdown b = kd_loss(t, &t, {gold, gold, {}}, kl_only(1.0, 3.0));
    EXPECT_NEAR(b.kl, 0.0, 1e-7);
    EXPECT_NEAR(b.total, 0.0, 1e-7);
}

TEST(KdLoss, LambdaZeroIsTaskLoss) {
    CounterRng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<float> s(9), e(9);
        for (auto& v : s) v = static_cast<float>(rng.normal() * 2);
        for (auto& v : e) v = static_cast<float>(rng.normal() * 2);
        const auto st = logits_only(s, e);
        const std::uint32_t gs[] = {static_cast<std::uint32_t>(rng.below(9))};
        const std::uint32_t ge[] = {static_cast<std::uint32_t>(rng.below(9))};
        DistillConfig c;
        c.lambda = 0.0;
        c.sigma = 0.0;
        c.use_kl = c.use_mse_repr = c.use_mse_attn = false;
        const LossBreakdown b = kd_loss(st, nullptr, {gs, ge, {}}, c);
        EXPECT_EQ(b.total, b.ce);
        EXPECT_NEAR(b.ce, span_ce_loss(s, e, gs[0], ge[0]), 1e-5);
    }
}

TEST(KdLoss, MisalignedTeacherRejected) {
    const auto t = logits_only({0, 1, 2}, {0, 1, 2});
    const auto s = logits_only({0, 1}, {0, 1});
    const std::uint32_t gold[] = {0};
    EXPECT_THROW(kd_loss(s, &t, {gold, gold, {}}, kl_only(0.5, 2.0)), ShapeError);
    EXPECT_THROW(kd_loss(s, nullptr, {gold, gold, {}}, kl_only(0.5, 2.0)), ConfigError);
}

TEST(KdLoss, InvalidConfigRejected) {
    DistillConfig c;
    c.lambda = 1.5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.temperature = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.sigma = -1.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

class KdLossModels : public ::testing::Test {
protected:
    void SetUp() override {
        teacher = init_standard(tiny_config(4, 8, 2), 11);
        student = split_model(teacher, SplitSpec{2, 2});
        // perturb the student so every term is non-zero
        CounterRng rng(12);
        visit_parameters(student, [&](const std::string&, Tensor<float>& t, std::uint32_t) {
            for (auto& v : t.values()) v += static_cast<float>(0.05 * rng.normal());
        });
        SyntheticTaskSpec spec;
        spec.vocab_size = 20;
        spec.min_passage_len = 8;
        spec.max_passage_len = 12;
        spec.seed = 13;
        data = generate_synthetic(spec, 6);
    }

    std::pair<LossBreakdown, double> loss(const DistillConfig& cfg) {
        std::vector<std::size_t> idx = {0, 1, 2, 3, 4, 5};
        const ExampleBatch batch = ExampleBatch::make(data, idx);
        const EncodeOutput<float> t = encode(teacher, batch.pairs);
        Graph<float> g(false);
        const auto traced = trace_student(g, student, batch, {});
        const auto out = kd_loss(g, traced, &t, {batch.gold_start, batch.gold_end, batch.pairs.mask}, cfg);
        return {out.parts, static_cast<double>(out.total.value().item())};
    }

    StandardModel teacher;
    DecoupledModel student;
    Dataset data;
};

TEST_F(KdLossModels, TotalIsWeightedSum) {
    CounterRng rng(5);
    for (int trial = 0; trial < 12; ++trial) {
        DistillConfig c;
        c.lambda = rng.uniform();
        c.temperature = 0.5 + 4 * rng.uniform();
        c.sigma = 2 * rng.uniform();
        c.use_kl = rng.below(2);
        c.use_mse_repr = rng.below(2);
        c.use_mse_attn = rng.below(2);
        c.mse_all_layers = rng.below(2);
        const auto [parts, total] = loss(c);
        EXPECT_NEAR(total, LossBreakdown::combine(parts, c), 1e-6 * std::max(1.0, std::abs(total)));
        EXPECT_GE(parts.kl, 0.0);
        if (!c.use_kl) EXPECT_EQ(parts.kl, 0.0);
        if (!c.use_mse_repr) EXPECT_EQ(parts.mse_repr, 0.0);
    }
}

TEST_F(KdLossModels, DisabledTermEqualsZeroWeight) {
    DistillConfig on;
    const auto [full, full_total] = loss(on);
    EXPECT_GT(full.kl, 0.0);
    EXPECT_GT(full.mse_repr, 0.0);
    EXPECT_GT(full.mse_attn, 0.0);

    DistillConfig no_mse = on;
    no_mse.use_mse_repr = no_mse.use_mse_attn = false;
    DistillConfig zero_sigma = on;
    zero_sigma.sigma = 0.0;
    EXPECT_NEAR(loss(no_mse).second, loss(zero_sigma).second, 1e-6);

    DistillConfig no_kl = on;
    no_kl.use_kl = false;
    EXPECT_NEAR(loss(no_kl).second, full_total - on.lambda * full.kl, 1e-5);
}

TEST_F(KdLossModels, AllLayersAddsLowerLayers) {
    DistillConfig last, all;
    all.mse_all_layers = true;
    const auto a = loss(last).first, b = loss(all).first;
    EXPECT_GT(b.mse_repr, a.mse_repr);
    EXPECT_GT(b.mse_attn, a.mse_attn);
}

TEST(KdLoss, LargeTemperatureLinearises) {
    // At large T the KL gradient tends to (dz - mean dz) / (2 n) per row.
    const double t = 100.0;
    const std::size_t n = 7;
    CounterRng rng(9);
    std::vector<double> zs(n), zt(n);
    for (auto& v : zs) v = rng.normal();
    for (auto& v : zt) v = rng.normal();
    Graph<double> g;
    TracedOutput<double> student;
    student.start_logits = g.variable(Tensor<double>({1, n}, zs));
    student.end_logits = g.constant(Tensor<double>({1, n}, zt));
    EncodeOutput<double> teacher;
    teacher.start_logits = Tensor<double>({1, n}, zt);
    teacher.end_logits = Tensor<double>({1, n}, zt);
    const std::uint32_t gold[] = {0};
    DistillConfig c = kl_only(1.0, t);
    auto loss = kd_loss<double>(g, student, &teacher, {gold, gold, {}}, c);
    g.backward(loss.total);
    const Tensor<double>& grad = *g.grad(student.start_logits);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += (zs[i] - zt[i]) / n;
    double err = 0.0, norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double lin = ((zs[i] - zt[i]) - mean) / (2.0 * n);
        err += (grad.values()[i] - lin) * (grad.values()[i] - lin);
        norm += lin * lin;
    }
    EXPECT_LT(std::sqrt(err / norm), 1e-2);
}

TEST(Metrics, SpanScores) {
    EXPECT_DOUBLE_EQ(span_f1(7, 10, 5, 8), 0.5);
    EXPECT_DOUBLE_EQ(span_exact_match(7, 10, 5, 8), 0.0);
    EXPECT_DOUBLE_EQ(span_f1(5, 8, 5, 8), 1.0);
    EXPECT_DOUBLE_EQ(span_exact_match(0, 0, 0, 0), 1.0);
    EXPECT_DOUBLE_EQ(span_f1(0, 0, 0, 0), 1.0);
    EXPECT_DOUBLE_EQ(span_f1(0, 0, 5, 6), 0.0);
    EXPECT_DOUBLE_EQ(span_f1(5, 6, 0, 0), 0.0);
    EXPECT_DOUBLE_EQ(span_f1(3, 4, 5, 6), 0.0);
}

TEST(Metrics, EmptyDatasetRejected) {
    const auto m = init_standard(tiny_config(), 1);
    EXPECT_THROW(evaluate(m, Dataset{}), DataError);
}

TEST(TrainConfigTest, Validation) {
    TrainConfig c;
    c.batch_size = 10;
    c.epochs = 2;
    c.warmup_steps = 5;
    EXPECT_EQ(c.total_steps(95), 20u);
    EXPECT_NO_THROW(c.validate(95));
    c.warmup_steps = 21;
    EXPECT_THROW(c.validate(95), ConfigError);
    EXPECT_THROW(c.validate(0), DataError);
}

class Training : public ::testing::Test {
protected:
    void SetUp() override {
        SyntheticTaskSpec spec;
        spec.vocab_size = 20;
        spec.min_passage_len = 8;
        spec.max_passage_len = 12;
        spec.seed = 21;
        const Dataset all = generate_synthetic(spec, 48);
        train = all.head(40);
        eval = all.tail(40);
        teacher = init_standard(tiny_config(2, 8, 2), 22);
        config.lr = 1e-2;
        config.warmup_steps = 2;
        config.batch_size = 8;
        config.epochs = 2;
        config.seed = 23;
    }

    Dataset train, eval;
    StandardModel teacher;
    TrainConfig config;
};

TEST_F(Training, ZeroGradientLeavesIdenticalStudentUnchanged) {
    StandardModel student = teacher;
    DistillConfig c = kl_only(1.0, 3.0);
    const auto before = snapshot(student);
    train_student(student, &teacher, train, Dataset{}, c, config);
    EXPECT_TRUE(changed(before, snapshot(student)).empty());
}

TEST_F(Training, FreezeKeepsGlobalTables) {
    DecoupledModel student = split_model(teacher, SplitSpec{1, 1});
    DistillConfig c;
    c.freeze_global_embeddings = true;
    const auto before = snapshot(student);
    train_decoupled(teacher, student, train, Dataset{}, c, config);
    const auto diff = changed(before, snapshot(student));
    EXPECT_FALSE(diff.empty());
    for (const auto& name : diff) EXPECT_NE(name.rfind("global.", 0), 0u) << name;

    DecoupledModel free = split_model(teacher, SplitSpec{1, 1});
    c.freeze_global_embeddings = false;
    train_decoupled(teacher, free, train, Dataset{}, c, config);
    EXPECT_FALSE(free.global_position == student.global_position);
}

TEST_F(Training, DeterministicPerSeed) {
    DecoupledModel a = split_model(teacher, SplitSpec{1, 1});
    DecoupledModel b = a;
    const DistillConfig c;
    const auto ra = train_decoupled(teacher, a, train, eval, c, config);
    const auto rb = train_decoupled(teacher, b, train, eval, c, config);
    EXPECT_TRUE(changed(snapshot(a), snapshot(b)).empty());
    ASSERT_EQ(ra.trace.size(), 2u);
    EXPECT_EQ(trace_line(ra.trace[1]), trace_line(rb.trace[1]));
    EXPECT_EQ(ra.steps, 10u);

    DecoupledModel d = split_model(teacher, SplitSpec{1, 1});
    TrainConfig other = config;
    other.seed = 24;
    train_decoupled(teacher, d, train, eval, c, other);
    EXPECT_FALSE(changed(snapshot(a), snapshot(d)).empty());
}

TEST_F(Training, TeacherLossFalls) {
    config.epochs = 6;
    config.lr = 3e-2;
    const auto r = train_teacher(teacher, train, eval, config);
    ASSERT_EQ(r.trace.size(), 6u);
    EXPECT_LT(r.trace.back().loss.ce, r.trace.front().loss.ce);
    EXPECT_EQ(r.trace.back().loss.kl, 0.0);
}

TEST_F(Training, NonFiniteLossAborts) {
    StandardModel broken = teacher;
    broken.head.start.values()[0] = std::nanf("");
    try {
        train_teacher(broken, train, eval, config);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos) << e.what();
    }
}

TEST_F(Training, MismatchedTeacherRejected) {
    DecoupledModel student = split_model(init_standard(tiny_config(2, 16, 2), 1), SplitSpec{1, 1});
    EXPECT_THROW(train_decoupled(teacher, student, train, eval, DistillConfig{}, config), ConfigError);
}

TEST(Trace, LineHasAllFields) {
    TraceRecord r;
    r.step = 7;
    r.epoch = 1;
    r.loss.ce = 0.5;
    r.eval.exact_match = 88.5;
    const auto j = nlohmann::json::parse(trace_line(r));
    for (const char* key : {"step", "epoch", "ce", "kl", "mse_repr", "mse_attn", "total", "em", "f1"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_EQ(j["step"], 7);
    EXPECT_EQ(j["em"], 88.5);
}

}  // namespace
