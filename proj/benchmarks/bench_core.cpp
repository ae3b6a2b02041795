#include <filesystem>

#include <benchmark/benchmark.h>

#include "dtr/cache.hpp"
#include "dtr/compression.hpp"
#include "dtr/graph.hpp"
#include "dtr/pipeline.hpp"
#include "dtr/transformer.hpp"

using namespace dtr;

namespace {

ModelConfig bench_config(std::uint32_t hidden) {
    ModelConfig c;
    c.n_layers = 12;
    c.hidden = hidden;
    c.heads = 4;
    c.ffn = hidden * 4;
    c.vocab = 1000;
    c.max_positions = 520;
    c.dropout = c.attention_dropout = 0.0f;
    return c;
}

std::vector<std::int32_t> ids(std::size_t n, std::uint64_t seed) {
    CounterRng rng(seed);
    std::vector<std::int32_t> out(n);
    for (auto& v : out) v = static_cast<std::int32_t>(kFirstContentToken + rng.below(900));
    return out;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    CounterRng rng(1);
    Tensor<float> a({n, n}), b({n, n});
    for (auto& v : a.values()) v = static_cast<float>(rng.normal());
    for (auto& v : b.values()) v = static_cast<float>(rng.normal());
    for (auto _ : state) {
        Graph<float> g(false);
        benchmark::DoNotOptimize(ops::matmul(g.constant(a), g.constant(b)).value().data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

static void BM_StandardForward(benchmark::State& state) {
    const auto m = init_standard(bench_config(256), 1);
    const auto layout = pair_layout(ids(16, 2), ids(static_cast<std::size_t>(state.range(0)), 3));
    for (auto _ : state) {
        benchmark::DoNotOptimize(encode(m, std::span<const std::int32_t>(layout.tokens),
                                        std::span<const std::int32_t>(layout.segments))
                                     .start_logits.data());
    }
}
BENCHMARK(BM_StandardForward)->Arg(150)->Unit(benchmark::kMillisecond);

static void BM_DecoupledOnline(benchmark::State& state) {
    const auto m = split_model(init_standard(bench_config(256), 1), SplitSpec{5, 7});
    const auto passage = compress(m, encode_input(m, passage_input(ids(static_cast<std::size_t>(state.range(0)), 3))));
    const auto q = question_input(ids(16, 2));
    for (auto _ : state) {
        const auto qr = encode_input(m, q);
        benchmark::DoNotOptimize(cross_forward(m, qr, decompress(m, passage)).start_logits.data());
    }
}
BENCHMARK(BM_DecoupledOnline)->Arg(150)->Unit(benchmark::kMillisecond);

static void BM_HalfRoundTrip(benchmark::State& state) {
    CounterRng rng(5);
    std::vector<float> v(4096);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    for (auto _ : state) {
        float acc = 0.0f;
        for (float x : v) acc += half_to_float(float_to_half(x));
        benchmark::DoNotOptimize(acc);
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(v.size()));
}
BENCHMARK(BM_HalfRoundTrip);

static void BM_CacheReadEntry(benchmark::State& state) {
    const auto path = std::filesystem::temp_directory_path() / "dtr_bench_cache.dtc";
    const auto m = attach_compression(split_model(init_standard(bench_config(64), 1), SplitSpec{5, 7}), 16, 2);
    std::vector<Passage> passages;
    for (std::uint64_t i = 0; i < 200; ++i) passages.push_back({i, ids(150, 10 + i), ""});
    build_index(m, passages, CacheDtype::f16, path);
    const auto cache = CacheFile::open(path);
    CounterRng rng(7);
    for (auto _ : state) benchmark::DoNotOptimize(cache.read_entry(rng.below(200)).matrix.data());
    const std::vector<float> q(16, 0.5f);
    state.counters["entries"] = static_cast<double>(cache.size());
    benchmark::DoNotOptimize(retrieve(q, cache, 5));
    std::filesystem::remove(path);
}
BENCHMARK(BM_CacheReadEntry)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
