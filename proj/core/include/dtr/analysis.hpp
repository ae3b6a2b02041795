#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtr/config.hpp"
#include "dtr/decoupled.hpp"
#include "dtr/transformer.hpp"

namespace dtr {

/// Fraction of the standard model's per-question work left online: y / n.
/// `displayed` truncates to two decimals using integer arithmetic.
struct SplitFlops {
    SplitSpec split;
    double raw = 1.0;
    double displayed = 1.0;
};

// No validation beyond x + y == total_layers, so 0-n describes the
// standard model.
SplitFlops flops_split_fraction(SplitSpec split, std::uint32_t total_layers);

// The standard model (0-n) followed by every split 1..n-1.
std::vector<SplitFlops> flops_sweep(std::uint32_t total_layers);

// Two-decimal display: "1.0" for one, ".91" for fractions.
std::string format_fraction(double displayed);

struct StageFlops {
    std::string stage;
    double flops = 0.0;
    bool online = true;  // passage input stack is offline work
};

/// Detailed cost model. Mult-adds count as two FLOPs. Per layer at length L:
/// 4 L d^2 projections, 2 L^2 d attention scores and context, 2 L d ffn
/// feed-forward. Softmax and layernorm (O(L d)) are reported in
/// other_flops and excluded from the totals.
struct FlopsReport {
    double standard_flops = 0.0;
    double decoupled_online_flops = 0.0;
    double offline_passage_flops = 0.0;
    double online_fraction = 1.0;
    std::vector<StageFlops> breakdown;  // online stages sum to decoupled_online_flops
    double other_flops_standard = 0.0;
    double other_flops_decoupled = 0.0;

    // Attention-score token pairs in the lower x layers (per layer).
    std::uint64_t lower_pairs_standard = 0;
    std::uint64_t lower_pairs_decoupled = 0;
    double lower_pair_ratio = 1.0;
};

double layer_flops(std::uint64_t length, std::uint64_t hidden, std::uint64_t ffn);

// x = 0 is accepted and reproduces the standard cost.
FlopsReport flops_detailed(const ModelConfig& config, SplitSpec split, std::uint64_t n_passages,
                           std::uint64_t question_len, std::uint64_t passage_len);

enum class Scenario { long_inputs, short_inputs };

struct ScenarioLengths {
    std::size_t question = 0;
    std::size_t passage = 0;
};
ScenarioLengths scenario_lengths(Scenario scenario);
Scenario parse_scenario(const std::string& name);
const char* scenario_name(Scenario scenario);

struct BenchRow {
    std::string name;
    std::vector<double> ms;  // one sample per repeat
    double mean_ms = 0.0;
    double median_ms = 0.0;
    double percent_vs_baseline = 0.0;  // negative is faster
};

struct BenchReport {
    Scenario scenario = Scenario::long_inputs;
    std::uint32_t repeats = 0;
    std::uint32_t inner_iterations = 1;
    std::vector<BenchRow> rows;  // baseline first
    std::vector<std::string> notes;
};

struct BenchTarget {
    std::string name;
    const DecoupledModel* model = nullptr;
};

/// Times the standard forward on the pair (baseline), a second standard run
/// as a noise control, and for each decoupled model the online path only:
/// question encode, decompression of a pre-built passage cache entry and the
/// cross-component. Inputs are random content ids drawn from `seed`.
/// repeats must be >= 4; when one run is too short for the clock, each
/// sample loops more iterations and a note says so.
BenchReport bench(const StandardModel& standard, const std::vector<BenchTarget>& targets, Scenario scenario,
                  std::uint32_t repeats, std::uint64_t seed = 0);

double median(std::vector<double> values);

std::string format_flops_table(const std::vector<SplitFlops>& sweep);
std::string format_flops_report(const FlopsReport& report);
std::string format_bench_table(const BenchReport& report);

}  // namespace dtr
