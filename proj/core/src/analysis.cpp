#include "dtr/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "dtr/errors.hpp"

namespace dtr {

SplitFlops flops_split_fraction(SplitSpec split, std::uint32_t total_layers) {
    if (total_layers == 0 || split.total() != total_layers || split.cross_layers == 0) {
        throw ConfigError("flops: split " + split.to_string() + " does not describe a " +
                          std::to_string(total_layers) + "-layer model");
    }
    SplitFlops out;
    out.split = split;
    out.raw = static_cast<double>(split.cross_layers) / total_layers;
    out.displayed = static_cast<double>(100u * split.cross_layers / total_layers) / 100.0;
    return out;
}

std::vector<SplitFlops> flops_sweep(std::uint32_t total_layers) {
    std::vector<SplitFlops> rows;
    for (std::uint32_t x = 0; x < total_layers; ++x) {
        rows.push_back(flops_split_fraction(SplitSpec{x, total_layers - x}, total_layers));
    }
    return rows;
}

std::string format_fraction(double displayed) {
    if (displayed >= 1.0) return "1.0";
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.2f", displayed);
    return std::string(buf + 1);  // drop the leading zero
}

double layer_flops(std::uint64_t L, std::uint64_t d, std::uint64_t ffn) {
    const double l = static_cast<double>(L), h = static_cast<double>(d), f = static_cast<double>(ffn);
    const double mult_adds = 4.0 * l * h * h + 2.0 * l * l * h + 2.0 * l * h * f;
    return 2.0 * mult_adds;
}

namespace {
// Softmax over L x L scores per head plus two layernorms over L x d.
double layer_other(std::uint64_t L, std::uint64_t d, std::uint64_t heads) {
    const double l = static_cast<double>(L);
    return 5.0 * l * l * static_cast<double>(heads) + 2.0 * 8.0 * l * static_cast<double>(d);
}
}  // namespace

FlopsReport flops_detailed(const ModelConfig& config, SplitSpec split, std::uint64_t n_passages,
                           std::uint64_t question_len, std::uint64_t passage_len) {
    if (n_passages == 0 || question_len == 0 || passage_len == 0) throw ConfigError("flops: lengths must be positive");
    if (split.total() != config.n_layers) {
        throw ConfigError("flops: split " + split.to_string() + " does not match " + std::to_string(config.n_layers) +
                          " layers");
    }
    const std::uint64_t d = config.hidden, f = config.ffn, n = config.n_layers;
    const std::uint64_t x = split.input_layers, y = split.cross_layers;
    const std::uint64_t joint = question_len + passage_len;
    const double np = static_cast<double>(n_passages);

    FlopsReport r;
    r.standard_flops = np * static_cast<double>(n) * layer_flops(joint, d, f);
    const double question_stack = static_cast<double>(x) * layer_flops(question_len, d, f);
    const double cross_stack = np * static_cast<double>(y) * layer_flops(joint, d, f);
    r.decoupled_online_flops = question_stack + cross_stack;
    r.offline_passage_flops = np * static_cast<double>(x) * layer_flops(passage_len, d, f);
    r.online_fraction = r.decoupled_online_flops / r.standard_flops;
    r.breakdown = {{"question input stack", question_stack, true},
                   {"passage input stack (offline)", r.offline_passage_flops, false},
                   {"cross stack", cross_stack, true}};
    r.other_flops_standard = np * static_cast<double>(n) * layer_other(joint, d, config.heads);
    r.other_flops_decoupled = static_cast<double>(x) * layer_other(question_len, d, config.heads) +
                              np * static_cast<double>(y) * layer_other(joint, d, config.heads);
    r.lower_pairs_standard = n_passages * joint * joint;
    r.lower_pairs_decoupled = question_len * question_len + n_passages * passage_len * passage_len;
    r.lower_pair_ratio = static_cast<double>(r.lower_pairs_decoupled) / static_cast<double>(r.lower_pairs_standard);
    return r;
}

ScenarioLengths scenario_lengths(Scenario s) {
    return s == Scenario::long_inputs ? ScenarioLengths{64, 448} : ScenarioLengths{16, 150};
}

Scenario parse_scenario(const std::string& name) {
    if (name == "long") return Scenario::long_inputs;
    if (name == "short") return Scenario::short_inputs;
    throw ConfigError("unknown scenario '" + name + "' (expected long or short)");
}

const char* scenario_name(Scenario s) { return s == Scenario::long_inputs ? "long" : "short"; }

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

namespace {

using Clock = std::chrono::steady_clock;

template <typename F>
double time_ms(F&& f, std::uint32_t inner) {
    const auto t0 = Clock::now();
    for (std::uint32_t i = 0; i < inner; ++i) f();
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / inner;
}

}  // namespace

BenchReport bench(const StandardModel& standard, const std::vector<BenchTarget>& targets, Scenario scenario,
                  std::uint32_t repeats, std::uint64_t seed) {
    if (repeats < 4) throw ConfigError("bench: at least 4 repeats are required");
    const ScenarioLengths lengths = scenario_lengths(scenario);
    if (lengths.question + lengths.passage + 3 > standard.config.max_positions) {
        throw ConfigError("bench: model max_positions " + std::to_string(standard.config.max_positions) +
                          " is too small for the " + scenario_name(scenario) + " scenario");
    }
    CounterRng rng = CounterRng(seed).split("bench");
    const auto content = static_cast<std::uint32_t>(standard.config.vocab - kFirstContentToken);
    auto draw = [&](std::size_t n) {
        std::vector<std::int32_t> ids(n);
        for (auto& id : ids) id = static_cast<std::int32_t>(kFirstContentToken + rng.below(content));
        return ids;
    };
    const auto question = draw(lengths.question);
    const auto passage = draw(lengths.passage);
    const PairLayout pair = pair_layout(question, passage);
    const std::vector<std::int32_t> q_input = question_input(question);

    struct Job {
        std::string name;
        std::function<void()> run;
    };
    std::vector<Job> jobs;
    auto standard_run = [&] {
        encode(standard, std::span<const std::int32_t>(pair.tokens), std::span<const std::int32_t>(pair.segments));
    };
    jobs.push_back({"standard", standard_run});
    jobs.push_back({"standard (control)", standard_run});
    std::vector<CompressedRepresentation> cached;
    cached.reserve(targets.size());
    for (const auto& t : targets) {
        if (!t.model) throw ConfigError("bench: null model for " + t.name);
        cached.push_back(compress(*t.model, encode_input(*t.model, passage_input(passage))));
    }
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const DecoupledModel& m = *targets[i].model;
        const CompressedRepresentation& entry = cached[i];
        jobs.push_back({targets[i].name, [&m, &entry, &q_input] {
                            const Representation q = encode_input(m, q_input);
                            cross_forward(m, q, decompress(m, entry));
                        }});
    }

    BenchReport report;
    report.scenario = scenario;
    report.repeats = repeats;
    // Clock check: one warm-up run per job; very short workloads loop.
    double shortest = 1e300;
    for (auto& j : jobs) shortest = std::min(shortest, time_ms(j.run, 1));
    const double floor_ms = 1.0;
    if (shortest < floor_ms) {
        report.inner_iterations = static_cast<std::uint32_t>(std::ceil(floor_ms / std::max(shortest, 1e-6)));
        report.notes.push_back("runs shorter than " + std::to_string(floor_ms) + " ms; each sample loops " +
                               std::to_string(report.inner_iterations) + " iterations");
    }
    report.rows.resize(jobs.size());
    // Interleave configurations so drift affects all of them alike.
    for (std::uint32_t r = 0; r < repeats; ++r) {
        for (std::size_t j = 0; j < jobs.size(); ++j) {
            report.rows[j].ms.push_back(time_ms(jobs[j].run, report.inner_iterations));
        }
    }
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        BenchRow& row = report.rows[j];
        row.name = jobs[j].name;
        row.mean_ms = std::accumulate(row.ms.begin(), row.ms.end(), 0.0) / static_cast<double>(row.ms.size());
        row.median_ms = median(row.ms);
    }
    const double base = report.rows[0].median_ms;
    for (auto& row : report.rows) row.percent_vs_baseline = 100.0 * (row.median_ms - base) / base;
    return report;
}

std::string format_flops_table(const std::vector<SplitFlops>& sweep) {
    std::ostringstream out;
    out << "split   FLOPs   raw\n";
    for (const auto& r : sweep) {
        char line[64];
        const std::string name = r.split.input_layers == 0 ? "std" : r.split.to_string();
        std::snprintf(line, sizeof line, "%-7s %-7s %.4f\n", name.c_str(), format_fraction(r.displayed).c_str(), r.raw);
        out << line;
    }
    return out.str();
}

std::string format_flops_report(const FlopsReport& r) {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof line, "standard online FLOPs      %.6e\n", r.standard_flops);
    out << line;
    std::snprintf(line, sizeof line, "decoupled online FLOPs     %.6e  (%.4f of standard)\n", r.decoupled_online_flops,
                  r.online_fraction);
    out << line;
    for (const auto& s : r.breakdown) {
        std::snprintf(line, sizeof line, "  %-30s %.6e\n", s.stage.c_str(), s.flops);
        out << line;
    }
    std::snprintf(line, sizeof line, "offline passage FLOPs      %.6e\n", r.offline_passage_flops);
    out << line;
    std::snprintf(line, sizeof line, "softmax/layernorm (excl.)  %.6e standard, %.6e decoupled\n",
                  r.other_flops_standard, r.other_flops_decoupled);
    out << line;
    std::snprintf(line, sizeof line, "lower-layer token pairs    %llu decoupled / %llu standard = %.9f\n",
                  static_cast<unsigned long long>(r.lower_pairs_decoupled),
                  static_cast<unsigned long long>(r.lower_pairs_standard), r.lower_pair_ratio);
    out << line;
    return out.str();
}

std::string format_bench_table(const BenchReport& r) {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof line, "scenario %s, %u repeats\n", scenario_name(r.scenario), r.repeats);
    out << line;
    std::snprintf(line, sizeof line, "%-28s %12s %12s %10s\n", "configuration", "median ms", "mean ms", "vs base");
    out << line;
    for (const auto& row : r.rows) {
        std::snprintf(line, sizeof line, "%-28s %12.2f %12.2f %9.1f%%\n", row.name.c_str(), row.median_ms, row.mean_ms,
                      row.percent_vs_baseline);
        out << line;
    }
    for (const auto& n : r.notes) out << "note: " << n << '\n';
    return out.str();
}

}  // namespace dtr
