#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "run_config.hpp"
#include "workflow.hpp"

#include "dtr/analysis.hpp"
#include "dtr/compression.hpp"
#include "dtr/errors.hpp"

namespace {

using namespace dtr;
using namespace dtr::cli;
using nlohmann::ordered_json;

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

RunConfig load_config(const std::string& path) {
    return (path.empty() ? RunConfig::defaults() : RunConfig::load(path)).resolved();
}

void print_metrics(const char* label, const EvalMetrics& m) {
    ordered_json j;
    j[label] = metrics_json(m);
    std::cout << j.dump() << '\n';
}

ordered_json bench_json(const BenchReport& r) {
    ordered_json j;
    j["scenario"] = scenario_name(r.scenario);
    j["repeats"] = r.repeats;
    j["inner_iterations"] = r.inner_iterations;
    for (const auto& row : r.rows) {
        j["rows"].push_back({{"name", row.name},
                             {"median_ms", row.median_ms},
                             {"mean_ms", row.mean_ms},
                             {"percent_vs_baseline", row.percent_vs_baseline},
                             {"samples_ms", row.ms}});
    }
    j["notes"] = r.notes;
    return j;
}

ordered_json flops_json(const FlopsReport& r) {
    ordered_json j;
    j["mode"] = "detailed";
    j["standard_flops"] = r.standard_flops;
    j["decoupled_online_flops"] = r.decoupled_online_flops;
    j["offline_passage_flops"] = r.offline_passage_flops;
    j["online_fraction"] = r.online_fraction;
    for (const auto& s : r.breakdown) j["breakdown"].push_back({{"stage", s.stage}, {"flops", s.flops}, {"online", s.online}});
    j["other_flops_standard"] = r.other_flops_standard;
    j["other_flops_decoupled"] = r.other_flops_decoupled;
    j["lower_pairs_standard"] = r.lower_pairs_standard;
    j["lower_pairs_decoupled"] = r.lower_pairs_decoupled;
    j["lower_pair_ratio"] = r.lower_pair_ratio;
    return j;
}

int run(int argc, char** argv) {
    CLI::App app{"Decoupled transformer reader: training, indexing and analysis"};
    app.set_help_all_flag("--help-all", "Help for every subcommand");
    bool print_defaults = false;
    app.add_flag("--print-defaults", print_defaults, "Print the default run config as JSON and exit");

    std::string config_path, out, data_dir, teacher, student, model, cache, passages, question, split_text, dtype;
    bool on_train = false;

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic reading task");
    gen->add_option("--config", config_path, "Run config (JSON)")->check(CLI::ExistingFile);
    gen->add_option("--out", out, "Output directory")->required();

    auto* tt = app.add_subcommand("train-teacher", "Fine-tune the standard model");
    tt->add_option("--config", config_path)->check(CLI::ExistingFile);
    tt->add_option("--data", data_dir, "Directory written by gen-data")->required();
    tt->add_option("--out", out, "Output directory")->required();

    auto* dec = app.add_subcommand("decouple", "Split a standard checkpoint into a decoupled one");
    dec->add_option("--teacher", teacher)->required();
    dec->add_option("--split", split_text, "x-y, e.g. 5-7")->required();
    dec->add_option("--out", out, "Output checkpoint")->required();

    auto* dis = app.add_subcommand("distill", "Distill a decoupled student from the teacher");
    dis->add_option("--config", config_path)->check(CLI::ExistingFile);
    dis->add_option("--teacher", teacher)->required();
    dis->add_option("--student", student, "Checkpoint written by decouple")->required();
    dis->add_option("--data", data_dir)->required();
    dis->add_option("--out", out, "Output directory")->required();

    auto* comp = app.add_subcommand("compress", "Attach and train the compression bottleneck");
    comp->add_option("--config", config_path)->check(CLI::ExistingFile);
    comp->add_option("--teacher", teacher)->required();
    comp->add_option("--student", student)->required();
    comp->add_option("--data", data_dir)->required();
    comp->add_option("--out", out)->required();
    std::uint32_t dim_override = 0;
    bool skip1 = false, skip2 = false;
    comp->add_option("--dim", dim_override, "Bottleneck width (overrides compression.dim)");
    comp->add_flag("--skip-phase1", skip1);
    comp->add_flag("--skip-phase2", skip2);

    auto* idx = app.add_subcommand("index", "Encode passages offline into a cache file");
    idx->add_option("--model", model, "Decoupled checkpoint")->required();
    idx->add_option("--passages", passages, "passages.jsonl")->required();
    idx->add_option("--dtype", dtype, "f16 or f32")->default_val("f16");
    idx->add_option("--out", out, "Cache file")->required();

    auto* ask = app.add_subcommand("ask", "Answer a question from the cache");
    ask->add_option("--model", model)->required();
    ask->add_option("--cache", cache)->required();
    ask->add_option("--passages", passages)->required();
    ask->add_option("--question", question, "Token ids, e.g. \"7\" or \"w7 w9\"")->required();
    std::size_t k = 5;
    std::uint32_t max_len = kDefaultMaxAnswerLength;
    ask->add_option("--k", k, "Passages to read")->default_val(5);
    ask->add_option("--max-answer-length", max_len)->default_val(kDefaultMaxAnswerLength);

    auto* ev = app.add_subcommand("eval", "EM/F1 of a checkpoint");
    ev->add_option("--model", model)->required();
    ev->add_option("--data", data_dir)->required();
    ev->add_flag("--train-split", on_train, "Score the training examples instead of eval");
    ev->add_option("--cache", cache, "Read passages from this cache (decoupled models)");
    ev->add_option("--max-answer-length", max_len)->default_val(kDefaultMaxAnswerLength);

    auto* fl = app.add_subcommand("flops", "FLOPs cost model");
    std::uint32_t layers = 12, hidden = 768, heads = 12, ffn = 3072;
    std::uint64_t np = 10, lq = 16, lp = 150;
    bool sweep = false, detailed = false, as_json = false;
    fl->add_option("--layers", layers)->default_val(12);
    fl->add_flag("--sweep", sweep, "Every split of the model");
    fl->add_option("--split", split_text, "One split, e.g. 5-7");
    fl->add_flag("--detailed", detailed, "Absolute FLOPs for a workload");
    fl->add_option("--hidden", hidden)->default_val(768);
    fl->add_option("--heads", heads)->default_val(12);
    fl->add_option("--ffn", ffn)->default_val(3072);
    fl->add_option("--np", np, "Passages per question")->default_val(10);
    fl->add_option("--lq", lq, "Question length")->default_val(16);
    fl->add_option("--lp", lp, "Passage length")->default_val(150);
    fl->add_flag("--json", as_json);

    auto* be = app.add_subcommand("bench", "Wall-clock latency of the online path (random weights)");
    std::string scenario = "long";
    std::uint32_t repeats = 8, rate = 4;
    std::uint32_t b_layers = 12, b_hidden = 256, b_heads = 4, b_ffn = 1024;
    std::string b_split = "5-7";
    std::uint64_t seed = 0;
    be->add_option("--scenario", scenario, "long (64/448) or short (16/150)")->default_val("long");
    be->add_option("--repeats", repeats)->default_val(8);
    be->add_option("--layers", b_layers)->default_val(12);
    be->add_option("--hidden", b_hidden)->default_val(256);
    be->add_option("--heads", b_heads)->default_val(4);
    be->add_option("--ffn", b_ffn)->default_val(1024);
    be->add_option("--split", b_split, "x-y")->default_val("5-7");
    be->add_option("--compress-rate", rate, "Also time a d/rate bottleneck (0 = off)")->default_val(4);
    be->add_option("--seed", seed)->default_val(0);
    be->add_flag("--json", as_json);

    auto* rp = app.add_subcommand("repro", "Run the whole workflow end to end");
    rp->add_option("--config", config_path)->check(CLI::ExistingFile);
    rp->add_option("--out", out)->required();

    app.require_subcommand(0, 1);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    if (print_defaults) {
        std::cout << RunConfig::defaults().to_json().dump(2) << '\n';
        return kOk;
    }
    if (app.get_subcommands().empty()) {
        std::cerr << app.help();
        return kConfig;
    }

    if (gen->parsed()) {
        const RunConfig cfg = load_config(config_path);
        gen_data(cfg, out);
        write_resolved(out, cfg);
    } else if (tt->parsed()) {
        const RunConfig cfg = load_config(config_path);
        write_resolved(out, cfg);
        print_metrics("teacher", train_teacher_step(cfg, data_dir, out));
    } else if (dec->parsed()) {
        decouple_step(teacher, SplitSpec::parse(split_text), out);
    } else if (dis->parsed()) {
        const RunConfig cfg = load_config(config_path);
        write_resolved(out, cfg);
        print_metrics("student", distill_step(cfg, teacher, student, data_dir, out));
    } else if (comp->parsed()) {
        RunConfig cfg = load_config(config_path);
        if (dim_override) cfg.compression.dim = dim_override;
        cfg.compression.skip_phase1 |= skip1;
        cfg.compression.skip_phase2 |= skip2;
        write_resolved(out, cfg);
        print_metrics("compressed", compress_step(cfg, teacher, student, data_dir, out));
    } else if (idx->parsed()) {
        const auto s = index_step(model, passages, parse_dtype(dtype), out);
        std::cout << ordered_json{{"entries", s.entries},
                                  {"total_bytes", s.total_bytes},
                                  {"matrix_bytes", s.matrix_bytes},
                                  {"pooled_bytes", s.pooled_bytes},
                                  {"overhead_bytes", s.overhead_bytes}}
                         .dump()
                  << '\n';
    } else if (ask->parsed()) {
        const DecoupledModel m = load_decoupled(model);
        const CacheFile c = CacheFile::open(cache);
        const PassageStore store(read_passages(passages));
        const auto q = parse_question(question);
        AnswerOptions opts;
        opts.k = k;
        opts.max_answer_length = max_len;
        const auto answers = answer_question(m, c, store, q, opts);
        for (const auto& a : answers) std::cout << answer_line(q, a) << '\n';
    } else if (ev->parsed()) {
        print_metrics("eval", eval_step(model, data_dir, !on_train, cache, max_len));
    } else if (fl->parsed()) {
        if (sweep) {
            const auto rows = flops_sweep(layers);
            if (as_json) {
                ordered_json j = ordered_json::array();
                for (const auto& r : rows) {
                    j.push_back({{"split", r.split.to_string()}, {"raw", r.raw}, {"display", format_fraction(r.displayed)}});
                }
                std::cout << j.dump(2) << '\n';
            } else {
                std::cout << format_flops_table(rows);
            }
        } else {
            if (split_text.empty()) throw ConfigError("flops: pass --sweep or --split x-y");
            const SplitSpec s = SplitSpec::parse(split_text);
            if (detailed) {
                ModelConfig c;
                c.n_layers = layers;
                c.hidden = hidden;
                c.heads = heads;
                c.ffn = ffn;
                const auto r = flops_detailed(c, s, np, lq, lp);
                std::cout << (as_json ? flops_json(r).dump(2) + "\n" : format_flops_report(r));
            } else {
                const auto r = flops_split_fraction(s, layers);
                if (as_json) {
                    std::cout << ordered_json{{"split", s.to_string()}, {"raw", r.raw}, {"display", format_fraction(r.displayed)}}.dump() << '\n';
                } else {
                    std::printf("%s %s (raw %.4f)\n", s.to_string().c_str(), format_fraction(r.displayed).c_str(), r.raw);
                }
            }
        }
    } else if (be->parsed()) {
        const Scenario sc = parse_scenario(scenario);
        const auto lengths = scenario_lengths(sc);
        ModelConfig c;
        c.n_layers = b_layers;
        c.hidden = b_hidden;
        c.heads = b_heads;
        c.ffn = b_ffn;
        c.vocab = 1000;
        c.max_positions = static_cast<std::uint32_t>(lengths.question + lengths.passage + 3);
        c.dropout = c.attention_dropout = 0.0f;
        const SplitSpec s = SplitSpec::parse(b_split);
        s.validate(b_layers);
        const StandardModel standard = init_standard(c, seed);
        const DecoupledModel dec_model = split_model(standard, s);
        std::vector<BenchTarget> targets = {{"decoupled " + s.to_string(), &dec_model}};
        DecoupledModel compressed;
        if (rate > 0) {
            if (b_hidden % rate != 0) throw ConfigError("bench: hidden must be divisible by --compress-rate");
            compressed = attach_compression(dec_model, b_hidden / rate, seed);
            targets.push_back({"+ " + std::to_string(rate) + "x compress", &compressed});
        }
        const auto report = bench(standard, targets, sc, repeats, seed);
        std::cout << (as_json ? bench_json(report).dump(2) + "\n" : format_bench_table(report));
    } else if (rp->parsed()) {
        const RunConfig cfg = load_config(config_path);
        std::cout << repro(cfg, out).dump(2) << '\n';
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const dtr::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const dtr::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumeric;
    } catch (const dtr::NotFoundError& e) {
        std::cerr << "not found: " << e.what() << '\n';
        return kData;
    } catch (const dtr::Error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kOther;
    }
}
