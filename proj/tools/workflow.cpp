#include "workflow.hpp"

#include <cctype>
#include <cstdio>

#include "dtr/compression.hpp"
#include "dtr/errors.hpp"

namespace dtr::cli {

using nlohmann::ordered_json;

DataFiles DataFiles::in(const fs::path& dir) {
    return {dir / "train.jsonl", dir / "eval.jsonl", dir / "passages.jsonl"};
}

TraceSink progress(const std::string& label) {
    return [label](const TraceRecord& r) { std::fprintf(stderr, "[%s] %s\n", label.c_str(), trace_line(r).c_str()); };
}

ordered_json metrics_json(const EvalMetrics& m) { return {{"em", m.exact_match}, {"f1", m.f1}, {"count", m.count}}; }

void gen_data(const RunConfig& cfg, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    const Dataset all = generate_synthetic(cfg.task.spec, cfg.task.train_examples + cfg.task.eval_examples);
    const DataFiles f = DataFiles::in(out_dir);
    write_examples(f.train, all.head(cfg.task.train_examples));
    write_examples(f.eval, all.tail(cfg.task.train_examples));
    write_passages(f.passages, all.passages());
}

Dataset load_data(const fs::path& data_dir, bool eval_split) {
    const DataFiles f = DataFiles::in(data_dir);
    return read_dataset(eval_split ? f.eval : f.train, f.passages);
}

EvalMetrics train_teacher_step(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    const Dataset train = load_data(data_dir, false), eval = load_data(data_dir, true);
    StandardModel teacher = init_standard(cfg.model, cfg.seed);
    const auto r = train_teacher(teacher, train, eval, cfg.teacher_train, progress("teacher"));
    save_checkpoint(out_dir / "teacher.dtmw", teacher);
    write_trace(out_dir / "teacher_trace.jsonl", r.trace);
    return r.trace.back().eval;
}

void decouple_step(const fs::path& teacher, SplitSpec split, const fs::path& out) {
    const StandardModel t = load_standard(teacher);
    if (split.total() != t.config.n_layers) {
        throw ConfigError("split " + split.to_string() + " needs a " + std::to_string(split.total()) +
                          "-layer teacher, got " + std::to_string(t.config.n_layers) + " layers");
    }
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_checkpoint(out, split_model(t, split));
}

EvalMetrics distill_step(const RunConfig& cfg, const fs::path& teacher, const fs::path& student,
                         const fs::path& data_dir, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    const StandardModel t = load_standard(teacher);
    DecoupledModel s = load_decoupled(student);
    const Dataset train = load_data(data_dir, false), eval = load_data(data_dir, true);
    const auto r = train_decoupled(t, s, train, eval, cfg.distill, cfg.train, progress("distill"));
    save_checkpoint(out_dir / "student.dtmw", s);
    write_trace(out_dir / "student_trace.jsonl", r.trace);
    return r.trace.back().eval;
}

EvalMetrics compress_step(const RunConfig& cfg, const fs::path& teacher, const fs::path& student,
                          const fs::path& data_dir, const fs::path& out_dir) {
    if (cfg.compression.dim == 0) throw ConfigError("compression.dim must be set (1..hidden) to compress");
    fs::create_directories(out_dir);
    const StandardModel t = load_standard(teacher);
    DecoupledModel s = attach_compression(load_decoupled(student), cfg.compression.dim, cfg.seed);
    const Dataset train = load_data(data_dir, false), eval = load_data(data_dir, true);
    CompressionSchedule schedule;
    schedule.skip_phase1 = cfg.compression.skip_phase1;
    schedule.skip_phase2 = cfg.compression.skip_phase2;
    schedule.phase1 = cfg.compression.phase1;
    schedule.phase2 = cfg.compression.phase2;
    const auto r = train_compression(s, t, train, eval, cfg.distill, schedule, progress("compress"));
    save_checkpoint(out_dir / "compressed.dtmw", s);
    write_trace(out_dir / "compress_trace.jsonl", r.phase2.trace);
    ordered_json p1;
    p1["initial_mse"] = r.phase1.initial_mse;
    p1["final_mse"] = r.phase1.final_mse;
    p1["epoch_mse"] = r.phase1.epoch_mse;
    write_json(out_dir / "phase1.json", p1);
    return r.phase2.trace.empty() ? evaluate(s, eval) : r.phase2.trace.back().eval;
}

CacheSummary index_step(const fs::path& model, const fs::path& passages, CacheDtype dtype, const fs::path& out) {
    const DecoupledModel m = load_decoupled(model);
    const auto p = read_passages(passages);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    return build_index(m, p, dtype, out);
}

EvalMetrics eval_step(const fs::path& model, const fs::path& data_dir, bool eval_split, const fs::path& cache,
                      std::uint32_t max_answer_length) {
    const Dataset data = load_data(data_dir, eval_split);
    if (checkpoint_kind(model) == CheckpointKind::standard) {
        if (!cache.empty()) throw ConfigError("--cache needs a decoupled model");
        return evaluate(load_standard(model), data, 64, max_answer_length);
    }
    const DecoupledModel m = load_decoupled(model);
    if (cache.empty()) return evaluate(m, data, 64, max_answer_length);
    const CacheFile c = CacheFile::open(cache);
    const PassageStore store(data.passages());
    const Reader reader(m, c, store);
    return evaluate_cached(reader, m, data, max_answer_length);
}

std::vector<std::int32_t> parse_question(const std::string& text) {
    std::vector<std::int32_t> ids;
    std::size_t i = 0;
    while (i < text.size()) {
        if (std::isspace(static_cast<unsigned char>(text[i])) || text[i] == ',') {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j])) && text[j] != ',') ++j;
        std::string tok = text.substr(i, j - i);
        if (!tok.empty() && tok[0] == 'w') tok.erase(0, 1);
        if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos || tok.size() > 9) {
            throw DataError("question token '" + text.substr(i, j - i) + "' is not a token id (use 7 or w7)");
        }
        const int id = std::stoi(tok);
        if (id < kFirstContentToken) throw DataError("question token " + tok + " is a reserved id");
        ids.push_back(id);
        i = j;
    }
    if (ids.empty()) throw DataError("empty question");
    return ids;
}

ordered_json repro(const RunConfig& cfg, const fs::path& out) {
    write_resolved(out, cfg);
    const fs::path data = out / "data";
    gen_data(cfg, data);
    ordered_json m;
    m["seed"] = cfg.seed;
    m["teacher"] = metrics_json(train_teacher_step(cfg, data, out));
    decouple_step(out / "teacher.dtmw", cfg.split, out / "split.dtmw");
    m["split_init"] = metrics_json(evaluate(load_decoupled(out / "split.dtmw"), load_data(data, true)));
    m["student"] = metrics_json(distill_step(cfg, out / "teacher.dtmw", out / "split.dtmw", data, out));
    fs::path reader_model = out / "student.dtmw";
    if (cfg.compression.dim > 0) {
        m["compressed"] = metrics_json(compress_step(cfg, out / "teacher.dtmw", reader_model, data, out));
        reader_model = out / "compressed.dtmw";
    }
    const CacheSummary s = index_step(reader_model, DataFiles::in(data).passages, cfg.cache_dtype, out / "index.dtc");
    m["cache"] = {{"dtype", dtype_name(cfg.cache_dtype)}, {"entries", s.entries}, {"bytes", s.total_bytes}};
    m["cached_eval"] =
        metrics_json(eval_step(reader_model, data, true, out / "index.dtc", cfg.eval.max_answer_length));
    m["model_hash"] = model_hash(load_decoupled(reader_model));
    write_json(out / "metrics.json", m);
    return m;
}

}  // namespace dtr::cli
