#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "run_config.hpp"

#include "dtr/checkpoint.hpp"
#include "dtr/pipeline.hpp"

namespace dtr::cli {

namespace fs = std::filesystem;

// Layout of a data directory written by gen-data.
struct DataFiles {
    fs::path train, eval, passages;
    static DataFiles in(const fs::path& dir);
};

// Progress lines go to stderr so stdout stays machine-readable.
TraceSink progress(const std::string& label);

nlohmann::ordered_json metrics_json(const EvalMetrics& m);

void gen_data(const RunConfig& cfg, const fs::path& out_dir);
Dataset load_data(const fs::path& data_dir, bool eval_split);

// Each step writes its artifacts and trace into out_dir and returns the
// eval metrics.
EvalMetrics train_teacher_step(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir);
void decouple_step(const fs::path& teacher, SplitSpec split, const fs::path& out);
EvalMetrics distill_step(const RunConfig& cfg, const fs::path& teacher, const fs::path& student,
                         const fs::path& data_dir, const fs::path& out_dir);
EvalMetrics compress_step(const RunConfig& cfg, const fs::path& teacher, const fs::path& student,
                          const fs::path& data_dir, const fs::path& out_dir);
CacheSummary index_step(const fs::path& model, const fs::path& passages, CacheDtype dtype, const fs::path& out);

// Standard or decoupled checkpoint; with a cache, spans come from it.
EvalMetrics eval_step(const fs::path& model, const fs::path& data_dir, bool eval_split, const fs::path& cache,
                      std::uint32_t max_answer_length);

std::vector<std::int32_t> parse_question(const std::string& text);

// gen-data -> train-teacher -> decouple -> distill -> [compress] -> index ->
// eval; writes metrics.json under out_dir.
nlohmann::ordered_json repro(const RunConfig& cfg, const fs::path& out_dir);

}  // namespace dtr::cli
