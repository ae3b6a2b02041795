#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "dtr/cache.hpp"
#include "dtr/config.hpp"
#include "dtr/dataset.hpp"
#include "dtr/distill.hpp"

namespace dtr::cli {

struct TaskSection {
    SyntheticTaskSpec spec;
    std::uint32_t train_examples = 8000;
    std::uint32_t eval_examples = 2000;
};

struct CompressionSection {
    std::uint32_t dim = 0;  // 0 = no bottleneck
    bool skip_phase1 = false;
    bool skip_phase2 = false;
    TrainConfig phase1;
    TrainConfig phase2;
};

struct EvalSection {
    std::uint32_t max_answer_length = kDefaultMaxAnswerLength;
    std::uint32_t k = 5;
};

/// Everything a run needs. One seed feeds every random stream; the
/// resolved config is written next to each run's outputs.
struct RunConfig {
    std::uint64_t seed = 0;
    TaskSection task;
    ModelConfig model;  // vocab comes from task.spec.vocab_size
    SplitSpec split{2, 2};
    TrainConfig teacher_train;
    DistillConfig distill;
    TrainConfig train;
    CompressionSection compression;
    CacheDtype cache_dtype = CacheDtype::f16;
    EvalSection eval;

    static RunConfig defaults();
    // Unknown keys and wrong types raise ConfigError naming the key.
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::filesystem::path& path);

    nlohmann::ordered_json to_json() const;
    // Applies the seed to every section and checks cross-field constraints.
    RunConfig resolved() const;
    void validate() const;
};

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j);
void write_resolved(const std::filesystem::path& dir, const RunConfig& config);

}  // namespace dtr::cli
