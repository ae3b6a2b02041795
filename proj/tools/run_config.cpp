#include "run_config.hpp"

#include <cstdio>
#include <cstdlib>
#include <set>

#include "dtr/checkpoint.hpp"
#include "dtr/errors.hpp"

namespace dtr::cli {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads optional keys of one JSON object and remembers which it consumed.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + " must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) throw ConfigError("");
            } else if constexpr (std::is_integral_v<T>) {
                if (!it->is_number_integer()) throw ConfigError("");
                if (it->is_number_integer() && !it->is_number_unsigned() && it->template get<long long>() < 0) {
                    throw ConfigError("");
                }
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!it->is_number()) throw ConfigError("");
            } else {
                if (!it->is_string()) throw ConfigError("");
            }
            out = it->template get<T>();
        } catch (const std::exception&) {
            throw ConfigError(where(key) + " has the wrong type (" + std::string(it->type_name()) + ")");
        }
    }

    Fields child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        static const json empty = json::object();
        return Fields(it == j_.end() ? empty : *it, path_.empty() ? key : path_ + "." + key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + where(it.key().c_str()) + "'");
        }
    }

private:
    std::string where(const char* key = nullptr) const {
        std::string p = path_;
        if (key) p = p.empty() ? key : p + "." + key;
        return p.empty() ? "config" : p;
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_train(Fields f, TrainConfig& t) {
    f.get("lr", t.lr);
    f.get("warmup_steps", t.warmup_steps);
    f.get("layer_decay", t.layer_decay);
    f.get("batch_size", t.batch_size);
    f.get("epochs", t.epochs);
    f.get("clip_norm", t.clip_norm);
    f.get("adam_eps", t.adam_eps);
    f.get("adam_beta1", t.adam_beta1);
    f.get("adam_beta2", t.adam_beta2);
    f.finish();
}

// Shortest decimal that reads back as the same float.
double float_value(float f) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", f);
    for (int digits = 1; digits <= 9; ++digits) {
        std::snprintf(buf, sizeof buf, "%.*g", digits, f);
        if (std::strtof(buf, nullptr) == f) break;
    }
    return std::strtod(buf, nullptr);
}

ordered_json train_json(const TrainConfig& t) {
    ordered_json j;
    j["lr"] = t.lr;
    j["warmup_steps"] = t.warmup_steps;
    j["layer_decay"] = t.layer_decay;
    j["batch_size"] = t.batch_size;
    j["epochs"] = t.epochs;
    j["clip_norm"] = t.clip_norm;
    j["adam_eps"] = t.adam_eps;
    j["adam_beta1"] = t.adam_beta1;
    j["adam_beta2"] = t.adam_beta2;
    return j;
}

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.task.spec.vocab_size = 20;
    c.task.spec.min_passage_len = 8;
    c.task.spec.max_passage_len = 16;
    c.model.n_layers = 4;
    c.model.hidden = 64;
    c.model.heads = 4;
    c.model.ffn = 128;
    c.model.max_positions = 64;
    c.compression.phase1.batch_size = 16;
    return c;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c = defaults();
    Fields root(j, "");
    root.get("seed", c.seed);
    {
        Fields t = root.child("task");
        auto& s = c.task.spec;
        t.get("vocab_size", s.vocab_size);
        t.get("min_passage_len", s.min_passage_len);
        t.get("max_passage_len", s.max_passage_len);
        t.get("key_present_prob", s.key_present_prob);
        t.get("min_answer_len", s.min_answer_len);
        t.get("max_answer_len", s.max_answer_len);
        t.get("train_examples", c.task.train_examples);
        t.get("eval_examples", c.task.eval_examples);
        t.finish();
    }
    {
        Fields m = root.child("model");
        m.get("n_layers", c.model.n_layers);
        m.get("hidden", c.model.hidden);
        m.get("heads", c.model.heads);
        m.get("ffn", c.model.ffn);
        m.get("max_positions", c.model.max_positions);
        m.get("dropout", c.model.dropout);
        m.get("attention_dropout", c.model.attention_dropout);
        m.finish();
    }
    std::string split = c.split.to_string();
    root.get("split", split);
    c.split = SplitSpec::parse(split);
    read_train(root.child("teacher_train"), c.teacher_train);
    {
        Fields d = root.child("distill");
        d.get("lambda", c.distill.lambda);
        d.get("temperature", c.distill.temperature);
        d.get("sigma", c.distill.sigma);
        d.get("use_kl", c.distill.use_kl);
        d.get("use_mse_repr", c.distill.use_mse_repr);
        d.get("use_mse_attn", c.distill.use_mse_attn);
        d.get("mse_all_layers", c.distill.mse_all_layers);
        d.get("freeze_global_embeddings", c.distill.freeze_global_embeddings);
        d.finish();
    }
    read_train(root.child("train"), c.train);
    {
        Fields k = root.child("compression");
        k.get("dim", c.compression.dim);
        k.get("skip_phase1", c.compression.skip_phase1);
        k.get("skip_phase2", c.compression.skip_phase2);
        read_train(k.child("phase1"), c.compression.phase1);
        read_train(k.child("phase2"), c.compression.phase2);
        k.finish();
    }
    {
        Fields k = root.child("cache");
        std::string dtype = dtype_name(c.cache_dtype);
        k.get("dtype", dtype);
        c.cache_dtype = parse_dtype(dtype);
        k.finish();
    }
    {
        Fields e = root.child("eval");
        e.get("max_answer_length", c.eval.max_answer_length);
        e.get("k", c.eval.k);
        e.finish();
    }
    root.finish();
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return from_json(j);
}

ordered_json RunConfig::to_json() const {
    ordered_json j;
    j["seed"] = seed;
    const auto& s = task.spec;
    j["task"] = {{"vocab_size", s.vocab_size},
                 {"min_passage_len", s.min_passage_len},
                 {"max_passage_len", s.max_passage_len},
                 {"key_present_prob", s.key_present_prob},
                 {"min_answer_len", s.min_answer_len},
                 {"max_answer_len", s.max_answer_len},
                 {"train_examples", task.train_examples},
                 {"eval_examples", task.eval_examples}};
    j["model"] = {{"n_layers", model.n_layers},
                  {"hidden", model.hidden},
                  {"heads", model.heads},
                  {"ffn", model.ffn},
                  {"max_positions", model.max_positions},
                  {"dropout", float_value(model.dropout)},
                  {"attention_dropout", float_value(model.attention_dropout)}};
    j["split"] = split.to_string();
    j["teacher_train"] = train_json(teacher_train);
    j["distill"] = {{"lambda", distill.lambda},
                    {"temperature", distill.temperature},
                    {"sigma", distill.sigma},
                    {"use_kl", distill.use_kl},
                    {"use_mse_repr", distill.use_mse_repr},
                    {"use_mse_attn", distill.use_mse_attn},
                    {"mse_all_layers", distill.mse_all_layers},
                    {"freeze_global_embeddings", distill.freeze_global_embeddings}};
    j["train"] = train_json(train);
    ordered_json comp;
    comp["dim"] = compression.dim;
    comp["skip_phase1"] = compression.skip_phase1;
    comp["skip_phase2"] = compression.skip_phase2;
    comp["phase1"] = train_json(compression.phase1);
    comp["phase2"] = train_json(compression.phase2);
    j["compression"] = comp;
    j["cache"] = {{"dtype", dtype_name(cache_dtype)}};
    j["eval"] = {{"max_answer_length", eval.max_answer_length}, {"k", eval.k}};
    return j;
}

RunConfig RunConfig::resolved() const {
    RunConfig c = *this;
    c.task.spec.seed = seed;
    c.model.vocab = task.spec.vocab_size;
    c.teacher_train.seed = c.train.seed = c.compression.phase1.seed = c.compression.phase2.seed = seed;
    c.validate();
    return c;
}

void RunConfig::validate() const {
    task.spec.validate();
    if (task.train_examples == 0 || task.eval_examples == 0) throw ConfigError("task: example counts must be positive");
    ModelConfig m = model;
    m.vocab = task.spec.vocab_size;
    m.validate();
    if (task.spec.max_passage_len + 4 > m.max_positions) {
        throw ConfigError("model.max_positions " + std::to_string(m.max_positions) + " cannot hold passages of " +
                          std::to_string(task.spec.max_passage_len) + " tokens plus the question");
    }
    split.validate(m.n_layers);
    distill.validate();
    teacher_train.validate(task.train_examples);
    train.validate(task.train_examples);
    if (compression.dim > m.hidden) {
        throw ConfigError("compression.dim " + std::to_string(compression.dim) + " exceeds hidden " +
                          std::to_string(m.hidden));
    }
    if (compression.dim > 0) {
        if (!compression.skip_phase1) compression.phase1.validate(task.train_examples + task.eval_examples);
        if (!compression.skip_phase2) compression.phase2.validate(task.train_examples);
    }
    if (eval.k == 0) throw ConfigError("eval.k must be positive");
}

void write_json(const std::filesystem::path& path, const ordered_json& j) {
    const std::string text = j.dump(2) + "\n";
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_resolved(const std::filesystem::path& dir, const RunConfig& config) {
    std::filesystem::create_directories(dir);
    write_json(dir / "config.json", config.to_json());
}

}  // namespace dtr::cli
