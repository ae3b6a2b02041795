#include "dtr/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>

#include "json.hpp"

#include "dtr/errors.hpp"
#include "dtr/optim.hpp"

namespace dtr {

void DistillConfig::validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("distill: lambda must lie in [0, 1]");
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("distill: temperature must be > 0");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("distill: sigma must be >= 0");
}

bool DistillConfig::needs_teacher() const { return use_kl || use_mse_repr || use_mse_attn; }

std::uint64_t TrainConfig::total_steps(std::size_t examples) const {
    if (batch_size == 0) return 0;
    return static_cast<std::uint64_t>(epochs) * ((examples + batch_size - 1) / batch_size);
}

void TrainConfig::validate(std::size_t examples) const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be > 0");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
    if (!(clip_norm >= 0.0)) throw ConfigError("train: clip_norm must be >= 0");
    if (!(layer_decay > 0.0 && layer_decay <= 1.0)) throw ConfigError("train: layer_decay must lie in (0, 1]");
    if (examples == 0) throw DataError("train: training set is empty");
    const std::uint64_t total = total_steps(examples);
    if (warmup_steps > total) {
        throw ConfigError("train: warmup of " + std::to_string(warmup_steps) + " steps exceeds the " +
                          std::to_string(total) + " total steps");
    }
}

double LossBreakdown::combine(const LossBreakdown& p, const DistillConfig& cfg) {
    double total = (1.0 - cfg.lambda) * p.ce;
    if (cfg.use_kl) total += cfg.lambda * p.kl;
    if (cfg.use_mse_repr) total += cfg.sigma * p.mse_repr;
    if (cfg.use_mse_attn) total += cfg.sigma * p.mse_attn;
    return total;
}

namespace {

template <typename T>
Var<T> layer_mse(Graph<T>& g, std::span<const Var<T>> student, std::span<const Tensor<T>> teacher, bool all_layers,
                 std::size_t first_student, std::span<const std::uint8_t> mask, const char* what) {
    if (teacher.size() < student.size() || student.size() <= first_student) {
        throw ShapeError(std::string("kd_loss: cannot align ") + what + " of " + std::to_string(student.size()) +
                         " student and " + std::to_string(teacher.size()) + " teacher layers");
    }
    const std::size_t offset = teacher.size() - student.size();
    const std::size_t begin = all_layers ? first_student : student.size() - 1;
    std::optional<Var<T>> sum;
    for (std::size_t i = begin; i < student.size(); ++i) {
        Var<T> term = ops::mse(student[i], g.constant(teacher[i + offset]), mask);
        sum = sum ? ops::add(*sum, term) : term;
    }
    return *sum;
}

}  // namespace

template <typename T>
TracedLoss<T> kd_loss(Graph<T>& g, const TracedOutput<T>& student, const EncodeOutput<T>* teacher,
                      const SpanTargets& targets, const DistillConfig& cfg) {
    cfg.validate();
    if (cfg.needs_teacher()) {
        if (!teacher) throw ConfigError("kd_loss: enabled distillation terms need teacher outputs");
        if (teacher->start_logits.shape() != student.start_logits.shape()) {
            throw ShapeError("kd_loss: student logits " + shape_string(student.start_logits.shape()) +
                             " not aligned with teacher logits " + shape_string(teacher->start_logits.shape()));
        }
    }
    TracedLoss<T> out;
    Var<T> ce = span_ce_loss(student.start_logits, student.end_logits, targets.gold_start, targets.gold_end,
                             targets.mask);
    out.parts.ce = static_cast<double>(ce.value().item());
    Var<T> total = ops::scale(ce, static_cast<T>(1.0 - cfg.lambda));

    if (cfg.use_kl) {
        const T inv_t = static_cast<T>(1.0 / cfg.temperature);
        auto softened = [&](const Tensor<T>& logits) {
            Tensor<T> t = logits;
            for (auto& v : t.values()) v *= inv_t;
            return g.constant(std::move(t));
        };
        Var<T> ks = ops::kl_divergence(softened(teacher->start_logits), ops::scale(student.start_logits, inv_t),
                                       targets.mask);
        Var<T> ke = ops::kl_divergence(softened(teacher->end_logits), ops::scale(student.end_logits, inv_t),
                                       targets.mask);
        const T t2 = static_cast<T>(cfg.temperature * cfg.temperature);
        Var<T> kl = ops::scale(ops::add(ks, ke), t2 / T(2));
        out.parts.kl = static_cast<double>(kl.value().item());
        total = ops::add(total, ops::scale(kl, static_cast<T>(cfg.lambda)));
    }
    if (cfg.use_mse_repr) {
        Var<T> m = layer_mse<T>(g, student.hidden_states, teacher->hidden_states, cfg.mse_all_layers, 1,
                                targets.mask, "hidden states");
        out.parts.mse_repr = static_cast<double>(m.value().item());
        total = ops::add(total, ops::scale(m, static_cast<T>(cfg.sigma)));
    }
    if (cfg.use_mse_attn) {
        Var<T> m = layer_mse<T>(g, student.attention_outputs, teacher->attention_outputs, cfg.mse_all_layers, 0,
                                targets.mask, "attention outputs");
        out.parts.mse_attn = static_cast<double>(m.value().item());
        total = ops::add(total, ops::scale(m, static_cast<T>(cfg.sigma)));
    }
    out.total = total;
    out.parts.total = static_cast<double>(total.value().item());
    return out;
}

LossBreakdown kd_loss(const EncodeOutput<float>& student, const EncodeOutput<float>* teacher,
                      const SpanTargets& targets, const DistillConfig& cfg) {
    Graph<float> g(false);
    TracedOutput<float> traced;
    for (const auto& h : student.hidden_states) traced.hidden_states.push_back(g.constant(h));
    for (const auto& a : student.attention_outputs) traced.attention_outputs.push_back(g.constant(a));
    traced.start_logits = g.constant(student.start_logits);
    traced.end_logits = g.constant(student.end_logits);
    return kd_loss(g, traced, teacher, targets, cfg).parts;
}

ExampleBatch ExampleBatch::make(const Dataset& data, std::span<const std::size_t> indices) {
    ExampleBatch out;
    std::vector<std::vector<std::int32_t>> pairs, segments, questions, passages;
    for (std::size_t i : indices) {
        const QaExample& ex = data.examples().at(i);
        const Passage& p = data.passage(ex.passage_id);
        PairLayout layout = pair_layout(ex.question, p.tokens);
        out.passage_begin.push_back(layout.passage_begin);
        out.passage_end.push_back(layout.passage_end);
        out.gold_start.push_back(ex.gold_start);
        out.gold_end.push_back(ex.gold_end);
        pairs.push_back(std::move(layout.tokens));
        segments.push_back(std::move(layout.segments));
        questions.push_back(question_input(ex.question));
        passages.push_back(passage_input(p.tokens));
    }
    out.pairs = SequenceBatch::from_sequences(pairs, segments);
    out.questions = SequenceBatch::from_sequences(questions);
    out.passages = SequenceBatch::from_sequences(passages);
    return out;
}

template <typename T>
TracedOutput<T> trace_student(Graph<T>& g, const BasicStandardModel<T>& model, const ExampleBatch& batch,
                              const ForwardOptions& options) {
    return trace_standard(g, model, batch.pairs, options);
}

template <typename T>
TracedOutput<T> trace_student(Graph<T>& g, const BasicDecoupledModel<T>& model, const ExampleBatch& batch,
                              const ForwardOptions& options) {
    return trace_decoupled(g, model, batch.questions, batch.passages, options);
}

double span_exact_match(std::uint32_t ps, std::uint32_t pe, std::uint32_t gs, std::uint32_t ge) {
    return ps == gs && pe == ge ? 1.0 : 0.0;
}

double span_f1(std::uint32_t ps, std::uint32_t pe, std::uint32_t gs, std::uint32_t ge) {
    const bool pred_none = ps == 0 && pe == 0;
    const bool gold_none = gs == 0 && ge == 0;
    if (pred_none || gold_none) return pred_none && gold_none ? 1.0 : 0.0;
    const std::uint32_t lo = std::max(ps, gs), hi = std::min(pe, ge);
    if (lo > hi) return 0.0;
    const double overlap = hi - lo + 1;
    const double precision = overlap / (pe - ps + 1);
    const double recall = overlap / (ge - gs + 1);
    return 2.0 * precision * recall / (precision + recall);
}

namespace {
double round_tenth(double percent) { return std::round(percent * 10.0) / 10.0; }
}  // namespace

template <typename Model>
EvalMetrics evaluate(const Model& model, const Dataset& data, std::uint32_t batch_size,
                     std::uint32_t max_answer_length) {
    if (data.empty()) throw DataError("evaluate: dataset is empty");
    if (batch_size == 0) batch_size = 1;
    double em = 0.0, f1 = 0.0;
    std::vector<std::size_t> indices;
    for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
        indices.resize(std::min<std::size_t>(batch_size, data.size() - begin));
        std::iota(indices.begin(), indices.end(), begin);
        const ExampleBatch batch = ExampleBatch::make(data, indices);
        Graph<float> g(false);
        const TracedOutput<float> out = trace_student(g, model, batch, {});
        const Tensor<float>& s = out.start_logits.value();
        const Tensor<float>& e = out.end_logits.value();
        for (std::size_t b = 0; b < indices.size(); ++b) {
            const SpanAnswer a =
                predict_span(s.row(b), e.row(b), batch.passage_begin[b], batch.passage_end[b], max_answer_length);
            em += span_exact_match(a.start, a.end, batch.gold_start[b], batch.gold_end[b]);
            f1 += span_f1(a.start, a.end, batch.gold_start[b], batch.gold_end[b]);
        }
    }
    const double n = static_cast<double>(data.size());
    return {round_tenth(100.0 * em / n), round_tenth(100.0 * f1 / n), data.size()};
}

template <typename Model>
TrainResult train_student(Model& student, const StandardModel* teacher, const Dataset& train, const Dataset& eval,
                          const DistillConfig& distill, const TrainConfig& config, const ParameterFilter& trainable,
                          const TraceSink& sink) {
    distill.validate();
    config.validate(train.size());
    if (distill.needs_teacher() && !teacher) throw ConfigError("train: distillation terms need a teacher model");

    std::vector<Tensor<float>*> params;
    std::vector<double> multipliers;
    std::vector<Shape> shapes;
    const std::uint32_t top = student.config.n_layers;
    visit_parameters(student, [&](const std::string& name, Tensor<float>& t, std::uint32_t depth) {
        if (trainable && !trainable(name)) return;
        if (distill.freeze_global_embeddings && name.rfind("global.", 0) == 0) return;
        params.push_back(&t);
        multipliers.push_back(std::pow(config.layer_decay, static_cast<double>(top - std::min(depth, top))));
        shapes.push_back(t.shape());
    });
    AdamState state(AdamConfig{config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps}, shapes);
    std::vector<Tensor<float>> grads;
    std::vector<Tensor<float>*> grad_ptrs;
    grads.reserve(shapes.size());
    for (const auto& s : shapes) grads.emplace_back(s);
    for (auto& gtensor : grads) grad_ptrs.push_back(&gtensor);

    const std::uint64_t total_steps = config.total_steps(train.size());
    const CounterRng root(config.seed);
    const CounterRng shuffle_root = root.split("shuffle");
    const CounterRng dropout_root = root.split("dropout");
    std::vector<std::size_t> order(train.size());

    TrainResult result;
    std::uint64_t step = 0;
    for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        CounterRng shuffle = shuffle_root.split(epoch);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

        LossBreakdown sum;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t count = std::min<std::size_t>(config.batch_size, order.size() - begin);
            const ExampleBatch batch = ExampleBatch::make(train, std::span(order).subspan(begin, count));
            std::optional<EncodeOutput<float>> teacher_out;
            if (distill.needs_teacher()) teacher_out = encode(*teacher, batch.pairs);

            Graph<float> g(true);
            ForwardOptions options;
            options.mode = Mode::train;
            options.dropout_seed = dropout_root.split(step).key();
            const TracedOutput<float> traced = trace_student(g, student, batch, options);
            const SpanTargets targets{batch.gold_start, batch.gold_end, batch.pairs.mask};
            TracedLoss<float> loss = kd_loss(g, traced, teacher_out ? &*teacher_out : nullptr, targets, distill);
            if (!std::isfinite(loss.parts.total)) {
                throw NumericError("non-finite loss at batch " + std::to_string(batches) + " of epoch " +
                                   std::to_string(epoch + 1) + " (step " + std::to_string(step + 1) + ")");
            }
            g.backward(loss.total);
            for (std::size_t i = 0; i < params.size(); ++i) {
                if (const Tensor<float>* gp = g.grad_of(*params[i])) {
                    std::copy(gp->values().begin(), gp->values().end(), grads[i].values().begin());
                } else {
                    grads[i].fill(0.0f);
                }
            }
            const double lr = scheduled_lr(config.lr, step, config.warmup_steps, total_steps);
            adam_step(params, grad_ptrs, state, lr, multipliers, config.clip_norm);
            ++step;
            ++batches;
            sum.ce += loss.parts.ce;
            sum.kl += loss.parts.kl;
            sum.mse_repr += loss.parts.mse_repr;
            sum.mse_attn += loss.parts.mse_attn;
            sum.total += loss.parts.total;
        }
        TraceRecord record;
        record.step = step;
        record.epoch = epoch + 1;
        const double n = static_cast<double>(batches);
        record.loss = {sum.ce / n, sum.kl / n, sum.mse_repr / n, sum.mse_attn / n, sum.total / n};
        if (!eval.empty()) record.eval = evaluate(student, eval);
        if (sink) sink(record);
        result.trace.push_back(record);
    }
    result.steps = step;
    return result;
}

TrainResult train_teacher(StandardModel& model, const Dataset& train, const Dataset& eval, const TrainConfig& config,
                          const TraceSink& sink) {
    DistillConfig task_only;
    task_only.lambda = 0.0;
    task_only.sigma = 0.0;
    task_only.use_kl = task_only.use_mse_repr = task_only.use_mse_attn = false;
    return train_student(model, nullptr, train, eval, task_only, config, {}, sink);
}

TrainResult train_decoupled(const StandardModel& teacher, DecoupledModel& student, const Dataset& train,
                            const Dataset& eval, const DistillConfig& distill, const TrainConfig& config,
                            const TraceSink& sink) {
    if (teacher.config != student.config) throw ConfigError("train: student was not split from this teacher");
    return train_student(student, &teacher, train, eval, distill, config, {}, sink);
}

std::string trace_line(const TraceRecord& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["epoch"] = r.epoch;
    j["ce"] = r.loss.ce;
    j["kl"] = r.loss.kl;
    j["mse_repr"] = r.loss.mse_repr;
    j["mse_attn"] = r.loss.mse_attn;
    j["total"] = r.loss.total;
    j["em"] = r.eval.exact_match;
    j["f1"] = r.eval.f1;
    return j.dump();
}

void write_trace(const std::filesystem::path& path, std::span<const TraceRecord> trace) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& r : trace) out << trace_line(r) << '\n';
}

#define DTR_INSTANTIATE_KD(T)                                                                              \
    template TracedLoss<T> kd_loss(Graph<T>&, const TracedOutput<T>&, const EncodeOutput<T>*,              \
                                   const SpanTargets&, const DistillConfig&);                              \
    template TracedOutput<T> trace_student(Graph<T>&, const BasicStandardModel<T>&, const ExampleBatch&,   \
                                           const ForwardOptions&);                                         \
    template TracedOutput<T> trace_student(Graph<T>&, const BasicDecoupledModel<T>&, const ExampleBatch&,  \
                                           const ForwardOptions&);

DTR_INSTANTIATE_KD(float)
DTR_INSTANTIATE_KD(double)

template EvalMetrics evaluate(const StandardModel&, const Dataset&, std::uint32_t, std::uint32_t);
template EvalMetrics evaluate(const DecoupledModel&, const Dataset&, std::uint32_t, std::uint32_t);
template TrainResult train_student(StandardModel&, const StandardModel*, const Dataset&, const Dataset&,
                                   const DistillConfig&, const TrainConfig&, const ParameterFilter&, const TraceSink&);
template TrainResult train_student(DecoupledModel&, const StandardModel*, const Dataset&, const Dataset&,
                                   const DistillConfig&, const TrainConfig&, const ParameterFilter&, const TraceSink&);

}  // namespace dtr
