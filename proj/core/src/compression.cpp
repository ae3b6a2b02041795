#include "dtr/compression.hpp"

#include <cmath>
#include <numeric>

#include "dtr/errors.hpp"
#include "dtr/optim.hpp"

namespace dtr {

DecoupledModel attach_compression(DecoupledModel model, std::size_t c, std::uint64_t seed) {
    const std::size_t d = model.config.hidden;
    if (c < 1 || c > d) {
        throw ConfigError("compression width " + std::to_string(c) + " must lie in [1, " + std::to_string(d) + "]");
    }
    if (model.compression) throw ConfigError("model already has a compression pair");
    const CounterRng rng = CounterRng(seed).split("compression");
    model.compression = CompressionWeights<float>{
        truncated_normal_tensor<float>({d, c}, 0.02, rng, "compress.weight"), Tensor<float>({c}),
        truncated_normal_tensor<float>({c, d}, 0.02, rng, "decompress.weight"), Tensor<float>({d})};
    return model;
}

void set_identity_compression(DecoupledModel& model) {
    const std::size_t d = model.config.hidden;
    if (!model.compression || model.compression->dim() != d) {
        throw ConfigError("identity compression needs a pair with c equal to the hidden size");
    }
    auto& p = *model.compression;
    p.compress_w.fill(0.0f);
    p.decompress_w.fill(0.0f);
    for (std::size_t i = 0; i < d; ++i) p.compress_w(i, i) = p.decompress_w(i, i) = 1.0f;
    p.compress_b.fill(0.0f);
    p.decompress_b.fill(0.0f);
}

std::vector<Tensor<float>> passage_representations(const DecoupledModel& model, std::span<const Passage> passages) {
    std::vector<Tensor<float>> reps;
    reps.reserve(passages.size());
    for (const auto& p : passages) reps.push_back(encode_input(model, passage_input(p.tokens)).matrix);
    return reps;
}

namespace {

Tensor<float> stack_rows(std::span<const Tensor<float>> reps, std::span<const std::size_t> which, std::size_t d) {
    std::size_t rows = 0;
    for (std::size_t i : which) rows += reps[i].extent(0);
    Tensor<float> out({rows, d});
    float* dst = out.data();
    for (std::size_t i : which) dst = std::copy(reps[i].values().begin(), reps[i].values().end(), dst);
    return out;
}

Var<float> reconstruct_loss(Graph<float>& g, const DecoupledModel& model, const Tensor<float>& rows) {
    Var<float> x = g.constant(rows);
    return ops::mse(trace_decompress(g, model, trace_compress(g, model, x)), x);
}

}  // namespace

double reconstruction_mse(const DecoupledModel& model, std::span<const Tensor<float>> reps) {
    if (!model.compression) return 0.0;
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& r : reps) {
        Graph<float> g(false);
        sum += static_cast<double>(reconstruct_loss(g, model, r).value().item()) * static_cast<double>(r.size());
        count += r.size();
    }
    return count ? sum / static_cast<double>(count) : 0.0;
}

Phase1Result phase1_train(DecoupledModel& model, std::span<const Passage> passages, const TrainConfig& config) {
    if (!model.compression) throw ConfigError("phase 1 needs a compression pair");
    config.validate(passages.size());
    const std::vector<Tensor<float>> reps = passage_representations(model, passages);
    auto& pair = *model.compression;
    std::vector<Tensor<float>*> params = {&pair.compress_w, &pair.compress_b, &pair.decompress_w, &pair.decompress_b};
    std::vector<Shape> shapes;
    for (auto* p : params) shapes.push_back(p->shape());
    AdamState state(AdamConfig{config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps}, shapes);
    std::vector<Tensor<float>> grads;
    for (const auto& s : shapes) grads.emplace_back(s);
    std::vector<Tensor<float>*> grad_ptrs;
    for (auto& gt : grads) grad_ptrs.push_back(&gt);

    Phase1Result result;
    result.initial_mse = reconstruction_mse(model, reps);
    const std::uint64_t total = config.total_steps(passages.size());
    const CounterRng shuffle_root = CounterRng(config.seed).split("phase1");
    std::vector<std::size_t> order(reps.size());
    std::uint64_t step = 0;
    for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        CounterRng shuffle = shuffle_root.split(epoch);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
        double sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
            const std::size_t count = std::min<std::size_t>(config.batch_size, order.size() - begin);
            const Tensor<float> rows = stack_rows(reps, std::span(order).subspan(begin, count), model.config.hidden);
            Graph<float> g(true);
            Var<float> loss = reconstruct_loss(g, model, rows);
            const double value = loss.value().item();
            if (!std::isfinite(value)) {
                throw NumericError("non-finite reconstruction loss at batch " + std::to_string(batches) +
                                   " (step " + std::to_string(step + 1) + ")");
            }
            g.backward(loss);
            for (std::size_t i = 0; i < params.size(); ++i) grads[i] = *g.grad_of(*params[i]);
            adam_step(params, grad_ptrs, state, scheduled_lr(config.lr, step, config.warmup_steps, total), {},
                      config.clip_norm);
            sum += value;
            ++batches;
            ++step;
        }
        result.epoch_mse.push_back(sum / static_cast<double>(batches));
    }
    result.final_mse = reconstruction_mse(model, reps);
    return result;
}

TrainResult phase2_train(DecoupledModel& model, const StandardModel& teacher, const Dataset& train,
                         const Dataset& eval, const DistillConfig& distill, const TrainConfig& config,
                         const TraceSink& sink) {
    if (!model.compression) throw ConfigError("phase 2 needs a compression pair");
    return train_decoupled(teacher, model, train, eval, distill, config, sink);
}

CompressionResult train_compression(DecoupledModel& model, const StandardModel& teacher, const Dataset& train,
                                    const Dataset& eval, const DistillConfig& distill,
                                    const CompressionSchedule& schedule, const TraceSink& sink) {
    CompressionResult result;
    if (!schedule.skip_phase1) result.phase1 = phase1_train(model, train.passages(), schedule.phase1);
    if (!schedule.skip_phase2) {
        result.phase2 = phase2_train(model, teacher, train, eval, distill, schedule.phase2, sink);
    }
    return result;
}

}  // namespace dtr
