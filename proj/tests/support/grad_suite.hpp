#pragma once

#include <string>
#include <vector>

#include "dtr/transformer.hpp"
#include "gradcheck.hpp"
#include "tiny.hpp"

namespace dtr::testing {

inline Var<double> against_target(Var<double> out, std::uint64_t seed) {
    // mse against a fixed random target turns any tensor into a scalar
    // with a non-trivial gradient.
    Graph<double>& g = *out.graph;
    return ops::mse(out, g.constant(random_tensor(out.shape(), seed)));
}

struct NamedCheck {
    std::string name;
    double worst = 0.0;
};

// One finite-difference check per differentiable op.
inline std::vector<NamedCheck> op_grad_suite() {
    std::vector<NamedCheck> out;
    auto add = [&](std::string name, GradCheckResult r) { out.push_back({std::move(name), r.worst_relative_error}); };

    add("matmul", grad_check({random_tensor({3, 4}, 1), random_tensor({4, 2}, 2)},
                             [](auto&, const auto& v) { return against_target(ops::matmul(v[0], v[1]), 9); }));
    add("linear/add_row", grad_check({random_tensor({3, 4}, 1), random_tensor({4, 5}, 2), random_tensor({5}, 3)},
                                     [](auto&, const auto& v) {
                                         return against_target(ops::add_row(ops::linear(v[0], v[1], v[2]), v[2]), 9);
                                     }));
    add("matvec/reshape/scale/add",
        grad_check({random_tensor({6, 4}, 1), random_tensor({4}, 2), random_tensor({2, 3}, 3)}, [](auto&, const auto& v) {
            auto y = ops::reshape(ops::matvec(v[0], v[1]), Shape{2, 3});
            return against_target(ops::add(ops::scale(y, 1.5), v[2]), 9);
        }));
    const std::vector<std::uint32_t> rows = {4, 0, 0, 2};
    add("concat/slice/gather", grad_check({random_tensor({2, 3}, 1), random_tensor({3, 3}, 2)}, [&](auto&, const auto& v) {
            auto c = ops::concat_rows(v[0], v[1]);
            return ops::add(against_target(ops::slice_rows(c, 1, 3), 9),
                            against_target(ops::gather_rows(c, std::span<const std::uint32_t>(rows)), 10));
        }));
    const std::vector<std::int32_t> ids = {3, 1, 3, 0};
    add("embedding", grad_check({random_tensor({5, 4}, 1)}, [&](auto&, const auto& v) {
            return against_target(ops::embedding(v[0], std::span<const std::int32_t>(ids)), 9);
        }));
    add("layernorm", grad_check({random_tensor({3, 6}, 1, 2.0), random_tensor({6}, 2), random_tensor({6}, 3)},
                                [](auto&, const auto& v) { return against_target(ops::layernorm(v[0], v[1], v[2]), 9); }));
    add("gelu", grad_check({random_tensor({3, 5}, 1, 2.0)},
                           [](auto&, const auto& v) { return against_target(ops::gelu(v[0]), 9); }));
    const std::vector<std::uint8_t> smask = {1, 1, 0, 1, 0, 1, 1, 1};
    add("softmax", grad_check({random_tensor({2, 4}, 1)},
                              [&](auto&, const auto& v) { return against_target(ops::softmax(v[0], smask), 9); }));
    add("dropout", grad_check({random_tensor({4, 4}, 1)}, [](auto&, const auto& v) {
            CounterRng rng(77);
            return against_target(ops::dropout(v[0], 0.3, true, rng), 9);
        }));
    const std::vector<std::uint8_t> mrows = {1, 0, 1};
    add("mse", grad_check({random_tensor({3, 4}, 1), random_tensor({3, 4}, 2)},
                          [&](auto&, const auto& v) { return ops::mse(v[0], v[1], mrows); }));
    const std::vector<std::uint8_t> cmask = {1, 1, 1, 0, 0, 1, 1, 1};
    const std::vector<std::uint32_t> targets = {2, 1};
    add("cross_entropy", grad_check({random_tensor({2, 4}, 1, 2.0)}, [&](auto&, const auto& v) {
            return ops::cross_entropy(v[0], std::span<const std::uint32_t>(targets), cmask);
        }));
    const std::vector<std::uint8_t> kmask = {1, 1, 0, 1, 1, 1, 1, 0};
    add("kl_divergence", grad_check({random_tensor({2, 4}, 1, 2.0), random_tensor({2, 4}, 2, 2.0)},
                                    [&](auto&, const auto& v) { return ops::kl_divergence(v[0], v[1], kmask); }));
    const std::vector<std::uint8_t> keys = {1, 1, 1, 1, 1, 0};
    for (bool train : {false, true}) {
        add(train ? "attention (dropout)" : "attention",
            grad_check({random_tensor({6, 4}, 1), random_tensor({6, 4}, 2), random_tensor({6, 4}, 3)},
                       [&](auto&, const auto& v) {
                           CounterRng rng(5);
                           return against_target(
                               ops::attention(v[0], v[1], v[2], keys, ops::AttentionShape{2, 2}, 0.2, train, rng), 9);
                       }));
    }
    return out;
}

/// Central differences over every parameter of a tiny standard model
/// (2 layers, d=8, 2 heads) under the span loss. Parameters get noise so
/// layernorm and bias gradients are exercised.
inline NamedCheck model_grad_check() {
    const ModelConfig c = tiny_config(2, 8, 2);
    BasicStandardModel<double> m = init_standard(c, 11).cast<double>();
    std::vector<std::string> names;
    {
        std::size_t i = 0;
        visit_parameters(m, [&](const std::string& n, Tensor<double>& t, std::uint32_t) {
            names.push_back(n);
            const auto noise = random_tensor(t.shape(), 100 + i++, 0.3);
            for (std::size_t j = 0; j < t.size(); ++j) t[j] += noise[j];
        });
    }
    const std::vector<std::vector<std::int32_t>> seqs = {{1, 5, 2, 7, 9, 2}, {1, 4, 2, 8, 2}};
    const std::vector<std::vector<std::int32_t>> segs = {{0, 0, 0, 1, 1, 1}, {0, 0, 0, 1, 1}};
    const auto batch = SequenceBatch::from_sequences(seqs, segs);
    const std::vector<std::uint32_t> gs = {3, 0}, ge = {4, 0};
    auto loss_of = [&](Graph<double>& graph, const BasicStandardModel<double>& mm) {
        auto out = trace_standard(graph, mm, batch, {});
        return span_ce_loss(out.start_logits, out.end_logits, std::span<const std::uint32_t>(gs),
                            std::span<const std::uint32_t>(ge), std::span<const std::uint8_t>(batch.mask));
    };
    Graph<double> g;
    g.backward(loss_of(g, m));

    const double step = 1e-4;
    NamedCheck worst;
    std::vector<Tensor<double>*> ptrs;
    visit_parameters(m, [&](const std::string&, Tensor<double>& t, std::uint32_t) { ptrs.push_back(&t); });
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
        const Tensor<double>* analytic = g.grad_of(*ptrs[i]);
        double max_diff = 0.0, scale = 0.0;
        for (std::size_t j = 0; j < ptrs[i]->size(); ++j) {
            const double saved = (*ptrs[i])[j];
            (*ptrs[i])[j] = saved + step;
            Graph<double> up(false);
            const double lu = loss_of(up, m).value().item();
            (*ptrs[i])[j] = saved - step;
            Graph<double> down(false);
            const double ld = loss_of(down, m).value().item();
            (*ptrs[i])[j] = saved;
            const double numeric = (lu - ld) / (2 * step);
            const double a = analytic ? (*analytic)[j] : 0.0;
            max_diff = std::max(max_diff, std::abs(a - numeric));
            scale = std::max({scale, std::abs(a), std::abs(numeric)});
        }
        // Softmax is shift-invariant, so some gradients are pure roundoff.
        const double rel = max_diff / std::max(scale, 1e-7);
        if (rel > worst.worst) worst = {names[i], rel};
    }
    return worst;
}

}  // namespace dtr::testing
