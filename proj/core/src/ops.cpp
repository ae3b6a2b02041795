#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "dtr/graph.hpp"
#include "gemm.hpp"

namespace dtr::ops {
namespace {

using detail::cmat;
using detail::mat;

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 operand, got " + shape_string(t.shape()));
}

void require_mask(Mask mask, std::size_t expected, const char* op) {
    if (!mask.empty() && mask.size() != expected) {
        throw ShapeError(std::string(op) + ": mask has " + std::to_string(mask.size()) + " entries, expected " +
                         std::to_string(expected));
    }
}

inline bool on(Mask mask, std::size_t i) { return mask.empty() || mask[i] != 0; }

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
    T* d = dst.data();
    const T* s = src.data();
    for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

// Row-wise masked log-softmax. Rows with no unmasked entry are all -inf.
template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x, Mask mask) {
    Tensor<T> out(x.shape());
    const std::size_t rows = x.rows(), cols = x.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < cols; ++c) {
            if (on(mask, r * cols + c)) mx = std::max(mx, x(r, c));
        }
        T sum{0};
        for (std::size_t c = 0; c < cols; ++c) {
            if (on(mask, r * cols + c)) sum += std::exp(x(r, c) - mx);
        }
        const T lse = mx + std::log(sum);
        for (std::size_t c = 0; c < cols; ++c) {
            out(r, c) = on(mask, r * cols + c) ? x(r, c) - lse : -std::numeric_limits<T>::infinity();
        }
    }
    return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, Mask mask) {
    Tensor<T> out(x.shape());
    const std::size_t rows = x.rows(), cols = x.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < cols; ++c) {
            if (on(mask, r * cols + c)) mx = std::max(mx, x(r, c));
        }
        if (mx == -std::numeric_limits<T>::infinity()) continue;  // fully masked row stays 0
        T sum{0};
        for (std::size_t c = 0; c < cols; ++c) {
            if (on(mask, r * cols + c)) {
                const T e = std::exp(x(r, c) - mx);
                out(r, c) = e;
                sum += e;
            }
        }
        const T inv = T{1} / sum;
        for (std::size_t c = 0; c < cols; ++c) out(r, c) *= inv;
    }
    return out;
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    require_rank2(A, "matmul");
    require_rank2(B, "matmul");
    if (A.extent(1) != B.extent(0)) {
        throw ShapeError("matmul: shape mismatch " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
    }
    const std::size_t m = A.extent(0), k = A.extent(1), n = B.extent(1);
    Tensor<T> out({m, n});
    if (m && n && k) detail::gemm_nn(A.data(), B.data(), out.data(), m, k, n, false);
    return a.graph->emit(std::move(out), {a, b}, [a, b, m, k, n](Graph<T>& g, const Tensor<T>& dy) {
        if (g.requires_grad(a)) detail::gemm_nt_acc(dy.data(), b.value().data(), g.grad_buffer(a).data(), m, n, k);
        if (g.requires_grad(b)) detail::gemm_tn_acc(a.value().data(), dy.data(), g.grad_buffer(b).data(), m, k, n);
    });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    const Tensor<T>& X = x.value();
    const Tensor<T>& W = w.value();
    const Tensor<T>& B = b.value();
    require_rank2(X, "linear");
    require_rank2(W, "linear");
    if (X.extent(1) != W.extent(0)) {
        throw ShapeError("linear: shape mismatch " + shape_string(X.shape()) + " vs " + shape_string(W.shape()));
    }
    const std::size_t m = X.extent(0), k = X.extent(1), n = W.extent(1);
    if (B.size() != n) {
        throw ShapeError("linear: bias shape mismatch " + shape_string(B.shape()) + " vs " + shape_string(W.shape()));
    }
    Tensor<T> out({m, n});
    for (std::size_t r = 0; r < m; ++r) std::copy(B.data(), B.data() + n, out.data() + r * n);
    if (m && n && k) detail::gemm_nn(X.data(), W.data(), out.data(), m, k, n, true);
    return x.graph->emit(std::move(out), {x, w, b}, [x, w, b, m, k, n](Graph<T>& g, const Tensor<T>& dy) {
        if (g.requires_grad(x)) detail::gemm_nt_acc(dy.data(), w.value().data(), g.grad_buffer(x).data(), m, n, k);
        if (g.requires_grad(w)) detail::gemm_tn_acc(x.value().data(), dy.data(), g.grad_buffer(w).data(), m, k, n);
        if (g.requires_grad(b)) {
            T* db = g.grad_buffer(b).data();
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < n; ++c) db[c] += dy.data()[r * n + c];
            }
        }
    });
}

template <typename T>
Var<T> matvec(Var<T> x, Var<T> w) {
    const Tensor<T>& X = x.value();
    const Tensor<T>& W = w.value();
    require_rank2(X, "matvec");
    if (W.size() != X.extent(1)) {
        throw ShapeError("matvec: shape mismatch " + shape_string(X.shape()) + " vs " + shape_string(W.shape()));
    }
    const std::size_t m = X.extent(0), n = X.extent(1);
    Tensor<T> out({m});
    for (std::size_t r = 0; r < m; ++r) {
        T acc{0};
        for (std::size_t c = 0; c < n; ++c) acc += X(r, c) * W[c];
        out[r] = acc;
    }
    return x.graph->emit(std::move(out), {x, w}, [x, w, m, n](Graph<T>& g, const Tensor<T>& dy) {
        if (g.requires_grad(x)) {
            Tensor<T>& dx = g.grad_buffer(x);
            const Tensor<T>& W = w.value();
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < n; ++c) dx(r, c) += dy[r] * W[c];
            }
        }
        if (g.requires_grad(w)) {
            Tensor<T>& dw = g.grad_buffer(w);
            const Tensor<T>& X = x.value();
            for (std::size_t r = 0; r < m; ++r) {
                for (std::size_t c = 0; c < n; ++c) dw[c] += dy[r] * X(r, c);
            }
        }
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    require_same_shape(A.shape(), B.shape(), "add");
    Tensor<T> out = A;
    add_into(out, B);
    return a.graph->emit(std::move(out), {a, b}, [a, b](Graph<T>& g, const Tensor<T>& dy) {
        if (g.requires_grad(a)) add_into(g.grad_buffer(a), dy);
        if (g.requires_grad(b)) add_into(g.grad_buffer(b), dy);
    });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> bias) {
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = bias.value();
    if (B.size() != A.cols()) {
        throw ShapeError("add_row: shape mismatch " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
    }
    Tensor<T> out = A;
    const std::size_t rows = A.rows(), cols = A.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) out(r, c) += B[c];
    }
    return a.graph->emit(std::move(out), {a, bias}, [a, bias, rows, cols](Graph<T>& g, const Tensor<T>& dy) {
        if (g.requires_grad(a)) add_into(g.grad_buffer(a), dy);
        if (g.requires_grad(bias)) {
            Tensor<T>& db = g.grad_buffer(bias);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) db[c] += dy(r, c);
            }
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
    Tensor<T> out = a.value();
    for (T& v : out.values()) v *= factor;
    return a.graph->emit(std::move(out), {a}, [a, factor](Graph<T>& g, const Tensor<T>& dy) {
        Tensor<T>& da = g.grad_buffer(a);
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += factor * dy[i];
    });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return a.graph->emit(std::move(out), {a}, [a](Graph<T>& g, const Tensor<T>& dy) {
        Tensor<T>& da = g.grad_buffer(a);
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
    });
}

template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    require_rank2(A, "concat_rows");
    require_rank2(B, "concat_rows");
    if (A.extent(1) != B.extent(1)) {
        throw ShapeError("concat_rows: shape mismatch " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
    }
    const std::size_t split = A.size();
    Tensor<T> out({A.extent(0) + B.extent(0), A.extent(1)});
    std::copy(A.data(), A.data() + A.size(), out.data());
    std::copy(B.data(), B.data() + B.size(), out.data() + split);
    return a.graph->emit(std::move(out), {a, b}, [a, b, split](Graph<T>& g, const Tensor<T>& dy) {
        if (g.requires_grad(a)) {
            Tensor<T>& da = g.grad_buffer(a);
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i];
        }
        if (g.requires_grad(b)) {
            Tensor<T>& db = g.grad_buffer(b);
            for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[split + i];
        }
    });
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t count) {
    const Tensor<T>& A = a.value();
    require_rank2(A, "slice_rows");
    if (begin + count > A.extent(0)) {
        throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") outside " + shape_string(A.shape()));
    }
    const std::size_t cols = A.extent(1);
    Tensor<T> out({count, cols});
    std::copy(A.data() + begin * cols, A.data() + (begin + count) * cols, out.data());
    return a.graph->emit(std::move(out), {a}, [a, begin, cols](Graph<T>& g, const Tensor<T>& dy) {
        Tensor<T>& da = g.grad_buffer(a);
        for (std::size_t i = 0; i < dy.size(); ++i) da[begin * cols + i] += dy[i];
    });
}

template <typename T>
Var<T> gather_rows(Var<T> a, std::span<const std::uint32_t> rows) {
    const Tensor<T>& A = a.value();
    require_rank2(A, "gather_rows");
    const std::size_t cols = A.extent(1);
    Tensor<T> out({rows.size(), cols});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= A.extent(0)) {
            throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " outside " + shape_string(A.shape()));
        }
        std::copy_n(A.data() + rows[i] * cols, cols, out.data() + i * cols);
    }
    std::vector<std::uint32_t> index(rows.begin(), rows.end());
    return a.graph->emit(std::move(out), {a}, [a, index = std::move(index), cols](Graph<T>& g, const Tensor<T>& dy) {
        Tensor<T>& da = g.grad_buffer(a);
        for (std::size_t i = 0; i < index.size(); ++i) {
            T* dst = da.data() + index[i] * cols;
            const T* src = dy.data() + i * cols;
            for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
        }
    });
}

template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::int32_t> ids) {
    const std::size_t vocab = table.value().rows();
    std::vector<std::uint32_t> rows(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw DataError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab) +
                            " rows");
        }
        rows[i] = static_cast<std::uint32_t>(ids[i]);
    }
    return gather_rows(table, std::span<const std::uint32_t>(rows));
}

template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
    const Tensor<T>& X = x.value();
    const std::size_t rows = X.rows(), cols = X.cols();
    if (gamma.value().size() != cols || beta.value().size() != cols) {
        throw ShapeError("layernorm: shape mismatch " + shape_string(X.shape()) + " vs " +
                         shape_string(gamma.value().shape()));
    }
    const Tensor<T>& G = gamma.value();
    const Tensor<T>& B = beta.value();
    Tensor<T> out(X.shape());
    Tensor<T> xhat(X.shape());
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T mean{0};
        for (std::size_t c = 0; c < cols; ++c) mean += X(r, c);
        mean /= static_cast<T>(cols);
        T var{0};
        for (std::size_t c = 0; c < cols; ++c) {
            const T d = X(r, c) - mean;
            var += d * d;
        }
        var /= static_cast<T>(cols);
        const T is = T{1} / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < cols; ++c) {
            const T h = (X(r, c) - mean) * is;
            xhat(r, c) = h;
            out(r, c) = h * G[c] + B[c];
        }
    }
    if (!x.graph->recording()) return x.graph->emit(std::move(out), {x, gamma, beta}, {});
    return x.graph->emit(
        std::move(out), {x, gamma, beta},
        [x, gamma, beta, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& g,
                                                                                            const Tensor<T>& dy) {
            const Tensor<T>& G = gamma.value();
            if (g.requires_grad(gamma) || g.requires_grad(beta)) {
                T* dg = g.requires_grad(gamma) ? g.grad_buffer(gamma).data() : nullptr;
                T* db = g.requires_grad(beta) ? g.grad_buffer(beta).data() : nullptr;
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        if (dg) dg[c] += dy(r, c) * xhat(r, c);
                        if (db) db[c] += dy(r, c);
                    }
                }
            }
            if (!g.requires_grad(x)) return;
            Tensor<T>& dx = g.grad_buffer(x);
            const T n = static_cast<T>(cols);
            for (std::size_t r = 0; r < rows; ++r) {
                T sum_d{0}, sum_dh{0};
                for (std::size_t c = 0; c < cols; ++c) {
                    const T d = dy(r, c) * G[c];
                    sum_d += d;
                    sum_dh += d * xhat(r, c);
                }
                const T mean_d = sum_d / n, mean_dh = sum_dh / n;
                for (std::size_t c = 0; c < cols; ++c) {
                    const T d = dy(r, c) * G[c];
                    dx(r, c) += inv_std[r] * (d - mean_d - xhat(r, c) * mean_dh);
                }
            }
        });
}

template <typename T>
Var<T> gelu(Var<T> x) {
    const Tensor<T>& X = x.value();
    Tensor<T> out(X.shape());
    const T inv_sqrt2 = T{1} / std::numbers::sqrt2_v<T>;
    for (std::size_t i = 0; i < X.size(); ++i) out[i] = T(0.5) * X[i] * (T{1} + std::erf(X[i] * inv_sqrt2));
    return x.graph->emit(std::move(out), {x}, [x, inv_sqrt2](Graph<T>& g, const Tensor<T>& dy) {
        const Tensor<T>& X = x.value();
        Tensor<T>& dx = g.grad_buffer(x);
        const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
        for (std::size_t i = 0; i < X.size(); ++i) {
            const T v = X[i];
            const T cdf = T(0.5) * (T{1} + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
            dx[i] += dy[i] * (cdf + v * pdf);
        }
    });
}

template <typename T>
Var<T> softmax(Var<T> x, Mask mask) {
    require_mask(mask, x.value().size(), "softmax");
    Tensor<T> out = softmax_rows(x.value(), mask);
    Tensor<T> probs = x.graph->recording() ? out : Tensor<T>{};
    return x.graph->emit(std::move(out), {x}, [x, probs = std::move(probs)](Graph<T>& g, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad_buffer(x);
        const std::size_t rows = probs.rows(), cols = probs.cols();
        for (std::size_t r = 0; r < rows; ++r) {
            T dot{0};
            for (std::size_t c = 0; c < cols; ++c) dot += dy(r, c) * probs(r, c);
            for (std::size_t c = 0; c < cols; ++c) dx(r, c) += probs(r, c) * (dy(r, c) - dot);
        }
    });
}

template <typename T>
Var<T> dropout(Var<T> x, T rate, bool train, CounterRng& rng) {
    if (!train || rate <= T{0}) return x;
    if (rate >= T{1}) throw ConfigError("dropout: rate must be < 1");
    const Tensor<T>& X = x.value();
    const T keep_scale = T{1} / (T{1} - rate);
    Tensor<T> mask(X.shape());
    Tensor<T> out(X.shape());
    for (std::size_t i = 0; i < X.size(); ++i) {
        mask[i] = rng.uniform() >= static_cast<double>(rate) ? keep_scale : T{0};
        out[i] = X[i] * mask[i];
    }
    return x.graph->emit(std::move(out), {x}, [x, mask = std::move(mask)](Graph<T>& g, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad_buffer(x);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
    });
}

template <typename T>
Var<T> mse(Var<T> a, Var<T> b, Mask row_mask) {
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    require_same_shape(A.shape(), B.shape(), "mse");
    const std::size_t rows = A.rows(), cols = A.cols();
    require_mask(row_mask, rows, "mse");
    std::size_t active = 0;
    T sum{0};
    for (std::size_t r = 0; r < rows; ++r) {
        if (!on(row_mask, r)) continue;
        ++active;
        for (std::size_t c = 0; c < cols; ++c) {
            const T d = A(r, c) - B(r, c);
            sum += d * d;
        }
    }
    const T count = static_cast<T>(active * cols);
    const T loss = count > T{0} ? sum / count : T{0};
    std::vector<std::uint8_t> keep(row_mask.begin(), row_mask.end());
    return a.graph->emit(Tensor<T>::scalar(loss), {a, b},
                         [a, b, rows, cols, count, keep = std::move(keep)](Graph<T>& g, const Tensor<T>& dy) {
                             if (count == T{0}) return;
                             const T f = T{2} * dy[0] / count;
                             const Tensor<T>& A = a.value();
                             const Tensor<T>& B = b.value();
                             T* da = g.requires_grad(a) ? g.grad_buffer(a).data() : nullptr;
                             T* db = g.requires_grad(b) ? g.grad_buffer(b).data() : nullptr;
                             for (std::size_t r = 0; r < rows; ++r) {
                                 if (!on(keep, r)) continue;
                                 for (std::size_t c = 0; c < cols; ++c) {
                                     const T d = f * (A(r, c) - B(r, c));
                                     if (da) da[r * cols + c] += d;
                                     if (db) db[r * cols + c] -= d;
                                 }
                             }
                         });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::uint32_t> targets, Mask mask) {
    const Tensor<T>& X = logits.value();
    const std::size_t rows = X.rows(), cols = X.cols();
    require_mask(mask, X.size(), "cross_entropy");
    if (targets.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits of shape " +
                         shape_string(X.shape()));
    }
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] >= cols || !on(mask, r * cols + targets[r])) {
            throw DataError("cross_entropy: target " + std::to_string(targets[r]) + " outside the unmasked row " +
                            std::to_string(r));
        }
    }
    Tensor<T> logp = log_softmax_rows(X, mask);
    T loss{0};
    for (std::size_t r = 0; r < rows; ++r) loss -= logp(r, targets[r]);
    loss /= static_cast<T>(rows);
    std::vector<std::uint32_t> tgt(targets.begin(), targets.end());
    return logits.graph->emit(
        Tensor<T>::scalar(loss), {logits},
        [logits, logp = std::move(logp), tgt = std::move(tgt), rows, cols](Graph<T>& g, const Tensor<T>& dy) {
            Tensor<T>& dx = g.grad_buffer(logits);
            const T f = dy[0] / static_cast<T>(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    const T lp = logp(r, c);
                    const T p = std::isinf(lp) ? T{0} : std::exp(lp);
                    dx(r, c) += f * (p - (c == tgt[r] ? T{1} : T{0}));
                }
            }
        });
}

template <typename T>
Var<T> kl_divergence(Var<T> reference, Var<T> logits, Mask mask) {
    const Tensor<T>& P = reference.value();
    const Tensor<T>& Q = logits.value();
    require_same_shape(P.shape(), Q.shape(), "kl_divergence");
    require_mask(mask, P.size(), "kl_divergence");
    const std::size_t rows = P.rows(), cols = P.cols();
    Tensor<T> logp = log_softmax_rows(P, mask);
    Tensor<T> logq = log_softmax_rows(Q, mask);
    std::vector<T> row_kl(rows, T{0});
    T total{0};
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            if (!on(mask, r * cols + c)) continue;
            row_kl[r] += std::exp(logp(r, c)) * (logp(r, c) - logq(r, c));
        }
        total += row_kl[r];
    }
    total /= static_cast<T>(rows);
    std::vector<std::uint8_t> keep(mask.begin(), mask.end());
    return reference.graph->emit(
        Tensor<T>::scalar(total), {reference, logits},
        [reference, logits, logp = std::move(logp), logq = std::move(logq), row_kl = std::move(row_kl),
         keep = std::move(keep), rows, cols](Graph<T>& g, const Tensor<T>& dy) {
            const T f = dy[0] / static_cast<T>(rows);
            T* dp = g.requires_grad(reference) ? g.grad_buffer(reference).data() : nullptr;
            T* dq = g.requires_grad(logits) ? g.grad_buffer(logits).data() : nullptr;
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t i = r * cols + c;
                    if (!on(keep, i)) continue;
                    const T p = std::exp(logp[i]);
                    if (dq) dq[i] += f * (std::exp(logq[i]) - p);
                    if (dp) dp[i] += f * p * ((logp[i] - logq[i]) - row_kl[r]);
                }
            }
        });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, Mask key_mask, AttentionShape shape, T dropout_rate, bool train,
                 CounterRng& rng) {
    const Tensor<T>& Q = q.value();
    const Tensor<T>& K = k.value();
    const Tensor<T>& V = v.value();
    require_rank2(Q, "attention");
    require_same_shape(Q.shape(), K.shape(), "attention");
    require_same_shape(Q.shape(), V.shape(), "attention");
    const std::size_t rows = Q.extent(0), d = Q.extent(1);
    const std::size_t batch = shape.batch, heads = shape.heads;
    if (batch == 0 || heads == 0 || rows % batch != 0 || d % heads != 0) {
        throw ShapeError("attention: " + shape_string(Q.shape()) + " does not split into batch " +
                         std::to_string(batch) + " x heads " + std::to_string(heads));
    }
    require_mask(key_mask, rows, "attention");
    const std::size_t len = rows / batch, dh = d / heads;
    const T scale_factor = T{1} / std::sqrt(static_cast<T>(dh));
    const bool use_dropout = train && dropout_rate > T{0};
    const T keep_scale = use_dropout ? T{1} / (T{1} - dropout_rate) : T{1};
    const bool keep_probs = q.graph->recording();

    Tensor<T> out({rows, d});
    // probs / dropped: [batch, heads, len, len]
    Tensor<T> probs(keep_probs ? Shape{batch, heads, len, len} : Shape{0});
    Tensor<T> drop_mask(keep_probs && use_dropout ? Shape{batch, heads, len, len} : Shape{0});
    detail::RowMatrix<T> scores(len, len);
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = b * len;
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = base * d + h * dh;
            scores.noalias() = cmat(Q.data() + off, len, dh, d) * cmat(K.data() + off, len, dh, d).transpose();
            for (std::size_t i = 0; i < len; ++i) {
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < len; ++j) {
                    if (on(key_mask, base + j)) mx = std::max(mx, scores(i, j) * scale_factor);
                }
                T sum{0};
                for (std::size_t j = 0; j < len; ++j) {
                    if (on(key_mask, base + j)) {
                        const T e = std::exp(scores(i, j) * scale_factor - mx);
                        scores(i, j) = e;
                        sum += e;
                    } else {
                        scores(i, j) = T{0};
                    }
                }
                const T inv = sum > T{0} ? T{1} / sum : T{0};
                for (std::size_t j = 0; j < len; ++j) scores(i, j) *= inv;
            }
            const std::size_t pb = (b * heads + h) * len * len;
            if (keep_probs) std::copy(scores.data(), scores.data() + len * len, probs.data() + pb);
            if (use_dropout) {
                for (std::size_t i = 0; i < len * len; ++i) {
                    const T m = rng.uniform() >= static_cast<double>(dropout_rate) ? keep_scale : T{0};
                    scores.data()[i] *= m;
                    if (keep_probs) drop_mask[pb + i] = m;
                }
            }
            mat(out.data() + off, len, dh, d).noalias() = scores * cmat(V.data() + off, len, dh, d);
        }
    }
    if (!keep_probs) return q.graph->emit(std::move(out), {q, k, v}, {});

    return q.graph->emit(
        std::move(out), {q, k, v},
        [q, k, v, probs = std::move(probs), drop_mask = std::move(drop_mask), batch, heads, len, d, dh,
         scale_factor, use_dropout](Graph<T>& g, const Tensor<T>& dy) {
            const Tensor<T>& Q = q.value();
            const Tensor<T>& K = k.value();
            const Tensor<T>& V = v.value();
            T* dq = g.requires_grad(q) ? g.grad_buffer(q).data() : nullptr;
            T* dk = g.requires_grad(k) ? g.grad_buffer(k).data() : nullptr;
            T* dv = g.requires_grad(v) ? g.grad_buffer(v).data() : nullptr;
            detail::RowMatrix<T> p(len, len), pd(len, len), dp(len, len);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t off = b * len * d + h * dh;
                    const std::size_t pb = (b * heads + h) * len * len;
                    std::copy(probs.data() + pb, probs.data() + pb + len * len, p.data());
                    pd = p;
                    if (use_dropout) {
                        for (std::size_t i = 0; i < len * len; ++i) pd.data()[i] *= drop_mask[pb + i];
                    }
                    auto dctx = cmat(dy.data() + off, len, dh, d);
                    if (dv) mat(dv + off, len, dh, d).noalias() += pd.transpose() * dctx;
                    if (!dq && !dk) continue;
                    dp.noalias() = dctx * cmat(V.data() + off, len, dh, d).transpose();
                    if (use_dropout) {
                        for (std::size_t i = 0; i < len * len; ++i) dp.data()[i] *= drop_mask[pb + i];
                    }
                    for (std::size_t i = 0; i < len; ++i) {
                        T dot{0};
                        for (std::size_t j = 0; j < len; ++j) dot += dp(i, j) * p(i, j);
                        for (std::size_t j = 0; j < len; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * scale_factor;
                    }
                    if (dq) mat(dq + off, len, dh, d).noalias() += dp * cmat(K.data() + off, len, dh, d);
                    if (dk) mat(dk + off, len, dh, d).noalias() += dp.transpose() * cmat(Q.data() + off, len, dh, d);
                }
            }
        });
}

#define DTR_INSTANTIATE_OPS(T)                                                                              \
    template Var<T> matmul(Var<T>, Var<T>);                                                                 \
    template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                         \
    template Var<T> matvec(Var<T>, Var<T>);                                                                 \
    template Var<T> add(Var<T>, Var<T>);                                                                    \
    template Var<T> add_row(Var<T>, Var<T>);                                                                \
    template Var<T> scale(Var<T>, T);                                                                       \
    template Var<T> reshape(Var<T>, Shape);                                                                 \
    template Var<T> concat_rows(Var<T>, Var<T>);                                                            \
    template Var<T> slice_rows(Var<T>, std::size_t, std::size_t);                                           \
    template Var<T> gather_rows(Var<T>, std::span<const std::uint32_t>);                                    \
    template Var<T> embedding(Var<T>, std::span<const std::int32_t>);                                       \
    template Var<T> layernorm(Var<T>, Var<T>, Var<T>, T);                                                   \
    template Var<T> gelu(Var<T>);                                                                           \
    template Var<T> softmax(Var<T>, Mask);                                                                  \
    template Var<T> dropout(Var<T>, T, bool, CounterRng&);                                                  \
    template Var<T> mse(Var<T>, Var<T>, Mask);                                                              \
    template Var<T> cross_entropy(Var<T>, std::span<const std::uint32_t>, Mask);                            \
    template Var<T> kl_divergence(Var<T>, Var<T>, Mask);                                                    \
    template Var<T> attention(Var<T>, Var<T>, Var<T>, Mask, AttentionShape, T, bool, CounterRng&);

DTR_INSTANTIATE_OPS(float)
DTR_INSTANTIATE_OPS(double)

#undef DTR_INSTANTIATE_OPS

}  // namespace dtr::ops
