// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over Tensor<T>. Each op computes its forward
// value eagerly and, when the graph is recording and some input requires a
// gradient, appends a backward rule to the tape. Dense products go through
// Eigen; backward rules themselves are written out explicitly.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "moelab/errors.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<MatrixRM<T>>;
template <typename T>
using MapCM = Eigen::Map<const MatrixRM<T>>;

template <typename T>
MapCM<T> as_matrix(const Tensor<T>& t) {
    if (t.ndim() != 2)
        throw ShapeError("expected a 2-d tensor, got shape " + shape_str(t.shape()));
    return MapCM<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MapM<T> grad_matrix(Tensor<T>& t) {
    t.ensure_grad();
    return MapM<T>(t.grad().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MapCM<T> grad_matrix_const(const Tensor<T>& t) {
    return MapCM<T>(t.grad().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

namespace detail {

template <typename T>
bool want_grad(const Graph<T>& g, std::initializer_list<const Tensor<T>*> inputs) {
    return g.recording() && any_requires_grad<T>(inputs);
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Graph<T>& g, Tensor<T> a, Tensor<T> b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
    if (detail::want_grad(g, {&a, &b})) {
        out.set_requires_grad(true);
        g.record({a.id(), b.id()}, [a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.ensure_grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> mul(Graph<T>& g, Tensor<T> a, Tensor<T> b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
    if (detail::want_grad(g, {&a, &b})) {
        out.set_requires_grad(true);
        g.record({a.id(), b.id()}, [a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.ensure_grad();
                for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b.values()[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.ensure_grad();
                for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a.values()[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(Graph<T>& g, Tensor<T> a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out.values()[i] = a.values()[i] * c;
    if (detail::want_grad(g, {&a})) {
        out.set_requires_grad(true);
        g.record({a.id()}, [a, out, c]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& ga = a.ensure_grad();
            for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
        });
    }
    return out;
}

template <typename T>
Tensor<T> silu(Graph<T>& g, Tensor<T> a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const T x = a.values()[i];
        const T s = T(1) / (T(1) + std::exp(-x));
        out.values()[i] = x * s;
    }
    if (detail::want_grad(g, {&a})) {
        out.set_requires_grad(true);
        g.record({a.id()}, [a, out]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& ga = a.ensure_grad();
            for (std::size_t i = 0; i < go.size(); ++i) {
                const T x = a.values()[i];
                const T s = T(1) / (T(1) + std::exp(-x));
                ga[i] += go[i] * (s + x * s * (T(1) - s));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(Graph<T>& g, Tensor<T> a, Tensor<T> b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::zeros({a.rows(), b.cols()});
    MapM<T>(out.data(), a.rows(), b.cols()).noalias() = as_matrix(a) * as_matrix(b);
    if (detail::want_grad(g, {&a, &b})) {
        out.set_requires_grad(true);
        g.record({a.id(), b.id()}, [a, b, out]() mutable {
            if (!out.has_grad()) return;
            auto go = grad_matrix_const(out);
            if (a.requires_grad()) grad_matrix(a).noalias() += go * as_matrix(b).transpose();
            if (b.requires_grad()) grad_matrix(b).noalias() += as_matrix(a).transpose() * go;
        });
    }
    return out;
}

// x (m x k) times w^T (k x n) for w stored (n x k); the shape every linear
// layer in the model uses (w rows are output features).
template <typename T>
Tensor<T> matmul_nt(Graph<T>& g, Tensor<T> x, Tensor<T> w) {
    if (x.ndim() != 2 || w.ndim() != 2 || x.cols() != w.cols())
        throw ShapeError("matmul_nt: incompatible shapes " + shape_str(x.shape()) + " x " +
                         shape_str(w.shape()) + "^T");
    Tensor<T> out = Tensor<T>::zeros({x.rows(), w.rows()});
    MapM<T>(out.data(), x.rows(), w.rows()).noalias() = as_matrix(x) * as_matrix(w).transpose();
    if (detail::want_grad(g, {&x, &w})) {
        out.set_requires_grad(true);
        g.record({x.id(), w.id()}, [x, w, out]() mutable {
            if (!out.has_grad()) return;
            auto go = grad_matrix_const(out);
            if (x.requires_grad()) grad_matrix(x).noalias() += go * as_matrix(w);
            if (w.requires_grad()) grad_matrix(w).noalias() += go.transpose() * as_matrix(x);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// row-structured ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_rows(Graph<T>& g, Tensor<T> logits) {
    if (logits.ndim() != 2)
        throw ShapeError("softmax_rows: expected 2-d tensor, got " + shape_str(logits.shape()));
    for (const T v : logits.values())
        if (!std::isfinite(v)) throw NumericError("softmax_rows: non-finite input");
    const std::size_t rows = logits.rows(), cols = logits.cols();
    Tensor<T> out = Tensor<T>::zeros(logits.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = logits.data() + r * cols;
        T* o = out.data() + r * cols;
        T mx = in[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
        T sum = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        for (std::size_t c = 0; c < cols; ++c) o[c] /= sum;
    }
    if (detail::want_grad(g, {&logits})) {
        out.set_requires_grad(true);
        g.record({logits.id()}, [logits, out, rows, cols]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gl = logits.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* s = out.data() + r * cols;
                const T* gr = go.data() + r * cols;
                T dot = T(0);
                for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * s[c];
                for (std::size_t c = 0; c < cols; ++c) gl[r * cols + c] += s[c] * (gr[c] - dot);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> rmsnorm(Graph<T>& g, Tensor<T> x, Tensor<T> gain, T eps = T(1e-6)) {
    if (x.ndim() != 2 || gain.numel() != x.cols())
        throw ShapeError("rmsnorm: gain " + shape_str(gain.shape()) + " does not match " + shape_str(x.shape()));
    const std::size_t rows = x.rows(), cols = x.cols();
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    std::vector<T> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.data() + r * cols;
        T ms = T(0);
        for (std::size_t c = 0; c < cols; ++c) ms += in[c] * in[c];
        ms = ms / static_cast<T>(cols) + eps;
        inv[r] = T(1) / std::sqrt(ms);
        T* o = out.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] * inv[r] * gain.values()[c];
    }
    if (detail::want_grad(g, {&x, &gain})) {
        out.set_requires_grad(true);
        g.record({x.id(), gain.id()}, [x, gain, out, inv, rows, cols]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* in = x.data() + r * cols;
                const T* gr = go.data() + r * cols;
                if (gain.requires_grad()) {
                    auto& gg = gain.ensure_grad();
                    for (std::size_t c = 0; c < cols; ++c) gg[c] += gr[c] * in[c] * inv[r];
                }
                if (x.requires_grad()) {
                    auto& gx = x.ensure_grad();
                    // dn = grad wrt the normalized row, before the gain
                    T dot = T(0);
                    for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * gain.values()[c] * in[c];
                    const T k = inv[r] * inv[r] * inv[r] * dot / static_cast<T>(cols);
                    for (std::size_t c = 0; c < cols; ++c)
                        gx[r * cols + c] += gr[c] * gain.values()[c] * inv[r] - in[c] * k;
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> gather_rows(Graph<T>& g, Tensor<T> x, std::vector<std::size_t> idx) {
    if (x.ndim() != 2) throw ShapeError("gather_rows: expected 2-d tensor");
    const std::size_t cols = x.cols();
    for (std::size_t i : idx)
        if (i >= x.rows()) throw IndexError("gather_rows: row index " + std::to_string(i) + " out of range");
    Tensor<T> out = Tensor<T>::zeros({idx.size(), cols});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(x.data() + idx[r] * cols, cols, out.data() + r * cols);
    if (detail::want_grad(g, {&x})) {
        out.set_requires_grad(true);
        g.record({x.id()}, [x, out, idx = std::move(idx), cols]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.ensure_grad();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (std::size_t c = 0; c < cols; ++c) gx[idx[r] * cols + c] += go[r * cols + c];
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_rows(Graph<T>& g, Tensor<T> x, std::size_t start, std::size_t len) {
    if (x.ndim() != 2 || start + len > x.rows())
        throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of " + shape_str(x.shape()));
    const std::size_t cols = x.cols();
    Tensor<T> out = Tensor<T>::zeros({len, cols});
    std::copy_n(x.data() + start * cols, len * cols, out.data());
    if (detail::want_grad(g, {&x})) {
        out.set_requires_grad(true);
        g.record({x.id()}, [x, out, start, len, cols]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.ensure_grad();
            for (std::size_t i = 0; i < len * cols; ++i) gx[start * cols + i] += go[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_rows(Graph<T>& g, std::vector<Tensor<T>> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t cols = parts[0].cols();
    std::size_t rows = 0;
    bool want = false;
    for (auto& p : parts) {
        if (p.ndim() != 2 || p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
        rows += p.rows();
        want = want || p.requires_grad();
    }
    Tensor<T> out = Tensor<T>::zeros({rows, cols});
    std::size_t at = 0;
    for (auto& p : parts) {
        std::copy_n(p.data(), p.numel(), out.data() + at * cols);
        at += p.rows();
    }
    if (g.recording() && want) {
        out.set_requires_grad(true);
        std::vector<std::uint64_t> ids;
        for (auto& p : parts) ids.push_back(p.id());
        g.record(std::move(ids), [parts = std::move(parts), out, cols]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            std::size_t at = 0;
            for (auto& p : parts) {
                if (p.requires_grad()) {
                    auto& gp = p.ensure_grad();
                    for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += go[at * cols + i];
                }
                at += p.rows();
            }
        });
    }
    return out;
}

// Sets entries above the diagonal to a large negative constant so the
// following softmax zeroes them; gradient passes only through the kept part.
template <typename T>
Tensor<T> causal_mask(Graph<T>& g, Tensor<T> scores) {
    if (scores.ndim() != 2 || scores.rows() != scores.cols())
        throw ShapeError("causal_mask: expected square matrix, got " + shape_str(scores.shape()));
    const std::size_t n = scores.rows();
    const T neg = T(-1e30);
    Tensor<T> out = Tensor<T>::zeros(scores.shape());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) out.values()[r * n + c] = c <= r ? scores.values()[r * n + c] : neg;
    if (detail::want_grad(g, {&scores})) {
        out.set_requires_grad(true);
        g.record({scores.id()}, [scores, out, n]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gs = scores.ensure_grad();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c <= r; ++c) gs[r * n + c] += go[r * n + c];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(Graph<T>& g, Tensor<T> x) {
    T s = T(0);
    for (const T v : x.values()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    if (detail::want_grad(g, {&x})) {
        out.set_requires_grad(true);
        g.record({x.id()}, [x, out]() mutable {
            if (!out.has_grad()) return;
            const T go = out.grad()[0];
            auto& gx = x.ensure_grad();
            for (auto& v : gx) v += go;
        });
    }
    return out;
}

// Column means: (rows x cols) -> (1 x cols).
template <typename T>
Tensor<T> col_mean(Graph<T>& g, Tensor<T> x) {
    if (x.ndim() != 2) throw ShapeError("col_mean: expected 2-d tensor");
    const std::size_t rows = x.rows(), cols = x.cols();
    if (rows == 0) throw ShapeError("col_mean: empty input");
    Tensor<T> out = Tensor<T>::zeros({1, cols});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.values()[c] += x.values()[r * cols + c];
    for (std::size_t c = 0; c < cols; ++c) out.values()[c] /= static_cast<T>(rows);
    if (detail::want_grad(g, {&x})) {
        out.set_requires_grad(true);
        g.record({x.id()}, [x, out, rows, cols]() mutable {
            if (!out.has_grad()) return;
            const auto& go = out.grad();
            auto& gx = x.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += go[c] / static_cast<T>(rows);
        });
    }
    return out;
}

// Inner product with a constant weight vector.
template <typename T>
Tensor<T> dot_const(Graph<T>& g, Tensor<T> x, std::vector<T> w) {
    if (x.numel() != w.size())
        throw ShapeError("dot_const: " + std::to_string(x.numel()) + " vs " + std::to_string(w.size()));
    T s = T(0);
    for (std::size_t i = 0; i < w.size(); ++i) s += x.values()[i] * w[i];
    Tensor<T> out = Tensor<T>::scalar(s);
    if (detail::want_grad(g, {&x})) {
        out.set_requires_grad(true);
        g.record({x.id()}, [x, out, w = std::move(w)]() mutable {
            if (!out.has_grad()) return;
            const T go = out.grad()[0];
            auto& gx = x.ensure_grad();
            for (std::size_t i = 0; i < w.size(); ++i) gx[i] += go * w[i];
        });
    }
    return out;
}

// Mean negative log-softmax probability of the target class per row.
template <typename T>
Tensor<T> cross_entropy(Graph<T>& g, Tensor<T> logits, const std::vector<std::int32_t>& targets) {
    if (logits.ndim() != 2 || logits.rows() != targets.size())
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
    const std::size_t rows = logits.rows(), cols = logits.cols();
    for (const auto t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= cols)
            throw IndexError("cross_entropy: target index " + std::to_string(t) + " out of range for vocab " +
                             std::to_string(cols));
    std::vector<T> probs(rows * cols);
    T loss = T(0);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = logits.data() + r * cols;
        T mx = in[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
        T sum = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            probs[r * cols + c] = std::exp(in[c] - mx);
            sum += probs[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] /= sum;
        loss += std::log(sum) + mx - in[targets[r]];
    }
    loss /= static_cast<T>(rows);
    Tensor<T> out = Tensor<T>::scalar(loss);
    if (detail::want_grad(g, {&logits})) {
        out.set_requires_grad(true);
        g.record({logits.id()}, [logits, out, probs = std::move(probs), targets, rows, cols]() mutable {
            if (!out.has_grad()) return;
            const T go = out.grad()[0] / static_cast<T>(rows);
            auto& gl = logits.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) gl[r * cols + c] += go * probs[r * cols + c];
                gl[r * cols + static_cast<std::size_t>(targets[r])] -= go;
            }
        });
    }
    return out;
}

// down( silu(gate(x)) * up(x) ); built from primitives so the backward pass
// comes from the tape.
template <typename T>
Tensor<T> swiglu(Graph<T>& g, Tensor<T> x, Tensor<T> w_gate, Tensor<T> w_up, Tensor<T> w_down) {
    Tensor<T> gate = matmul_nt(g, x, w_gate);
    Tensor<T> up = matmul_nt(g, x, w_up);
    Tensor<T> h = mul(g, silu(g, gate), up);
    return matmul_nt(g, h, w_down);
}

} // namespace moelab
