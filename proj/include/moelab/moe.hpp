// SPDX-License-Identifier: Apache-2.0
//
// Mixture-of-Experts layer with three router backward modes:
//   topk    — only selected experts contribute gradient to the router
//   dense   — all experts run; the router gets the full gradient
//   default — selected experts run; non-selected slots are filled with a
//             per-expert EMA of previously seen outputs, which enters the
//             graph as a constant so the router still receives a dense
//             gradient while expert compute stays sparse
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moelab/errors.hpp"
#include "moelab/ops.hpp"
#include "moelab/tensor.hpp"
#include "moelab/util.hpp"

namespace moelab {

enum class RoutingMode { TopK, Dense, Default };
enum class EmaInit { Zeros, Gaussian };
enum class EmaWeighting { Uniform, Scored };
enum class EmaApply { ForwardAndBackward, BackwardOnly };

inline std::string to_string(RoutingMode m) {
    switch (m) {
        case RoutingMode::TopK: return "topk";
        case RoutingMode::Dense: return "dense";
        case RoutingMode::Default: return "default";
    }
    return "?";
}

inline RoutingMode routing_mode_from_string(const std::string& s) {
    if (s == "topk") return RoutingMode::TopK;
    if (s == "dense") return RoutingMode::Dense;
    if (s == "default") return RoutingMode::Default;
    throw ConfigError("unknown routing mode '" + s + "' (expected topk|dense|default)");
}

struct EmaOptions {
    double beta = 0.9;
    EmaInit init = EmaInit::Zeros;
    EmaWeighting weighting = EmaWeighting::Scored;
    bool scored_normalize = true; // divide weighted sum by the score sum; false divides by count
    EmaApply apply = EmaApply::ForwardAndBackward;
};

struct MoeLayerConfig {
    std::size_t num_experts = 8;
    std::size_t top_k = 1;
    std::size_t hidden_dim = 64;
    std::size_t intermediate_dim = 128;
    RoutingMode mode = RoutingMode::Default;
    double aux_coeff = 0.01;
    EmaOptions ema;

    void validate() const {
        if (num_experts < 1) throw ConfigError("num_experts must be >= 1");
        if (top_k < 1 || top_k > num_experts)
            throw ConfigError("top_k=" + std::to_string(top_k) + " out of range [1, " +
                              std::to_string(num_experts) + "]");
        if (aux_coeff < 0) throw ConfigError("aux_coeff must be >= 0");
        if (ema.beta < 0 || ema.beta > 1) throw ConfigError("ema beta must be in [0, 1]");
    }
};

template <typename T>
struct RouterParams {
    Tensor<T> w; // (num_experts x hidden_dim)
};

template <typename T>
struct MoeExpert {
    Tensor<T> w_gate, w_up; // (intermediate x hidden)
    Tensor<T> w_down;       // (hidden x intermediate)
};

template <typename T>
struct ExpertBank {
    std::vector<MoeExpert<T>> experts;
    std::size_t size() const { return experts.size(); }
};

// Per-token routing decisions of one layer invocation.
template <typename T>
struct RoutingOutcome {
    Tensor<T> pi;                                     // (tokens x N), lives on the graph
    std::vector<std::vector<std::uint32_t>> selected; // per token, ascending expert ids
    std::vector<std::vector<T>> combine_weights;      // pi restricted to selected, same order
    std::size_t num_experts = 0;
};

// EMA buffers standing in for non-activated expert outputs. The buffers are
// plain value arrays, never graph leaves, and therefore can never receive a
// gradient.
template <typename T>
class DefaultVectorBank {
public:
    DefaultVectorBank() = default;
    DefaultVectorBank(std::size_t num_experts, std::size_t dim, EmaOptions opts)
        : n_(num_experts), dim_(dim), opts_(opts), data_(num_experts * dim, T(0)) {}

    void init_gaussian(Rng& rng, double stddev) {
        for (auto& v : data_) v = static_cast<T>(rng.gaussian(0.0, stddev));
    }

    std::size_t num_experts() const { return n_; }
    std::size_t dim() const { return dim_; }
    std::size_t scalar_count() const { return data_.size(); }
    std::uint64_t step() const { return step_; }
    const EmaOptions& options() const { return opts_; }
    EmaOptions& options() { return opts_; }

    const T* vector(std::size_t i) const { return data_.data() + i * dim_; }
    T* vector_mut(std::size_t i) { return data_.data() + i * dim_; }
    const std::vector<T>& raw() const { return data_; }
    std::vector<T>& raw() { return data_; }
    void set_step(std::uint64_t s) { step_ = s; }

private:
    std::size_t n_ = 0, dim_ = 0;
    EmaOptions opts_;
    std::vector<T> data_;
    std::uint64_t step_ = 0;
};

// View of the outputs one expert produced this batch: `count` rows of
// bank-dim scalars, detached from the graph.
template <typename T>
struct ExpertBatchView {
    const T* rows = nullptr;
    std::size_t count = 0;
};

// One EMA step. Experts that saw no tokens are left untouched; the batch
// mean is either uniform over routed tokens or weighted by router scores.
template <typename T>
void ema_update(DefaultVectorBank<T>& bank, const std::vector<ExpertBatchView<T>>& outputs,
                const std::vector<std::vector<T>>& scores) {
    if (outputs.size() != bank.num_experts())
        throw ShapeError("ema_update: " + std::to_string(outputs.size()) + " expert views for bank of " +
                         std::to_string(bank.num_experts()));
    const std::size_t dim = bank.dim();
    const T beta = static_cast<T>(bank.options().beta);
    std::vector<T> mean(dim);
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        const auto& view = outputs[i];
        if (view.count == 0) continue;
        std::fill(mean.begin(), mean.end(), T(0));
        T norm = T(0);
        if (bank.options().weighting == EmaWeighting::Scored) {
            for (std::size_t r = 0; r < view.count; ++r) {
                const T s = scores.at(i).at(r);
                for (std::size_t c = 0; c < dim; ++c) mean[c] += s * view.rows[r * dim + c];
                norm += s;
            }
            if (!bank.options().scored_normalize) norm = static_cast<T>(view.count);
        } else {
            for (std::size_t r = 0; r < view.count; ++r)
                for (std::size_t c = 0; c < dim; ++c) mean[c] += view.rows[r * dim + c];
            norm = static_cast<T>(view.count);
        }
        if (norm <= T(0)) continue;
        T* e = bank.vector_mut(i);
        for (std::size_t c = 0; c < dim; ++c) {
            const T m = mean[c] / norm;
            if (!std::isfinite(m)) throw NumericError("ema_update: non-finite expert output mean");
            e[c] = beta * e[c] + (T(1) - beta) * m;
            if (!std::isfinite(e[c])) throw NumericError("ema_update: non-finite EMA value");
        }
    }
    bank.set_step(bank.step() + 1);
}

// pi = softmax(x W^T)
template <typename T>
Tensor<T> router_forward(Graph<T>& g, const RouterParams<T>& router, Tensor<T> x) {
    return softmax_rows(g, matmul_nt(g, x, router.w));
}

// K largest entries per row; ties broken toward the smaller expert index.
// Returned ids are sorted ascending. Selection carries no gradient.
template <typename T>
std::vector<std::vector<std::uint32_t>> topk_select(const Tensor<T>& pi, std::size_t k) {
    const std::size_t n = pi.cols();
    if (k < 1 || k > n)
        throw IndexError("topk_select: K=" + std::to_string(k) + " out of range [1, " + std::to_string(n) + "]");
    std::vector<std::vector<std::uint32_t>> out(pi.rows());
    std::vector<std::uint32_t> order(n);
    for (std::size_t r = 0; r < pi.rows(); ++r) {
        const T* row = pi.data() + r * n;
        for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                          [row](std::uint32_t a, std::uint32_t b) {
                              if (row[a] != row[b]) return row[a] > row[b];
                              return a < b;
                          });
        out[r].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
        std::sort(out[r].begin(), out[r].end());
    }
    return out;
}

struct MoeForwardOptions {
    std::optional<RoutingMode> mode;  // override the configured routing mode
    std::optional<std::size_t> k;     // override K (gradient-similarity sweeps)
    const std::vector<std::vector<std::uint32_t>>* forced_selected = nullptr;
    bool freeze_ema = false; // evaluation / finite differences: bank stays fixed
};

template <typename T>
class MoeLayer {
public:
    MoeLayer() = default;
    explicit MoeLayer(MoeLayerConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        router_.w = Tensor<T>::zeros({cfg.num_experts, cfg.hidden_dim});
        router_.w.set_requires_grad(true);
        experts_.experts.resize(cfg.num_experts);
        for (auto& e : experts_.experts) {
            e.w_gate = Tensor<T>::zeros({cfg.intermediate_dim, cfg.hidden_dim});
            e.w_up = Tensor<T>::zeros({cfg.intermediate_dim, cfg.hidden_dim});
            e.w_down = Tensor<T>::zeros({cfg.hidden_dim, cfg.intermediate_dim});
            e.w_gate.set_requires_grad(true);
            e.w_up.set_requires_grad(true);
            e.w_down.set_requires_grad(true);
        }
        bank_ = DefaultVectorBank<T>(cfg.num_experts, cfg.hidden_dim, cfg.ema);
    }

    void init_params(Rng& rng, double router_std, double w_std) {
        for (auto& v : router_.w.values()) v = static_cast<T>(rng.gaussian(0.0, router_std));
        for (auto& e : experts_.experts) {
            for (auto& v : e.w_gate.values()) v = static_cast<T>(rng.gaussian(0.0, w_std));
            for (auto& v : e.w_up.values()) v = static_cast<T>(rng.gaussian(0.0, w_std));
            for (auto& v : e.w_down.values()) v = static_cast<T>(rng.gaussian(0.0, w_std));
        }
        if (cfg_.ema.init == EmaInit::Gaussian) bank_.init_gaussian(rng, w_std);
    }

    const MoeLayerConfig& config() const { return cfg_; }
    RouterParams<T>& router() { return router_; }
    const RouterParams<T>& router() const { return router_; }
    ExpertBank<T>& experts() { return experts_; }
    const ExpertBank<T>& experts() const { return experts_; }
    DefaultVectorBank<T>& bank() { return bank_; }
    const DefaultVectorBank<T>& bank() const { return bank_; }

    // (token, expert) pairs that went through an expert FFN so far
    std::uint64_t expert_row_evals() const { return expert_row_evals_; }
    void reset_eval_counter() { expert_row_evals_ = 0; }

    struct Forward {
        Tensor<T> y;
        Tensor<T> aux_loss; // scalar; zero tensor when aux_coeff == 0
        RoutingOutcome<T> outcome;
    };

    Forward forward(Graph<T>& g, Tensor<T> x, const MoeForwardOptions& opts = {}) {
        const std::size_t n = cfg_.num_experts;
        if (x.ndim() != 2 || x.cols() != cfg_.hidden_dim)
            throw ShapeError("moe forward: input " + shape_str(x.shape()) + " vs hidden dim " +
                             std::to_string(cfg_.hidden_dim));
        if (bank_.num_experts() != n) throw ShapeError("moe forward: bank/expert count mismatch");
        const std::size_t tokens = x.rows();
        const RoutingMode mode = opts.mode.value_or(cfg_.mode);
        const std::size_t k = mode == RoutingMode::Dense ? n : opts.k.value_or(cfg_.top_k);

        RoutingOutcome<T> outcome;
        outcome.num_experts = n;
        outcome.pi = router_forward(g, router_, x);
        if (opts.forced_selected != nullptr) {
            if (opts.forced_selected->size() != tokens)
                throw ShapeError("moe forward: forced selection token count mismatch");
            outcome.selected = *opts.forced_selected;
        } else if (mode == RoutingMode::Dense) {
            std::vector<std::uint32_t> all(n);
            for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<std::uint32_t>(i);
            outcome.selected.assign(tokens, all);
        } else {
            outcome.selected = topk_select(outcome.pi, k);
        }
        outcome.combine_weights.resize(tokens);
        for (std::size_t r = 0; r < tokens; ++r) {
            outcome.combine_weights[r].reserve(outcome.selected[r].size());
            for (auto i : outcome.selected[r])
                outcome.combine_weights[r].push_back(outcome.pi.values()[r * n + i]);
        }

        // tokens routed to each expert, in token order
        std::vector<std::vector<std::size_t>> expert_rows(n);
        for (std::size_t r = 0; r < tokens; ++r)
            for (auto i : outcome.selected[r]) expert_rows[i].push_back(r);

        std::vector<Tensor<T>> expert_out(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (expert_rows[i].empty()) continue;
            Tensor<T> xi = gather_rows(g, x, expert_rows[i]);
            expert_out[i] = swiglu(g, xi, experts_.experts[i].w_gate, experts_.experts[i].w_up,
                                   experts_.experts[i].w_down);
            expert_row_evals_ += expert_rows[i].size();
        }

        const bool use_defaults = mode == RoutingMode::Default;
        if (use_defaults && !opts.freeze_ema) {
            // update-then-substitute: this batch's activated outputs enter the
            // EMA before the defaults are read below
            std::vector<ExpertBatchView<T>> views(n);
            std::vector<std::vector<T>> scores(n);
            for (std::size_t i = 0; i < n; ++i) {
                if (expert_rows[i].empty()) continue;
                views[i] = {expert_out[i].data(), expert_rows[i].size()};
                scores[i].reserve(expert_rows[i].size());
                for (std::size_t r : expert_rows[i]) scores[i].push_back(outcome.pi.values()[r * n + i]);
            }
            ema_update(bank_, views, scores);
        }

        Tensor<T> y = combine(g, outcome, expert_rows, expert_out, x.cols(), use_defaults);

        Forward res;
        res.y = y;
        res.outcome = std::move(outcome);
        res.aux_loss = cfg_.aux_coeff > 0 ? aux_load_balance_loss(g, res.outcome, static_cast<T>(cfg_.aux_coeff))
                                          : Tensor<T>::scalar(T(0));
        return res;
    }

    Forward forward_topk(Graph<T>& g, Tensor<T> x) {
        MoeForwardOptions o;
        o.mode = RoutingMode::TopK;
        return forward(g, x, o);
    }
    Forward forward_dense(Graph<T>& g, Tensor<T> x) {
        MoeForwardOptions o;
        o.mode = RoutingMode::Dense;
        return forward(g, x, o);
    }
    Forward forward_default(Graph<T>& g, Tensor<T> x) {
        MoeForwardOptions o;
        o.mode = RoutingMode::Default;
        return forward(g, x, o);
    }

    void collect_params(std::vector<std::pair<std::string, Tensor<T>>>& out, const std::string& prefix) {
        out.emplace_back(prefix + ".router.w", router_.w);
        for (std::size_t i = 0; i < experts_.size(); ++i) {
            const std::string p = prefix + ".expert" + std::to_string(i);
            out.emplace_back(p + ".w_gate", experts_.experts[i].w_gate);
            out.emplace_back(p + ".w_up", experts_.experts[i].w_up);
            out.emplace_back(p + ".w_down", experts_.experts[i].w_down);
        }
    }

private:
    // Combine activated outputs (and, in default mode, the constant bank
    // vectors) into per-token outputs. Summation runs in ascending expert
    // order for every token in every mode, so modes that compute the same
    // values produce bit-identical outputs and gradients.
    Tensor<T> combine(Graph<T>& g, const RoutingOutcome<T>& outcome,
                      const std::vector<std::vector<std::size_t>>& expert_rows,
                      const std::vector<Tensor<T>>& expert_out, std::size_t dim, bool use_defaults) {
        const std::size_t tokens = outcome.selected.size();
        const std::size_t n = cfg_.num_experts;
        const bool defaults_in_forward = use_defaults && cfg_.ema.apply == EmaApply::ForwardAndBackward;

        std::vector<std::uint8_t> member(tokens * n, 0);
        for (std::size_t r = 0; r < tokens; ++r)
            for (auto i : outcome.selected[r]) member[r * n + i] = 1;

        Tensor<T> y = Tensor<T>::zeros({tokens, dim});
        const auto& pi_v = outcome.pi.values();
        for (std::size_t i = 0; i < n; ++i) {
            if (!expert_rows[i].empty()) {
                const T* yo = expert_out[i].data();
                for (std::size_t p = 0; p < expert_rows[i].size(); ++p) {
                    const std::size_t r = expert_rows[i][p];
                    const T w = pi_v[r * n + i];
                    T* dst = y.data() + r * dim;
                    for (std::size_t c = 0; c < dim; ++c) dst[c] += w * yo[p * dim + c];
                }
            }
            if (defaults_in_forward) {
                const T* e = bank_.vector(i);
                for (std::size_t r = 0; r < tokens; ++r) {
                    if (member[r * n + i]) continue;
                    const T w = pi_v[r * n + i];
                    T* dst = y.data() + r * dim;
                    for (std::size_t c = 0; c < dim; ++c) dst[c] += w * e[c];
                }
            }
        }

        bool want = outcome.pi.requires_grad();
        for (const auto& t : expert_out)
            if (t.defined() && t.requires_grad()) want = true;
        if (!g.recording() || !want) return y;

        // Custom backward: straight-through for the router. Selected slots
        // use the true expert output; in default mode, non-selected slots use
        // the bank vector, which is a constant (no gradient reaches it).
        y.set_requires_grad(true);
        std::vector<T> bank_snapshot;
        if (use_defaults) bank_snapshot = bank_.raw();
        std::vector<std::uint64_t> parents{outcome.pi.id()};
        for (const auto& t : expert_out)
            if (t.defined()) parents.push_back(t.id());
        Tensor<T> pi = outcome.pi;
        g.record(std::move(parents), [y, pi, expert_rows, expert_out, member = std::move(member),
                                      bank_snapshot = std::move(bank_snapshot), use_defaults, n, dim,
                                      tokens]() mutable {
            if (!y.has_grad()) return;
            const auto& gy = y.grad();
            const auto& pi_v = pi.values();
            auto& gpi = pi.ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                if (!expert_rows[i].empty()) {
                    Tensor<T> yo = expert_out[i];
                    auto& gyo = yo.ensure_grad();
                    for (std::size_t p = 0; p < expert_rows[i].size(); ++p) {
                        const std::size_t r = expert_rows[i][p];
                        const T* grow = gy.data() + r * dim;
                        const T* orow = yo.data() + p * dim;
                        T dot = T(0);
                        for (std::size_t c = 0; c < dim; ++c) dot += grow[c] * orow[c];
                        gpi[r * n + i] += dot;
                        const T w = pi_v[r * n + i];
                        for (std::size_t c = 0; c < dim; ++c) gyo[p * dim + c] += w * grow[c];
                    }
                }
                if (use_defaults) {
                    const T* e = bank_snapshot.data() + i * dim;
                    for (std::size_t r = 0; r < tokens; ++r) {
                        if (member[r * n + i]) continue;
                        const T* grow = gy.data() + r * dim;
                        T dot = T(0);
                        for (std::size_t c = 0; c < dim; ++c) dot += grow[c] * e[c];
                        gpi[r * n + i] += dot;
                    }
                }
            }
        });
        return y;
    }

    MoeLayerConfig cfg_;
    RouterParams<T> router_;
    ExpertBank<T> experts_;
    DefaultVectorBank<T> bank_;
    std::uint64_t expert_row_evals_ = 0;
};

// Switch-style auxiliary loss: alpha * N * sum_i f_i * P_i over the whole
// batch in one reduction. f comes from the discrete assignments, P from the
// differentiable probabilities.
template <typename T>
Tensor<T> aux_load_balance_loss(Graph<T>& g, const RoutingOutcome<T>& outcome, T alpha) {
    const std::size_t tokens = outcome.selected.size();
    if (tokens == 0) throw ShapeError("aux_load_balance_loss: empty batch");
    const std::size_t n = outcome.num_experts;
    std::vector<T> f(n, T(0));
    std::size_t slots = 0;
    for (const auto& sel : outcome.selected) {
        for (auto i : sel) f[i] += T(1);
        slots += sel.size();
    }
    for (auto& v : f) v /= static_cast<T>(slots);
    Tensor<T> p = col_mean(g, outcome.pi);
    return scale(g, dot_const(g, p, std::move(f)), alpha * static_cast<T>(n));
}

} // namespace moelab
