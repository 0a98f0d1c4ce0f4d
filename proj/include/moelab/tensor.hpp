// SPDX-License-Identifier: Apache-2.0
//
// Dense tensor with reverse-mode autodiff on a linear tape. Scalar type is a
// template parameter: float for training, double for gradient checking.
#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "moelab/errors.hpp"

namespace moelab {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

namespace detail {
inline std::uint64_t next_tensor_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}
} // namespace detail

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad; // empty until a backward rule first accumulates into it
    bool requires_grad = false;
    std::uint64_t id = detail::next_tensor_id();
};

// Value-semantic handle onto shared storage. Copies alias the same buffer.
template <typename T>
class Tensor {
public:
    using scalar_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.s_ = std::make_shared<TensorStorage<T>>();
        t.s_->shape = std::move(shape);
        t.s_->values.assign(shape_numel(t.s_->shape), T(0));
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.s_->values.begin(), t.s_->values.end(), value);
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> values) {
        if (shape_numel(shape) != values.size())
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        Tensor t;
        t.s_ = std::make_shared<TensorStorage<T>>();
        t.s_->shape = std::move(shape);
        t.s_->values = std::move(values);
        return t;
    }

    static Tensor scalar(T value) { return from({1}, {value}); }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::size_t ndim() const { return s_->shape.size(); }
    std::size_t numel() const { return s_->values.size(); }
    std::size_t rows() const { return s_->shape.at(0); }
    std::size_t cols() const { return s_->shape.at(1); }

    std::vector<T>& values() { return s_->values; }
    const std::vector<T>& values() const { return s_->values; }
    T* data() { return s_->values.data(); }
    const T* data() const { return s_->values.data(); }

    T item() const {
        if (numel() != 1)
            throw ShapeError("item() on non-scalar tensor of shape " + shape_str(shape()));
        return s_->values[0];
    }

    bool requires_grad() const { return s_ && s_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        s_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return s_ && !s_->grad.empty(); }
    std::vector<T>& ensure_grad() {
        if (s_->grad.empty()) s_->grad.assign(s_->values.size(), T(0));
        return s_->grad;
    }
    std::vector<T>& grad() { return s_->grad; }
    const std::vector<T>& grad() const { return s_->grad; }
    void zero_grad() {
        if (s_) s_->grad.clear();
    }

    std::uint64_t id() const { return s_->id; }

    Tensor clone() const {
        Tensor t;
        t.s_ = std::make_shared<TensorStorage<T>>();
        t.s_->shape = s_->shape;
        t.s_->values = s_->values;
        t.s_->requires_grad = s_->requires_grad;
        return t;
    }

private:
    std::shared_ptr<TensorStorage<T>> s_;
};

// Linear tape of recorded operations. Forward order is topological by
// construction; backward replays the records in reverse, exactly once.
template <typename T>
class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return recording_; }
    std::size_t size() const { return steps_.size(); }

    // Appends one backward rule together with the ids of the nodes it reads.
    // This is the public hook custom-gradient (surrogate) operations use.
    void record(std::vector<std::uint64_t> parent_ids, std::function<void()> backward_step) {
        parents_.push_back(std::move(parent_ids));
        steps_.push_back(std::move(backward_step));
    }

    void backward(Tensor<T> root) {
        if (!root.defined() || root.numel() != 1)
            throw AutodiffError("backward requires a scalar root");
        if (ran_backward_)
            throw AutodiffError("backward already ran on this graph");
        ran_backward_ = true;
        root.ensure_grad()[0] = T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

    bool ran_backward() const { return ran_backward_; }

private:
    std::vector<std::function<void()>> steps_;
    std::vector<std::vector<std::uint64_t>> parents_;
    bool recording_ = true;
    bool ran_backward_ = false;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> ts) {
    for (const auto* t : ts)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

} // namespace detail

} // namespace moelab
