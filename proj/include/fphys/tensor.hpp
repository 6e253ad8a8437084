#pragma once

#include <functional>
#include <initializer_list>
#include <span>
#include <utility>

#include "fphys/common.hpp"

namespace fphys {

template <class T>
struct Storage {
    Shape shape;
    AlignedVec<T> data;
    bool requires_grad = false;
    AlignedVec<T> grad;       // allocated lazily during backward
    std::int64_t node = -1;   // index on the recording tape, -1 = leaf or detached
};

template <class T>
class Tape;

namespace detail {
inline thread_local int nograd_depth = 0;
}

/// RAII guard that suspends gradient recording (for all scalar types).
struct NoGradGuard {
    NoGradGuard() { ++detail::nograd_depth; }
    ~NoGradGuard() { --detail::nograd_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::nograd_depth == 0; }

/// Dense row-major tensor handle. Copying is shallow (shared storage);
/// data is immutable after construction except for gradient accumulation.
template <class T>
class Tensor {
public:
    Tensor() = default;

    /// Uninitialized storage; for op internals that overwrite every element.
    static Tensor empty(Shape shape) {
        Tensor t;
        t.s_ = std::make_shared<Storage<T>>();
        t.s_->shape = std::move(shape);
        t.s_->data.resize(static_cast<std::size_t>(fphys::numel(t.s_->shape)));
        return t;
    }

    static Tensor zeros(Shape shape) {
        Tensor t = empty(std::move(shape));
        std::fill(t.s_->data.begin(), t.s_->data.end(), T(0));
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.s_->data.begin(), t.s_->data.end(), value);
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> values) {
        check(static_cast<std::int64_t>(values.size()) == fphys::numel(shape),
              "tensor: data size does not match shape " + shape_str(shape));
        Tensor t = zeros(std::move(shape));
        std::copy(values.begin(), values.end(), t.s_->data.begin());
        return t;
    }

    static Tensor scalar(T value) { return full({1}, value); }

    /// Uniform [lo, hi) fill, deterministic per rng state.
    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.s_->data) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::int64_t dim(std::size_t i) const { return s_->shape[i]; }
    std::size_t rank() const { return s_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(s_->data.size()); }

    T* data() { return s_->data.data(); }
    const T* data() const { return s_->data.data(); }
    std::span<const T> values() const { return {s_->data.data(), s_->data.size()}; }

    T item() const {
        check(numel() == 1, "tensor: item() requires a scalar, got " + shape_str(shape()));
        return s_->data[0];
    }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool v) { s_->requires_grad = v; }

    bool has_grad() const { return !s_->grad.empty(); }
    std::span<const T> grad() const {
        check(has_grad(), "tensor: gradient not populated");
        return {s_->grad.data(), s_->grad.size()};
    }

    void zero_grad() { s_->grad.clear(); }

    /// Same data, no graph history.
    Tensor detach() const {
        Tensor t = zeros(shape());
        std::copy(s_->data.begin(), s_->data.end(), t.s_->data.begin());
        return t;
    }

    Tensor clone() const {
        Tensor t = detach();
        t.s_->requires_grad = s_->requires_grad;
        return t;
    }

    std::shared_ptr<Storage<T>> storage() const { return s_; }

    static Tensor wrap(std::shared_ptr<Storage<T>> s) {
        Tensor t;
        t.s_ = std::move(s);
        return t;
    }

private:
    std::shared_ptr<Storage<T>> s_;
};

/// Reverse-mode tape. Nodes are appended in execution order, which is a
/// topological order by construction; backward replays them once, in reverse.
template <class T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    struct Node {
        const char* op;
        std::shared_ptr<Storage<T>> out;
        std::function<void()> backward;
    };

    static Tape*& current() {
        static thread_local Tape* cur = nullptr;
        return cur;
    }

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

    std::int64_t record(const char* op, std::shared_ptr<Storage<T>> out,
                        std::function<void()> backward) {
        nodes_.push_back(Node{op, std::move(out), std::move(backward)});
        return static_cast<std::int64_t>(nodes_.size()) - 1;
    }

    /// Accumulates gradients of `loss` into every recorded tensor that
    /// requires-grad. One shot per recording; reset() rearms the tape.
    void backward(const Tensor<T>& loss) {
        check(!consumed_, "tape: backward already called; reset() before reuse");
        check(loss.numel() == 1, "tape: loss must be scalar, got " + shape_str(loss.shape()));
        auto ls = loss.storage();
        check(ls->node >= 0 && ls->node < static_cast<std::int64_t>(nodes_.size()) &&
                  nodes_[static_cast<std::size_t>(ls->node)].out == ls,
              "tape: loss is detached from this tape");
        consumed_ = true;
        ls->grad.assign(1, T(1));
        for (std::int64_t i = ls->node; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.out->grad.empty()) continue;  // not an ancestor of the loss
            n.backward();
        }
    }

private:
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

/// Scope that makes `tape` the recording target for ops on this thread.
template <class T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::current()) {
        Tape<T>::current() = &tape;
    }
    ~TapeScope() { Tape<T>::current() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

namespace detail {

template <class T>
bool tracks_grad(const Tensor<T>& t) {
    return t.defined() && (t.requires_grad() || t.storage()->node >= 0);
}

template <class T>
bool recording_for(std::initializer_list<const Tensor<T>*> inputs) {
    if (!grad_enabled() || Tape<T>::current() == nullptr) return false;
    for (auto* t : inputs)
        if (tracks_grad(*t)) return true;
    return false;
}

template <class T>
AlignedVec<T>& ensure_grad(Storage<T>& s) {
    if (s.grad.empty()) s.grad.assign(s.data.size(), T(0));
    return s.grad;
}

// Branch-free scan: x - x is 0 for finite values, NaN for NaN/Inf.
template <class T>
bool all_finite(const T* p, std::int64_t n) {
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) acc += p[i] - p[i];
    return acc == T(0);
}

// Adds grad to a parent if it participates in differentiation.
template <class T>
T* grad_sink(const std::shared_ptr<Storage<T>>& s) {
    if (!s->requires_grad && s->node < 0) return nullptr;
    return ensure_grad(*s).data();
}

template <class T>
void finish_op(const char* op, Tensor<T>& out,
               std::initializer_list<const Tensor<T>*> inputs,
               std::function<void()> backward) {
    if (!all_finite(out.data(), out.numel()))
        fail(std::string("op '") + op + "': non-finite value in output");
    if (recording_for<T>(inputs)) {
        auto s = out.storage();
        s->requires_grad = true;
        s->node = Tape<T>::current()->record(op, s, std::move(backward));
    }
}

}  // namespace detail

}  // namespace fphys
