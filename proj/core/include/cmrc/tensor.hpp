#pragma once

#include "cmrc/errors.hpp"

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

namespace cmrc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_to_string(const Shape& shape);

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad; // empty until backward first touches it
    bool requires_grad = false;
    std::uint64_t tape_epoch = 0; // which tape the node id belongs to
    int node_id = -1;
};

std::uint64_t next_tape_epoch();

} // namespace detail

/// Dense row-major n-dimensional array. Copies are shallow (shared storage);
/// a tensor is treated as immutable once produced by an op, parameters are
/// updated in place by the optimizer between steps.
template <typename T>
class Tensor {
public:
    Tensor() : s_(std::make_shared<detail::TensorStorage<T>>()) {}

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.s_->values.assign(shape_size(shape), T(0));
        t.s_->shape = std::move(shape);
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t;
        t.s_->values.assign(shape_size(shape), value);
        t.s_->shape = std::move(shape);
        return t;
    }

    static Tensor from_values(Shape shape, std::vector<T> values) {
        if (shape_size(shape) != values.size())
            throw ShapeError("Tensor: shape " + shape_to_string(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        Tensor t;
        t.s_->shape = std::move(shape);
        t.s_->values = std::move(values);
        return t;
    }

    static Tensor scalar(T value) { return from_values({}, {value}); }

    const Shape& shape() const { return s_->shape; }
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t size() const { return s_->values.size(); }
    std::size_t extent(std::size_t axis) const { return s_->shape.at(axis); }

    const std::vector<T>& values() const { return s_->values; }
    std::vector<T>& mutable_values() { return s_->values; }

    T item() const {
        if (size() != 1)
            throw ContractError("Tensor::item: tensor with " + std::to_string(size()) +
                                " elements is not a scalar");
        return s_->values[0];
    }

    bool requires_grad() const { return s_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        s_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !s_->grad.empty(); }

    const std::vector<T>& grad() const {
        if (s_->grad.empty())
            throw ContractError("Tensor::grad: no gradient has been accumulated");
        return s_->grad;
    }

    /// Gradient buffer, allocated as zeros on first use.
    std::vector<T>& grad_buffer() {
        if (s_->grad.empty()) s_->grad.assign(size(), T(0));
        return s_->grad;
    }

    void zero_grad() { s_->grad.clear(); }

    /// Same values (copied), detached from any gradient flow.
    Tensor detached() const {
        Tensor t;
        t.s_->shape = s_->shape;
        t.s_->values = s_->values;
        return t;
    }

    /// Deep copy (values only).
    Tensor clone() const {
        Tensor t = detached();
        t.s_->requires_grad = s_->requires_grad;
        return t;
    }

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }

    void check_finite(const std::string& context) const {
        for (T v : s_->values) {
            if (!std::isfinite(static_cast<double>(v)))
                throw NumericError("non-finite value detected in " + context);
        }
    }

    std::shared_ptr<detail::TensorStorage<T>> storage() const { return s_; }

private:
    std::shared_ptr<detail::TensorStorage<T>> s_;
};

/// Ordered record of primitive applications. Ops push one record each; the
/// backward pass replays them exactly once in reverse order. Records hold
/// shared handles to their operands, so intermediate values stay alive for
/// the lifetime of the tape.
template <typename T>
class Tape {
public:
    struct Record {
        const char* op;
        std::vector<int> inputs;
        int output;
        std::function<void()> backward;
    };

    Tape() : epoch_(detail::next_tape_epoch()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape*& current() {
        static thread_local Tape* cur = nullptr;
        return cur;
    }

    /// RAII activation of this tape on the current thread.
    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(current()) { current() = &t; }
        ~Scope() { current() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    int ensure_node(const Tensor<T>& t) {
        auto s = t.storage();
        if (s->tape_epoch != epoch_) {
            s->tape_epoch = epoch_;
            s->node_id = next_node_id_++;
        }
        return s->node_id;
    }

    void record(const char* op, std::initializer_list<Tensor<T>> inputs, Tensor<T>& output,
                std::function<void()> backward) {
        Record r;
        r.op = op;
        for (const auto& in : inputs) r.inputs.push_back(ensure_node(in));
        r.output = ensure_node(output);
        r.backward = std::move(backward);
        records_.push_back(std::move(r));
    }

    /// Reverse sweep from a scalar loss: seeds d(loss)/d(loss) = 1 and visits
    /// every record exactly once, newest first.
    void backward(Tensor<T>& loss) {
        if (loss.size() != 1)
            throw ContractError("Tape::backward: loss must be a scalar, got shape " +
                                shape_to_string(loss.shape()));
        auto s = loss.storage();
        if (s->tape_epoch != epoch_ || s->node_id < 0)
            throw ContractError("Tape::backward: loss was not produced under this tape");
        loss.grad_buffer()[0] = T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
    }

    const std::vector<Record>& records() const { return records_; }
    std::uint64_t epoch() const { return epoch_; }

private:
    std::uint64_t epoch_;
    int next_node_id_ = 0;
    std::vector<Record> records_;
};

namespace detail {

/// True when the active tape should record an op over these inputs.
template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
    if (Tape<T>::current() == nullptr) return false;
    for (const auto* in : inputs)
        if (in->requires_grad()) return true;
    return false;
}

template <typename T>
void accumulate(Tensor<T>& t, const std::vector<T>& delta) {
    auto& g = t.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

} // namespace detail

} // namespace cmrc
