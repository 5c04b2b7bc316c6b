#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "relattn/errors.hpp"

namespace relattn {

namespace detail {
inline std::int64_t next_node_id() {
    static thread_local std::int64_t counter = 0;
    return ++counter;
}
}  // namespace detail

struct TensorData {
    std::vector<int> shape;
    std::vector<double> values;
    std::vector<double> grad;  // same length as values when requires_grad
    bool requires_grad = false;
    std::int64_t node_id = 0;

    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

// Dense 64-bit float tensor. Copying a Tensor copies the handle, not the
// storage; ops below share TensorData between the forward result and the
// closures recorded on the tape.
class Tensor {
  public:
    Tensor() : data_(std::make_shared<TensorData>()) { data_->node_id = detail::next_node_id(); }

    explicit Tensor(std::vector<int> shape, bool requires_grad = false)
        : data_(std::make_shared<TensorData>()) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw DimensionError("negative dimension in tensor shape");
            n *= static_cast<std::size_t>(d);
        }
        data_->shape = std::move(shape);
        data_->values.assign(n, 0.0);
        data_->requires_grad = requires_grad;
        data_->node_id = detail::next_node_id();
        if (requires_grad) data_->ensure_grad();
    }

    static Tensor from(std::vector<int> shape, std::vector<double> values,
                       bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        if (values.size() != t.size()) {
            throw DimensionError("value count " + std::to_string(values.size()) +
                                 " does not match shape " + t.shape_str());
        }
        t.data_->values = std::move(values);
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    const std::vector<int>& shape() const { return data_->shape; }
    std::size_t size() const { return data_->values.size(); }
    int ndim() const { return static_cast<int>(data_->shape.size()); }
    int dim(int i) const { return data_->shape[static_cast<std::size_t>(i)]; }

    int rows() const {
        require_2d();
        return data_->shape[0];
    }
    int cols() const {
        require_2d();
        return data_->shape[1];
    }

    double& at(int r, int c) {
        return data_->values[static_cast<std::size_t>(r) * cols() + c];
    }
    double at(int r, int c) const {
        return data_->values[static_cast<std::size_t>(r) * cols() + c];
    }
    double& operator[](std::size_t i) { return data_->values[i]; }
    double operator[](std::size_t i) const { return data_->values[i]; }

    std::vector<double>& values() { return data_->values; }
    const std::vector<double>& values() const { return data_->values; }
    std::vector<double>& grad() { return data_->grad; }
    const std::vector<double>& grad() const { return data_->grad; }

    bool requires_grad() const { return data_->requires_grad; }
    void set_requires_grad(bool rg) {
        data_->requires_grad = rg;
        if (rg) data_->ensure_grad();
    }
    void zero_grad() {
        if (data_->requires_grad) data_->grad.assign(data_->values.size(), 0.0);
    }

    std::int64_t node_id() const { return data_->node_id; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < data_->shape.size(); ++i) {
            if (i) os << "x";
            os << data_->shape[i];
        }
        os << "]";
        return os.str();
    }

    std::shared_ptr<TensorData> data() const { return data_; }

  private:
    void require_2d() const {
        if (data_->shape.size() != 2)
            throw DimensionError("expected 2-d tensor, got shape " + shape_str());
    }

    std::shared_ptr<TensorData> data_;
};

// Records the backward closure of every op executed while the tape is
// active. Closures are appended in execution order, so reverse iteration is
// a valid topological order for reverse-mode accumulation.
class Tape {
  public:
    Tape() : prev_(active_ref()) { active_ref() = this; }
    ~Tape() { active_ref() = prev_; }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ref(); }

    void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

    std::size_t num_ops() const { return ops_.size(); }

    // Runs every recorded closure in reverse and clears the tape.
    void run_backward() {
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
        ops_.clear();
    }

  private:
    static Tape*& active_ref() {
        static thread_local Tape* current = nullptr;
        return current;
    }

    std::vector<std::function<void()>> ops_;
    Tape* prev_;
};

inline bool recording() { return Tape::active() != nullptr; }

inline void backward(const Tensor& loss, Tape& tape) {
    if (loss.size() != 1)
        throw UsageError("backward requires a scalar loss, got shape " + loss.shape_str());
    auto d = loss.data();
    d->ensure_grad();
    d->grad[0] += 1.0;
    tape.run_backward();
}

}  // namespace relattn
