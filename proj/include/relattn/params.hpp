#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "relattn/errors.hpp"
#include "relattn/tensor.hpp"

namespace relattn {

// Ordered collection of named trainable tensors. Insertion order is fixed by
// construction and drives SGD updates, checkpoint layout and gradient checks,
// so every iteration over parameters is deterministic.
class ParamStore {
  public:
    // Returns a handle sharing storage with the stored tensor. Handles stay
    // valid as the store grows.
    Tensor add(const std::string& name, std::vector<int> shape) {
        if (index_.count(name)) throw UsageError("duplicate parameter name: " + name);
        index_[name] = tensors_.size();
        names_.push_back(name);
        tensors_.emplace_back(std::move(shape), /*requires_grad=*/true);
        return tensors_.back();
    }

    Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw UsageError("unknown parameter: " + name);
        return tensors_[it->second];
    }
    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw UsageError("unknown parameter: " + name);
        return tensors_[it->second];
    }
    bool has(const std::string& name) const { return index_.count(name) > 0; }

    std::size_t count() const { return tensors_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    Tensor& tensor(std::size_t i) { return tensors_[i]; }
    const Tensor& tensor(std::size_t i) const { return tensors_[i]; }

    void zero_grads() {
        for (Tensor& t : tensors_) t.zero_grad();
    }

    // deep copy of all values (snapshot for best-model retention)
    std::vector<std::vector<double>> snapshot() const {
        std::vector<std::vector<double>> out;
        out.reserve(tensors_.size());
        for (const Tensor& t : tensors_) out.push_back(t.values());
        return out;
    }

    void restore(const std::vector<std::vector<double>>& snap) {
        if (snap.size() != tensors_.size())
            throw UsageError("parameter snapshot does not match store layout");
        for (std::size_t i = 0; i < snap.size(); ++i) {
            if (snap[i].size() != tensors_[i].size())
                throw UsageError("parameter snapshot size mismatch for " + names_[i]);
            tensors_[i].values() = snap[i];
        }
    }

  private:
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace relattn
