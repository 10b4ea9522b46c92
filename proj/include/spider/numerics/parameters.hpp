#pragma once

#include <map>
#include <string>
#include <vector>

#include "spider/core/error.hpp"
#include "spider/core/random.hpp"
#include "spider/numerics/tensor.hpp"

namespace spider::nn {

// Named trainable leaves. Iteration order is the lexicographic name order,
// which fixes the layout of checkpoints and optimizer state.
template <typename T>
class ParameterStore {
 public:
  Tensor<T>& add(const std::string& name, std::size_t rows, std::size_t cols, std::vector<T> values) {
    if (params_.count(name)) throw InvalidArgument("duplicate parameter " + name);
    auto [it, _] = params_.emplace(name, Tensor<T>::from(rows, cols, std::move(values), true));
    return it->second;
  }

  // Normal(0, stddev) initialization seeded by (seed, name): a parameter's
  // initial value does not depend on which other parameters exist.
  Tensor<T>& add_normal(const std::string& name, std::size_t rows, std::size_t cols, double stddev,
                        std::uint64_t seed) {
    Rng rng = make_rng(seed, {hash_string(name)});
    std::vector<T> values(rows * cols);
    for (auto& v : values) v = static_cast<T>(stddev * standard_normal(rng));
    return add(name, rows, cols, std::move(values));
  }

  Tensor<T>& add_constant(const std::string& name, std::size_t rows, std::size_t cols, T value) {
    return add(name, rows, cols, std::vector<T>(rows * cols, value));
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Tensor<T>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw IndexError("unknown parameter " + name);
    return it->second;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw IndexError("unknown parameter " + name);
    return it->second;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  std::size_t count() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  // Value copy (fresh leaves, no shared storage).
  ParameterStore clone() const {
    ParameterStore out;
    for (const auto& [name, p] : params_) {
      out.add(name, p.rows(), p.cols(), std::vector<T>(p.data().begin(), p.data().end()));
    }
    return out;
  }

  // Copies values for every name present in both stores; shapes must agree.
  // Returns the number of parameters copied.
  std::size_t assign_from(const ParameterStore& other) {
    std::size_t copied = 0;
    for (auto& [name, p] : params_) {
      auto it = other.params_.find(name);
      if (it == other.params_.end()) continue;
      if (it->second.rows() != p.rows() || it->second.cols() != p.cols()) {
        throw ShapeError("parameter " + name + " shape mismatch on assignment");
      }
      std::copy(it->second.data().begin(), it->second.data().end(), p.mutable_data().begin());
      ++copied;
    }
    return copied;
  }

 private:
  std::map<std::string, Tensor<T>> params_;
};

}  // namespace spider::nn
