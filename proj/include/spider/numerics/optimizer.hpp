#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "spider/core/error.hpp"
#include "spider/numerics/parameters.hpp"

namespace spider::nn {

struct AdamWHyper {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct MomentBuffers {
  std::vector<T> first;
  std::vector<T> second;
};

template <typename T>
struct OptimizerState {
  AdamWHyper hyper;
  std::uint64_t step = 0;
  std::map<std::string, MomentBuffers<T>> moments;
};

// One decoupled-decay Adam update for a single parameter. `step` is the
// already-incremented step count used for bias correction.
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, MomentBuffers<T>& m,
                  const AdamWHyper& h, std::uint64_t step, const std::string& name = "param") {
  if (grad.size() != param.size()) {
    throw ShapeError("adamw: gradient size mismatch for " + name);
  }
  if (m.first.empty()) {
    m.first.assign(param.size(), T(0));
    m.second.assign(param.size(), T(0));
  }
  if (m.first.size() != param.size() || m.second.size() != param.size()) {
    throw ShapeError("adamw: moment size mismatch for " + name);
  }
  for (T g : grad) {
    if (!std::isfinite(g)) throw NumericError("adamw: non-finite gradient in " + name);
  }
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  const T lr = static_cast<T>(h.lr);
  const T decay = static_cast<T>(h.lr * h.weight_decay);
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  for (std::size_t i = 0; i < param.size(); ++i) {
    param[i] -= decay * param[i];
    m.first[i] = b1 * m.first[i] + (T(1) - b1) * grad[i];
    m.second[i] = b2 * m.second[i] + (T(1) - b2) * grad[i] * grad[i];
    const T mhat = m.first[i] / static_cast<T>(bc1);
    const T vhat = m.second[i] / static_cast<T>(bc2);
    param[i] -= lr * mhat / (std::sqrt(vhat) + static_cast<T>(h.eps));
  }
}

// Applies one step to every parameter in the store. Parameters that received
// no gradient this step are treated as having a zero gradient.
template <typename T>
void adamw_step(ParameterStore<T>& params, OptimizerState<T>& state) {
  ++state.step;
  std::vector<T> zeros;
  for (auto& [name, p] : params) {
    std::span<const T> g = p.grad();
    if (!p.has_grad()) {
      zeros.assign(p.size(), T(0));
      g = zeros;
    }
    adamw_update<T>(p.mutable_data(), g, state.moments[name], state.hyper, state.step, name);
  }
}

}  // namespace spider::nn
