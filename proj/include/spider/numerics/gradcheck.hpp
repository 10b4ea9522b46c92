#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "spider/core/error.hpp"
#include "spider/core/random.hpp"
#include "spider/numerics/parameters.hpp"
#include "spider/numerics/tensor.hpp"

namespace spider::nn {

struct GradCheckOptions {
  double eps = 1e-5;        // central-difference step
  double tolerance = 1e-4;  // relative
  // Denominator floor for the relative error, so coordinates whose true
  // gradient is ~0 are judged on absolute error.
  double relative_floor = 1e-5;
  // 0 checks every coordinate; otherwise a seeded sample of this many per
  // parameter (recorded in the report).
  std::size_t max_coords_per_param = 0;
  std::uint64_t sample_seed = 0;
};

struct ParameterCheck {
  std::string name;
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::vector<std::size_t> coordinates;
};

struct GradCheckReport {
  std::vector<ParameterCheck> parameters;
  double tolerance = 0.0;
  double max_relative_error = 0.0;
  bool passed = true;
};

using NamedTensor = std::pair<std::string, Tensor<double>>;

// Compares reverse-mode gradients of `loss_fn` against central finite
// differences (f(x+eps) - f(x-eps)) / (2 eps). `loss_fn` must rebuild its
// graph from the current parameter values on every call.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                                  std::vector<NamedTensor> params,
                                  const GradCheckOptions& options = {}) {
  for (auto& [_, p] : params) p.zero_grad();
  Tensor<double> loss = loss_fn();
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
  loss.backward();

  GradCheckReport report;
  report.tolerance = options.tolerance;
  Rng rng = make_rng(options.sample_seed, {0x6772616463686bULL});
  NoGradGuard no_grad;
  for (auto& [name, p] : params) {
    ParameterCheck check;
    check.name = name;
    std::vector<double> analytic(p.size(), 0.0);
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());

    std::vector<std::size_t> coords(p.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_param > 0 && coords.size() > options.max_coords_per_param) {
      for (std::size_t i = 0; i < options.max_coords_per_param; ++i) {
        const std::size_t j = i + uniform_index(rng, coords.size() - i);
        std::swap(coords[i], coords[j]);
      }
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }

    auto values = p.mutable_data();
    for (std::size_t idx : coords) {
      const double saved = values[idx];
      values[idx] = saved + options.eps;
      const double plus = loss_fn().item();
      values[idx] = saved - options.eps;
      const double minus = loss_fn().item();
      values[idx] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("grad_check: non-finite loss while perturbing " + name);
      }
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double abs_err = std::abs(numeric - analytic[idx]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[idx]), options.relative_floor});
      check.max_absolute_error = std::max(check.max_absolute_error, abs_err);
      check.max_relative_error = std::max(check.max_relative_error, abs_err / denom);
    }
    check.coordinates = std::move(coords);
    report.max_relative_error = std::max(report.max_relative_error, check.max_relative_error);
    report.parameters.push_back(std::move(check));
  }
  report.passed = report.max_relative_error <= options.tolerance;
  return report;
}

inline GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn,
                                  ParameterStore<double>& store,
                                  const GradCheckOptions& options = {}) {
  std::vector<NamedTensor> params;
  for (auto& [name, p] : store) params.emplace_back(name, p);
  return grad_check(loss_fn, std::move(params), options);
}

}  // namespace spider::nn
