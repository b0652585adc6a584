#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "wfe/errors.hpp"
#include "wfe/tensor.hpp"

namespace wfe {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Relative error with a floor on the denominator so coordinates whose true
/// gradient is ~0 are judged on absolute error instead of noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients of `loss` against central differences
/// (f(x+h) - f(x-h)) / 2h for every coordinate of every tensor in `params`.
///
/// `loss` must rebuild its graph from the current parameter values on each
/// call. Parameters are restored exactly after each perturbation.
inline GradCheckReport grad_check(const std::function<Tensor()>& loss, std::vector<Tensor> params,
                                  double h = 1e-5) {
  if (h < 1e-6 || h > 1e-4) throw ConfigError("grad_check: step must lie in [1e-6, 1e-4]");

  for (auto& p : params) p.zero_grad();
  const Tensor root = loss();
  if (!std::isfinite(root.item())) {
    throw NumericError("grad_check: loss is not finite at the base point (" +
                       std::to_string(root.item()) + ")");
  }
  root.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    auto g = p.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  const auto eval = [&](std::size_t t, std::size_t i) {
    const double v = loss().item();
    if (!std::isfinite(v)) {
      throw NumericError("grad_check: loss is not finite while perturbing tensor " +
                         std::to_string(t) + " coordinate " + std::to_string(i));
    }
    return v;
  };

  GradCheckReport report;
  NoGradGuard no_grad;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto data = params[t].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = eval(t, i);
      data[i] = saved - h;
      const double down = eval(t, i);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(analytic[t][i], numeric);
      ++report.coordinates;
      if (err > report.max_relative_error || report.coordinates == 1) {
        report.max_relative_error = err;
        report.worst_tensor = t;
        report.worst_index = i;
        report.analytic = analytic[t][i];
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace wfe
