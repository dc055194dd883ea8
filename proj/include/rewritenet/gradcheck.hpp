#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "rewritenet/tensor.hpp"

namespace rewritenet {

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences. Returns max |analytic - numeric| / max(1, |numeric|)
/// over every entry of every parameter. `loss_fn` must be deterministic.
inline double finite_diff_check(const std::function<Tensor()>& loss_fn,
                                std::vector<Tensor> params, double h = 1e-6) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: step h must be > 0");
  for (auto& p : params) p.zero_grad();
  backward(loss_fn());

  double worst = 0.0;
  for (auto& p : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss_fn().item();
      values[i] = saved - h;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
    }
  }
  return worst;
}

}  // namespace rewritenet
