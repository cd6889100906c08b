#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "lengthlab/rng.hpp"

namespace lengthlab::nnet {

/// Compares an analytic gradient with central finite differences at
/// `samples` randomly chosen coordinates of `params`.
///
/// `loss(grad)` must return the loss at the current parameters; when `grad`
/// is non-empty it must also write the analytic gradient into it.
/// Returns max |g_a - g_n| / max(1e-8, |g_a| + |g_n|).
template <class LossFn>
double grad_check(std::span<double> params, LossFn&& loss, std::size_t samples, Rng& rng, double h = 1e-4) {
  std::vector<double> analytic(params.size(), 0.0);
  loss(std::span<double>(analytic));
  double worst = 0.0;
  for (std::size_t s = 0; s < samples && !params.empty(); ++s) {
    const std::size_t i = uniform_index(rng, params.size());
    const double saved = params[i];
    params[i] = saved + h;
    const double up = loss(std::span<double>{});
    params[i] = saved - h;
    const double down = loss(std::span<double>{});
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

/// Adapter for models exposing params(): zeroes the model's gradient buffer,
/// runs `fn(model)` which accumulates gradients and returns the loss.
template <class Model, class Fn>
auto model_loss(Model& model, Fn fn) {
  return [&model, fn](std::span<double> grad) -> double {
    model.params().zero_grad();
    const double l = fn(model);
    if (!grad.empty()) {
      const auto g = model.params().grads();
      std::copy(g.begin(), g.end(), grad.begin());
    }
    return l;
  };
}

}  // namespace lengthlab::nnet
