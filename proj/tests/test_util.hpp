#pragma once

// Shared helpers for the test suites: seeded random tensors and a central
// finite-difference gradient oracle that never touches the tape.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "l2a/autodiff.hpp"
#include "l2a/tensor.hpp"

namespace l2a::testing {

inline Tensor random_tensor(std::mt19937_64& rng, const Shape& shape, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor(shape, std::move(v));
}

/// Values bounded away from zero, so kinks at 0 stay outside the FD stencil.
inline Tensor random_away_from_zero(std::mt19937_64& rng, const Shape& shape, double margin = 0.05) {
  std::uniform_real_distribution<double> mag(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(shape, std::move(v));
}

inline Tensor with_value(const Tensor& t, std::int64_t i, double value) {
  std::vector<double> v(t.values().begin(), t.values().end());
  v[static_cast<std::size_t>(i)] = value;
  return Tensor(t.shape(), std::move(v));
}

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Central finite differences of f with respect to input `which`.
inline std::vector<double> numeric_gradient(const ScalarFn& f, const std::vector<Tensor>& inputs,
                                            std::size_t which, double step = 1e-5) {
  NoGradGuard no_grad;
  const Tensor& x = inputs[which];
  std::vector<double> g(static_cast<std::size_t>(x.numel()));
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    auto plus = inputs;
    auto minus = inputs;
    plus[which] = with_value(x, i, x[i] + step);
    minus[which] = with_value(x, i, x[i] - step);
    g[static_cast<std::size_t>(i)] = (f(plus).item() - f(minus).item()) / (2.0 * step);
  }
  return g;
}

/// Reverse-mode gradient of f with respect to every input.
inline std::vector<Tensor> analytic_gradient(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  TapeGuard guard(tape);
  std::vector<Tensor> vars;
  for (const auto& t : inputs) vars.push_back(tape.watch(t));
  auto out = f(vars);
  return grad(out, vars);
}

/// ||a - b|| / max(||a||, ||b||, floor)
inline double relative_error(std::span<const double> a, std::span<const double> b,
                             double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Worst relative error over all inputs between reverse mode and central FD.
inline double gradient_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                             double step = 1e-5) {
  auto analytic = analytic_gradient(f, inputs);
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto numeric = numeric_gradient(f, inputs, k, step);
    worst = std::max(worst, relative_error(analytic[k].values(), numeric));
  }
  return worst;
}

/// Random weighting so that sum(w * op(x)) exercises every output element.
inline Tensor weighted_sum(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

}  // namespace l2a::testing
