#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "l2a/errors.hpp"
#include "l2a/ops.hpp"
#include "l2a/tensor.hpp"

namespace l2a {

/// Ordered collection of named parameter tensors.
class ParamSet {
 public:
  ParamSet() = default;

  void add(std::string name, Tensor value) {
    for (const auto& n : names_) {
      if (n == name) throw ContractError("ParamSet: duplicate parameter '" + name + "'");
    }
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(value));
  }

  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const Tensor& operator[](std::size_t i) const { return tensors_.at(i); }

  bool contains(std::string_view name) const { return index_of(name) < names_.size(); }

  const Tensor& at(std::string_view name) const {
    auto i = index_of(name);
    if (i >= names_.size()) throw ContractError("ParamSet: no parameter '" + std::string(name) + "'");
    return tensors_[i];
  }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return i;
    }
    return names_.size();
  }

  /// Same names, new values; shapes must match one to one.
  ParamSet with_tensors(std::vector<Tensor> values) const {
    if (values.size() != tensors_.size()) {
      throw ShapeError("ParamSet: expected " + std::to_string(tensors_.size()) + " tensors, got " +
                       std::to_string(values.size()));
    }
    ParamSet out;
    out.names_ = names_;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i].shape() != tensors_[i].shape()) {
        throw ShapeError("ParamSet: '" + names_[i] + "' expects " + to_string(tensors_[i].shape()) +
                         ", got " + to_string(values[i].shape()));
      }
    }
    out.tensors_ = std::move(values);
    return out;
  }

  /// Copy with every tensor stripped of tape history.
  ParamSet detached() const {
    std::vector<Tensor> v;
    v.reserve(tensors_.size());
    for (const auto& t : tensors_) v.push_back(t.detach());
    return with_tensors(std::move(v));
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  double l2_norm() const {
    double acc = 0.0;
    for (const auto& t : tensors_) {
      for (double v : t.values()) acc += v * v;
    }
    return std::sqrt(acc);
  }

  bool bit_equal(const ParamSet& other) const {
    if (names_ != other.names_) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      const auto& a = tensors_[i];
      const auto& b = other.tensors_[i];
      if (a.shape() != b.shape()) return false;
      if (!std::equal(a.values().begin(), a.values().end(), b.values().begin())) return false;
    }
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

/// Momentum accumulators for one ParamSet.
struct OptimizerState {
  std::vector<std::vector<double>> velocity;
  double momentum = 0.0;
  double learning_rate = 0.0;

  static OptimizerState for_params(const ParamSet& params, double learning_rate, double momentum) {
    if (momentum < 0.0 || momentum >= 1.0) {
      throw ConfigError("optimizer momentum must lie in [0, 1), got " + std::to_string(momentum));
    }
    if (learning_rate < 0.0) throw ConfigError("optimizer learning rate must be >= 0");
    OptimizerState s;
    s.momentum = momentum;
    s.learning_rate = learning_rate;
    for (const auto& t : params.tensors()) {
      s.velocity.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    }
    return s;
  }
};

/// v <- momentum * v + g;  p <- p - learning_rate * v.
inline ParamSet sgd_step(const ParamSet& params, std::span<const Tensor> grads,
                         OptimizerState& state) {
  if (grads.size() != params.size() || state.velocity.size() != params.size()) {
    throw ShapeError("sgd_step: " + std::to_string(params.size()) + " parameters, " +
                     std::to_string(grads.size()) + " gradients, " +
                     std::to_string(state.velocity.size()) + " velocity buffers");
  }
  std::vector<Tensor> next;
  next.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    const auto& g = grads[i];
    auto& v = state.velocity[i];
    if (g.shape() != p.shape() || static_cast<std::int64_t>(v.size()) != p.numel()) {
      throw ShapeError("sgd_step: gradient for '" + params.name(i) + "' has shape " +
                       to_string(g.shape()) + ", parameter " + to_string(p.shape()));
    }
    if (!detail::all_finite(g.values())) {
      throw NumericFault("sgd_step: non-finite gradient for parameter '" + params.name(i) + "'");
    }
    std::vector<double> out(static_cast<std::size_t>(p.numel()));
    for (std::size_t k = 0; k < out.size(); ++k) {
      v[k] = state.momentum * v[k] + g.values()[k];
      out[k] = p.values()[k] - state.learning_rate * v[k];
    }
    next.emplace_back(p.shape(), std::move(out));
  }
  return params.with_tensors(std::move(next));
}

/// Adam moments for one ParamSet.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  double learning_rate = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t t = 0;

  static AdamState for_params(const ParamSet& params, double learning_rate) {
    if (!(learning_rate >= 0.0)) throw ConfigError("Adam learning rate must be >= 0");
    AdamState s;
    s.learning_rate = learning_rate;
    for (const auto& p : params.tensors()) {
      s.m.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
      s.v.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }
    return s;
  }
};

/// Bias-corrected Adam update.
inline ParamSet adam_step(const ParamSet& params, std::span<const Tensor> grads, AdamState& state) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  std::vector<Tensor> next;
  next.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    const auto& g = grads[i];
    if (g.shape() != p.shape()) {
      throw ShapeError("adam_step: gradient for '" + params.name(i) + "' has shape " +
                       to_string(g.shape()) + ", parameter " + to_string(p.shape()));
    }
    if (!detail::all_finite(g.values())) {
      throw NumericFault("adam_step: non-finite gradient for parameter '" + params.name(i) + "'");
    }
    auto& m = state.m[i];
    auto& v = state.v[i];
    std::vector<double> out(static_cast<std::size_t>(p.numel()));
    for (std::size_t k = 0; k < out.size(); ++k) {
      const double gk = g.values()[k];
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      out[k] = p.values()[k] - state.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + state.eps);
    }
    next.emplace_back(p.shape(), std::move(out));
  }
  return params.with_tensors(std::move(next));
}

/// p - lr * g as recorded tensor operations, for steps that must stay differentiable.
inline std::vector<Tensor> sgd_step_recorded(std::span<const Tensor> params,
                                             std::span<const Tensor> grads, double learning_rate) {
  if (params.size() != grads.size()) throw ShapeError("sgd_step_recorded: size mismatch");
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back(sub(params[i], mul_scalar(grads[i], learning_rate)));
  }
  return out;
}

}  // namespace l2a
