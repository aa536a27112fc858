#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "l2a/adapt.hpp"
#include "l2a/autodiff.hpp"
#include "l2a/losses.hpp"
#include "l2a/model.hpp"
#include "l2a/optim.hpp"
#include "l2a/synthdata.hpp"

namespace l2a {

struct MetaConfig {
  double alpha = 1e-5;
  double beta = 1e-4;
  int k = 3;
  int b = 4;
  bool weighted = false;
  bool first_order = false;
  int iterations = 0;
  double outer_momentum = 0.0;
  bool mask_gradient = false;
  // Inner-loop loss; supervised gives the L_u = L_s ablation.
  AdaptLoss inner_loss = AdaptLoss::unsupervised;
  LossConfig loss;

  void validate() const {
    if (weighted && inner_loss == AdaptLoss::supervised) {
      throw ConfigError("MetaConfig: confidence weighting applies to the unsupervised inner loss only");
    }
    if (k < 1) throw ConfigError("MetaConfig: k must be >= 1");
    if (b < 1) throw ConfigError("MetaConfig: b must be >= 1");
    if (!(alpha > 0.0)) throw ConfigError("MetaConfig: alpha must be > 0");
    if (!(beta >= 0.0)) throw ConfigError("MetaConfig: beta must be >= 0");
    if (iterations < 0) throw ConfigError("MetaConfig: iterations must be >= 0");
    if (!(outer_momentum >= 0.0 && outer_momentum < 1.0)) {
      throw ConfigError("MetaConfig: outer_momentum must lie in [0,1)");
    }
    loss.validate();
  }
};

struct MetaBatchSample {
  std::size_t sequence = 0;
  int start = 0;
};

// ---------------------------------------------------------------------------
// Differentiable unroll, independent of the network: k inner SGD steps on
// `inner_loss`, each followed by `outer_loss` on the adapted parameters.

/// Inner loss at step j given current θ and the (fixed) η.
using InnerLoss = std::function<Tensor(const std::vector<Tensor>& theta,
                                       const std::vector<Tensor>& eta, int step)>;
/// Outer loss after inner step j.
using OuterLoss = std::function<Tensor(const std::vector<Tensor>& theta, int step)>;

struct UnrollResult {
  double objective = 0.0;
  std::vector<Tensor> grad_theta;
  std::vector<Tensor> grad_eta;
};

inline UnrollResult unrolled_gradient(const std::vector<Tensor>& theta, const std::vector<Tensor>& eta,
                                      int k, double alpha, bool first_order, const InnerLoss& inner,
                                      const OuterLoss& outer, const std::string& where = "") {
  Tape tape;
  TapeGuard guard(tape);
  std::vector<Tensor> th, et;
  for (const auto& t : theta) th.push_back(tape.watch(t));
  for (const auto& t : eta) et.push_back(tape.watch(t));

  auto cur = th;
  Tensor total = Tensor::scalar(0.0);
  for (int j = 0; j < k; ++j) {
    auto lu = inner(cur, et, j);
    auto g = grad(lu, cur, /*create_graph=*/!first_order);
    for (const auto& gi : g) {
      if (!detail::all_finite(gi.values())) {
        throw NumericFault("meta: non-finite gradient in inner pass" + where + ", step " + std::to_string(j));
      }
    }
    cur = sgd_step_recorded(cur, g, alpha);
    total = add(total, outer(cur, j));
  }
  std::vector<Tensor> all = th;
  all.insert(all.end(), et.begin(), et.end());
  auto grads = grad(total, all);
  for (const auto& gi : grads) {
    if (!detail::all_finite(gi.values())) {
      throw NumericFault("meta: non-finite gradient in outer pass" + where);
    }
  }
  UnrollResult r;
  r.objective = total.item();
  r.grad_theta.assign(grads.begin(), grads.begin() + static_cast<std::ptrdiff_t>(th.size()));
  r.grad_eta.assign(grads.begin() + static_cast<std::ptrdiff_t>(th.size()), grads.end());
  return r;
}

struct MetaState {
  DisparityParams theta;
  std::optional<ConfidenceParams> eta;
  OptimizerState theta_opt;
  std::optional<OptimizerState> eta_opt;
};

inline MetaState start_meta(const DisparityParams& theta, const std::optional<ConfidenceParams>& eta,
                            const MetaConfig& cfg) {
  cfg.validate();
  MetaState s{theta, eta, OptimizerState::for_params(theta.theta, cfg.beta, cfg.outer_momentum), {}};
  if (cfg.weighted) {
    if (!eta) throw ConfigError("meta: weighted training needs confidence parameters");
    s.eta_opt = OptimizerState::for_params(eta->eta, cfg.beta, cfg.outer_momentum);
  }
  return s;
}

/// Objective and gradients for one sample; updates `buffers` with batch statistics.
inline UnrollResult meta_sample_gradient(const NetConfig& net, const ParamSet& theta,
                                         const ConfidenceParams* eta, ParamSet* buffers,
                                         const Sequence& seq, int start, const MetaConfig& cfg) {
  InnerLoss inner = [&](const std::vector<Tensor>& th, const std::vector<Tensor>& et, int j) {
    const auto& frame = seq.frames[static_cast<std::size_t>(start + j)];
    auto disp = forward_disparity(net, theta.with_tensors(th), batched(frame.left), batched(frame.right));
    if (cfg.inner_loss == AdaptLoss::supervised) return supervised_loss(disp, frame);
    auto eps = reprojection_error_map(disp, frame, cfg.loss);
    if (!cfg.weighted) return unweighted_scalar_loss(eps);
    const Tensor input = cfg.mask_gradient ? eps.values : eps.values.detach();
    auto out = forward_confidence(eta->eta.with_tensors(et), *buffers, input,
                                  BatchNormMode::batch_statistics);
    *buffers = out.buffers;
    return weighted_scalar_loss(eps, make_confidence_mask(out.raw));
  };
  OuterLoss outer = [&](const std::vector<Tensor>& th, int j) {
    const auto& frame = seq.frames[static_cast<std::size_t>(start + j + 1)];
    auto disp = forward_disparity(net, theta.with_tensors(th), batched(frame.left), batched(frame.right));
    return supervised_loss(disp, frame);
  };
  std::vector<Tensor> et;
  if (cfg.weighted) et = eta->eta.tensors();
  return unrolled_gradient(theta.tensors(), et, cfg.k, cfg.alpha, cfg.first_order, inner, outer,
                           " (sequence " + seq.id + ", start frame " + std::to_string(start) + ")");
}

/// One outer step over a meta-batch. Returns Σ_τ L^τ before the update.
inline double meta_iteration(MetaState& state, const Dataset& data,
                             const std::vector<MetaBatchSample>& batch, const MetaConfig& cfg) {
  const auto& net = state.theta.config;
  std::vector<Tensor> acc_theta, acc_eta;
  double meta_loss = 0.0;
  ParamSet buffers = state.eta ? state.eta->buffers : ParamSet{};
  for (const auto& sample : batch) {
    const auto& seq = data.sequences.at(sample.sequence);
    if (sample.start < 0 || static_cast<std::size_t>(sample.start + cfg.k) >= seq.size()) {
      throw ContractError("meta_iteration: sample needs k+1 frames from start " +
                          std::to_string(sample.start) + " in " + seq.id);
    }
    auto r = meta_sample_gradient(net, state.theta.theta, state.eta ? &*state.eta : nullptr, &buffers,
                                  seq, sample.start, cfg);
    meta_loss += r.objective;
    // Fixed accumulation order: samples in batch order.
    if (acc_theta.empty()) {
      acc_theta = r.grad_theta;
      acc_eta = r.grad_eta;
    } else {
      for (std::size_t i = 0; i < acc_theta.size(); ++i) acc_theta[i] = add(acc_theta[i], r.grad_theta[i]);
      for (std::size_t i = 0; i < acc_eta.size(); ++i) acc_eta[i] = add(acc_eta[i], r.grad_eta[i]);
    }
  }
  state.theta.theta = sgd_step(state.theta.theta, acc_theta, state.theta_opt);
  if (cfg.weighted) {
    state.eta->eta = sgd_step(state.eta->eta, acc_eta, *state.eta_opt);
    state.eta->buffers = buffers;
  }
  return meta_loss;
}

struct TrainLogEntry {
  int iteration = 0;
  double loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainResult {
  DisparityParams theta;
  std::optional<ConfidenceParams> eta;
  std::vector<TrainLogEntry> log;
};

inline void require_supervised(const Dataset& data, std::size_t min_length, const char* who) {
  if (data.sequences.empty()) throw ConfigError(std::string(who) + ": dataset is empty");
  if (!data.supervised) throw ConfigError(std::string(who) + ": dataset has no ground truth");
  for (const auto& s : data.sequences) {
    if (s.size() < min_length) {
      throw ConfigError(std::string(who) + ": sequence " + s.id + " has " + std::to_string(s.size()) +
                        " frames, needs at least " + std::to_string(min_length));
    }
  }
}

/// Uniform sequence, then uniform start with room for k+1 frames.
inline std::vector<MetaBatchSample> sample_meta_batch(const Dataset& data, int b, int k,
                                                      std::mt19937_64& rng) {
  std::vector<MetaBatchSample> batch;
  std::uniform_int_distribution<std::size_t> pick_seq(0, data.sequences.size() - 1);
  for (int i = 0; i < b; ++i) {
    MetaBatchSample s;
    s.sequence = pick_seq(rng);
    const int len = static_cast<int>(data.sequences[s.sequence].size());
    std::uniform_int_distribution<int> pick_start(0, len - k - 1);
    s.start = pick_start(rng);
    batch.push_back(s);
  }
  return batch;
}

using ProgressFn = std::function<void(const TrainLogEntry&)>;

inline TrainResult train_meta(const Dataset& data, const DisparityParams& theta0,
                              const std::optional<ConfidenceParams>& eta0, const MetaConfig& cfg,
                              std::uint64_t seed, const ProgressFn& progress = {}) {
  cfg.validate();
  require_supervised(data, static_cast<std::size_t>(cfg.k + 1), "train_meta");
  auto state = start_meta(theta0, eta0, cfg);
  std::mt19937_64 rng(seed);
  TrainResult out;
  const auto t0 = std::chrono::steady_clock::now();
  for (int it = 0; it < cfg.iterations; ++it) {
    auto batch = sample_meta_batch(data, cfg.b, cfg.k, rng);
    const double loss = meta_iteration(state, data, batch, cfg);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.log.push_back({it, loss, wall});
    if (progress) progress(out.log.back());
  }
  out.theta = state.theta;
  out.eta = state.eta;
  return out;
}

enum class SupervisedOptimizer { sgd, adam };

struct SupervisedConfig {
  int iterations = 0;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  int batch = 1;
  SupervisedOptimizer optimizer = SupervisedOptimizer::sgd;

  void validate() const {
    if (iterations < 0) throw ConfigError("SupervisedConfig: iterations must be >= 0");
    if (batch < 1) throw ConfigError("SupervisedConfig: batch must be >= 1");
  }
};

/// Plain minimisation of L_s over uniformly sampled frames.
inline TrainResult train_supervised(const Dataset& data, const DisparityParams& theta0,
                                    const SupervisedConfig& cfg, std::uint64_t seed,
                                    const ProgressFn& progress = {}) {
  cfg.validate();
  require_supervised(data, 1, "train_supervised");
  auto opt = OptimizerState::for_params(theta0.theta, cfg.learning_rate, cfg.momentum);
  auto adam = AdamState::for_params(theta0.theta, cfg.learning_rate);
  TrainResult out;
  out.theta = theta0;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_seq(0, data.sequences.size() - 1);
  const auto t0 = std::chrono::steady_clock::now();
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<Tensor> acc;
    double loss_sum = 0.0;
    for (int j = 0; j < cfg.batch; ++j) {
      const auto& seq = data.sequences[pick_seq(rng)];
      std::uniform_int_distribution<std::size_t> pick_frame(0, seq.size() - 1);
      const auto& frame = seq.frames[pick_frame(rng)];
      Tape tape;
      TapeGuard guard(tape);
      std::vector<Tensor> vars;
      for (const auto& t : out.theta.theta.tensors()) vars.push_back(tape.watch(t));
      auto disp = forward_disparity(theta0.config, out.theta.theta.with_tensors(vars),
                                    batched(frame.left), batched(frame.right));
      auto loss = mul_scalar(supervised_loss(disp, frame), 1.0 / cfg.batch);
      auto g = grad(loss, vars);
      loss_sum += loss.item();
      if (acc.empty()) {
        acc = g;
      } else {
        NoGradGuard ng;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = add(acc[i], g[i]);
      }
    }
    out.theta.theta = cfg.optimizer == SupervisedOptimizer::adam ? adam_step(out.theta.theta, acc, adam)
                                                                  : sgd_step(out.theta.theta, acc, opt);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.log.push_back({it, loss_sum, wall});
    if (progress) progress(out.log.back());
  }
  return out;
}

}  // namespace l2a
