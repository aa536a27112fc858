#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "l2a/autodiff.hpp"
#include "l2a/eval.hpp"
#include "l2a/losses.hpp"
#include "l2a/model.hpp"
#include "l2a/optim.hpp"

namespace l2a {

enum class AdaptLoss { unsupervised, supervised };

struct AdaptConfig {
  double alpha = 1e-4;
  double momentum = 0.9;
  bool weighted = false;
  AdaptLoss adapt_loss = AdaptLoss::unsupervised;
  // When set, the adaptation gradient also flows through W into ε.
  bool mask_gradient = false;
  BatchNormMode confidence_bn = BatchNormMode::running_statistics;
  LossConfig loss;

  void validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("AdaptConfig: alpha must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("AdaptConfig: momentum must lie in [0,1)");
    loss.validate();
  }
};

struct AdaptState {
  ParamSet params;
  OptimizerState optimizer;
  std::int64_t frame_index = -1;
  std::int64_t steps = 0;
};

inline AdaptState start_adaptation(const ParamSet& base, const AdaptConfig& cfg) {
  cfg.validate();
  AdaptState s;
  s.params = base.detached();
  s.optimizer = OptimizerState::for_params(base, cfg.alpha, cfg.momentum);
  return s;
}

/// Intermediate values of one adaptation step, all computed before the update.
struct StepTrace {
  Tensor disparity;
  double loss = 0.0;
  std::optional<ErrorMap> error;
  std::optional<ConfidenceMask> mask;
};

/// Scalar adaptation loss for a prediction: unweighted L_u, W ⊙ L_u, or L_s.
inline Tensor adaptation_loss(const Tensor& disparity, const StereoFrame& frame, const AdaptConfig& cfg,
                              const ConfidenceParams* confidence, StepTrace* trace = nullptr) {
  if (cfg.adapt_loss == AdaptLoss::supervised) return supervised_loss(disparity, frame);
  auto eps = reprojection_error_map(disparity, frame, cfg.loss);
  Tensor loss;
  if (cfg.weighted) {
    if (!confidence) throw ConfigError("adapt_step: weighted adaptation needs confidence parameters");
    const Tensor input = cfg.mask_gradient ? eps.values : eps.values.detach();
    auto out = forward_confidence(*confidence, input, cfg.confidence_bn);
    auto mask = make_confidence_mask(out.raw);
    loss = weighted_scalar_loss(eps, mask);
    if (trace) trace->mask = mask;
  } else {
    loss = unweighted_scalar_loss(eps);
  }
  if (trace) trace->error = eps;
  return loss;
}

/// One gradient step on one frame; `trace` receives the pre-step prediction.
inline AdaptState adapt_step(const NetConfig& net, AdaptState state, const StereoFrame& frame,
                             const AdaptConfig& cfg, const ConfidenceParams* confidence = nullptr,
                             StepTrace* trace = nullptr) {
  if (cfg.adapt_loss == AdaptLoss::supervised && !frame.has_ground_truth()) {
    throw ContractError("adapt_step: supervised adaptation needs ground truth");
  }
  Tape tape;
  TapeGuard guard(tape);
  std::vector<Tensor> vars;
  for (const auto& t : state.params.tensors()) vars.push_back(tape.watch(t));
  auto current = state.params.with_tensors(vars);
  auto disp = forward_disparity(net, current, batched(frame.left), batched(frame.right));
  StepTrace local;
  StepTrace& tr = trace ? *trace : local;
  auto loss = adaptation_loss(disp, frame, cfg, confidence, &tr);
  if (!std::isfinite(loss.item())) throw NumericFault("adapt_step: adaptation loss is not finite");
  auto grads = grad(loss, vars);
  tr.disparity = disp.detach();
  tr.loss = loss.item();
  state.params = sgd_step(state.params, grads, state.optimizer);
  state.frame_index += 1;
  state.steps += 1;
  return state;
}

inline AdaptState adapt_step(const DisparityParams& net, AdaptState state, const StereoFrame& frame,
                             const AdaptConfig& cfg, const ConfidenceParams* confidence = nullptr) {
  return adapt_step(net.config, std::move(state), frame, cfg, confidence);
}

/// Called after each frame with its index, metrics and the step trace.
using FrameObserver = std::function<void(std::size_t, const MetricsRecord&, const StepTrace&)>;

/// Measure-then-adapt over a sequence, starting from `base` with fresh optimizer state.
inline std::vector<MetricsRecord> run_sequence(const DisparityParams& base,
                                               const ConfidenceParams* confidence,
                                               const Sequence& seq, const AdaptConfig& cfg,
                                               const FrameObserver& observer = {}) {
  if (cfg.weighted && cfg.adapt_loss == AdaptLoss::unsupervised && !confidence) {
    throw ConfigError("run_sequence: weighted adaptation needs confidence parameters");
  }
  auto state = start_adaptation(base.theta, cfg);
  std::vector<MetricsRecord> out;
  out.reserve(seq.size());
  for (std::size_t t = 0; t < seq.size(); ++t) {
    const auto& frame = seq.frames[t];
    if (!frame.has_ground_truth()) {
      throw ContractError("run_sequence: frame " + std::to_string(t) + " of " + seq.id +
                          " has no ground truth");
    }
    StepTrace trace;
    if (cfg.alpha == 0.0) {
      // Frozen model: the update would be a no-op, so skip the backward pass.
      NoGradGuard no_grad;
      trace.disparity = forward_disparity(base.config, state.params, batched(frame.left),
                                          batched(frame.right));
      if (observer) trace.loss = adaptation_loss(trace.disparity, frame, cfg, confidence, &trace).item();
      state.frame_index += 1;
      state.steps += 1;
    } else try {
      state = adapt_step(base.config, std::move(state), frame, cfg, confidence, &trace);
    } catch (const NumericFault& e) {
      throw NumericFault(std::string(e.what()) + " (sequence " + seq.id + ", frame " +
                         std::to_string(t) + ")");
    }
    // The trace holds the prediction made before the update.
    auto rec = frame_metrics(trace.disparity, *frame.gt_disparity, frame.gt_valid);
    rec.sequence = seq.id;
    rec.frame = static_cast<std::int64_t>(t);
    if (observer) observer(t, rec, trace);
    out.push_back(rec);
  }
  return out;
}

}  // namespace l2a
