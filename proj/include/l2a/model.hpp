#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "l2a/errors.hpp"
#include "l2a/frame.hpp"
#include "l2a/ops.hpp"
#include "l2a/optim.hpp"

namespace l2a {

struct NetConfig {
  std::int64_t height = 64;
  std::int64_t width = 128;
  std::int64_t base_channels = 16;
  // Largest disparity searched, in full-resolution pixels. Correlation runs at
  // quarter resolution over max_disp / 4 displacements.
  std::int64_t max_disp = 16;
  double disparity_scale = 4.0;
  // Initial sigmoid bias of the confidence head; 2.0 gives W around 0.88.
  double confidence_bias = 2.0;

  std::int64_t corr_range() const { return std::max<std::int64_t>(1, max_disp / 4); }

  void validate() const {
    if (height <= 0 || width <= 0 || height % 4 != 0 || width % 4 != 0) {
      throw ConfigError("NetConfig: height and width must be positive multiples of 4, got " +
                        std::to_string(height) + "x" + std::to_string(width));
    }
    if (base_channels < 2 || base_channels % 2 != 0) {
      throw ConfigError("NetConfig: base_channels must be an even number >= 2");
    }
    if (max_disp < 0) throw ConfigError("NetConfig: max_disp must be >= 0");
    if (!(disparity_scale > 0.0) || !std::isfinite(disparity_scale)) {
      throw ConfigError("NetConfig: disparity_scale must be positive");
    }
  }
};

/// θ: the disparity network's weights together with the config that shapes them.
struct DisparityParams {
  NetConfig config;
  ParamSet theta;
};

/// η plus the batch-norm running statistics (buffers, never differentiated).
struct ConfidenceParams {
  ParamSet eta;
  ParamSet buffers;
};

namespace detail {

inline Tensor he_normal(std::mt19937_64& rng, const Shape& shape) {
  const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
  const double stddev = std::sqrt(2.0 / ((1.0 + 0.2 * 0.2) * fan_in));
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor(shape, std::move(v));
}

inline void add_conv(ParamSet& p, std::mt19937_64& rng, const std::string& name, std::int64_t out,
                     std::int64_t in, std::int64_t k, bool bias = true) {
  p.add(name + ".w", he_normal(rng, {out, in, k, k}));
  if (bias) p.add(name + ".b", Tensor::zeros({out}));
}

inline Tensor conv_bias(const Tensor& x, const ParamSet& p, const std::string& name,
                        std::int64_t stride, std::int64_t pad) {
  auto y = conv2d(x, p.at(name + ".w"), stride, pad);
  return add(y, broadcast_channels(p.at(name + ".b"), y.shape()));
}

}  // namespace detail

inline DisparityParams init_disparity_net(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const auto c = config.base_channels;
  const auto planes = config.corr_range() + 1;
  ParamSet p;
  detail::add_conv(p, rng, "enc1", c, 3, 3);
  detail::add_conv(p, rng, "enc2", 2 * c, c, 3);
  detail::add_conv(p, rng, "post1", 2 * c, planes + 2 * c, 3);
  detail::add_conv(p, rng, "post2", 2 * c, 2 * c, 3);
  detail::add_conv(p, rng, "post3", 2 * c, 2 * c, 3);
  detail::add_conv(p, rng, "dec1", c, 2 * c + c, 3);
  detail::add_conv(p, rng, "dec2", c / 2, c + 3, 3);
  detail::add_conv(p, rng, "head", 1, c / 2, 1);
  return {config, std::move(p)};
}

/// Disparity for a batch of NCHW image pairs, using `theta` in place of the
/// stored weights (adapted copies share the config).
inline Tensor forward_disparity(const NetConfig& cfg, const ParamSet& theta, const Tensor& left,
                                const Tensor& right) {
  const Shape expect{left.rank() == 4 ? left.dim(0) : 1, 3, cfg.height, cfg.width};
  if (left.shape() != expect || right.shape() != expect) {
    throw ShapeError("forward_disparity: expected images " + to_string(expect) + ", got " +
                     to_string(left.shape()) + " and " + to_string(right.shape()));
  }
  auto encode = [&](const Tensor& img) {
    auto f1 = leaky_relu(detail::conv_bias(img, theta, "enc1", 2, 1));
    auto f2 = leaky_relu(detail::conv_bias(f1, theta, "enc2", 2, 1));
    return std::pair{f1, f2};
  };
  auto [l1, l2] = encode(left);
  auto [r1, r2] = encode(right);
  (void)r1;
  auto corr = correlate1d(l2, r2, cfg.corr_range());
  auto h = leaky_relu(detail::conv_bias(concat_channels(corr, l2), theta, "post1", 1, 1));
  h = leaky_relu(detail::conv_bias(h, theta, "post2", 1, 1));
  h = leaky_relu(detail::conv_bias(h, theta, "post3", 1, 1));
  h = concat_channels(bilinear_upsample(h, 2), l1);
  h = leaky_relu(detail::conv_bias(h, theta, "dec1", 1, 1));
  h = concat_channels(bilinear_upsample(h, 2), left);
  h = leaky_relu(detail::conv_bias(h, theta, "dec2", 1, 1));
  auto raw = detail::conv_bias(h, theta, "head", 1, 0);
  return mul_scalar(softplus(raw), cfg.disparity_scale);
}

inline Tensor forward_disparity(const DisparityParams& params, const StereoFrame& frame) {
  frame.validate();
  return forward_disparity(params.config, params.theta, batched(frame.left), batched(frame.right));
}

// ---------------------------------------------------------------------------
// Confidence network F(η, ε).

inline constexpr std::int64_t kConfidenceChannels = 8;
inline constexpr double kRunningStatMomentum = 0.9;

inline ConfidenceParams init_confidence_net(std::uint64_t seed, double head_bias = 2.0) {
  std::mt19937_64 rng(seed);
  const auto k = kConfidenceChannels;
  ConfidenceParams c;
  detail::add_conv(c.eta, rng, "conf1", k, 1, 3, false);
  c.eta.add("bn1.gamma", Tensor::full({k}, 1.0));
  c.eta.add("bn1.beta", Tensor::zeros({k}));
  detail::add_conv(c.eta, rng, "conf2", k, k, 3, false);
  c.eta.add("bn2.gamma", Tensor::full({k}, 1.0));
  c.eta.add("bn2.beta", Tensor::zeros({k}));
  detail::add_conv(c.eta, rng, "conf3", 1, k, 3, false);
  c.eta.add("conf3.b", Tensor::full({1}, head_bias));
  for (const char* bn : {"bn1", "bn2"}) {
    c.buffers.add(std::string(bn) + ".running_mean", Tensor::zeros({k}));
    c.buffers.add(std::string(bn) + ".running_var", Tensor::full({k}, 1.0));
  }
  return c;
}

enum class BatchNormMode { batch_statistics, running_statistics };

struct ConfidenceOutput {
  Tensor raw;       // N1HW in (0,1)
  ParamSet buffers;  // running stats after this pass (unchanged in running mode)
};

inline ConfidenceOutput forward_confidence(const ParamSet& eta, const ParamSet& buffers,
                                           const Tensor& error_map, BatchNormMode mode) {
  if (error_map.rank() != 4 || error_map.dim(1) != 1) {
    throw ShapeError("forward_confidence: error map must be N1HW, got " + to_string(error_map.shape()));
  }
  for (double v : error_map.values()) {
    if (!(v >= 0.0)) throw ContractError("forward_confidence: error map has negative or NaN values");
  }
  const auto h = error_map.dim(2), w = error_map.dim(3);
  std::vector<Tensor> next_buffers(buffers.tensors());

  auto norm = [&](const Tensor& x, int idx) {
    const std::string bn = "bn" + std::to_string(idx);
    const auto& gamma = eta.at(bn + ".gamma");
    const auto& beta = eta.at(bn + ".beta");
    const auto& rm = buffers.at(bn + ".running_mean");
    const auto& rv = buffers.at(bn + ".running_var");
    if (mode == BatchNormMode::running_statistics) {
      return batch_norm_eval(x, gamma, beta, rm.values(), rv.values());
    }
    auto r = batch_norm_train(x, gamma, beta);
    std::vector<double> m(rm.values().begin(), rm.values().end());
    std::vector<double> v(rv.values().begin(), rv.values().end());
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i] = kRunningStatMomentum * m[i] + (1.0 - kRunningStatMomentum) * r.batch_mean[i];
      v[i] = kRunningStatMomentum * v[i] + (1.0 - kRunningStatMomentum) * r.batch_var[i];
    }
    next_buffers[buffers.index_of(bn + ".running_mean")] = Tensor(rm.shape(), std::move(m));
    next_buffers[buffers.index_of(bn + ".running_var")] = Tensor(rv.shape(), std::move(v));
    return r.out;
  };

  auto x = avg_pool2x2(avg_pool2x2(error_map));
  x = leaky_relu(norm(conv2d(x, eta.at("conf1.w"), 1, 1), 1));
  x = leaky_relu(norm(conv2d(x, eta.at("conf2.w"), 1, 1), 2));
  x = conv2d(x, eta.at("conf3.w"), 1, 1);
  x = add(x, broadcast_channels(eta.at("conf3.b"), x.shape()));
  auto raw = resize_bilinear(sigmoid(x), h, w);
  return {raw, buffers.with_tensors(std::move(next_buffers))};
}

inline ConfidenceOutput forward_confidence(const ConfidenceParams& params, const Tensor& error_map,
                                           BatchNormMode mode) {
  return forward_confidence(params.eta, params.buffers, error_map, mode);
}

}  // namespace l2a
