#pragma once

#include <cstdint>

#include "l2a/errors.hpp"
#include "l2a/frame.hpp"
#include "l2a/ops.hpp"

namespace l2a {

struct LossConfig {
  double ssim_weight = 0.85;
  std::int64_t ssim_window = 3;

  double l1_weight() const { return 1.0 - ssim_weight; }

  void validate() const {
    if (!(ssim_weight >= 0.0 && ssim_weight <= 1.0)) {
      throw ConfigError("LossConfig: ssim_weight must lie in [0,1]");
    }
    if (ssim_window < 1 || ssim_window % 2 == 0) {
      throw ConfigError("LossConfig: ssim_window must be an odd positive integer");
    }
  }
};

/// Per-pixel loss ε (N1HW, >= 0) and its validity mask (N1HW of 0/1).
struct ErrorMap {
  Tensor values;
  Tensor valid;

  double valid_count() const {
    double n = 0.0;
    for (double v : valid.values()) n += v;
    return n;
  }
};

/// W: raw values in (0,1) and the same values divided by the element count.
struct ConfidenceMask {
  Tensor raw;
  Tensor normalized;
};

inline ConfidenceMask make_confidence_mask(const Tensor& raw) {
  return {raw, mul_scalar(raw, 1.0 / static_cast<double>(raw.numel()))};
}

namespace detail {

// Box mean over a window, zero padded, applied per channel.
inline Tensor box_mean(const Tensor& x, std::int64_t window) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const double inv = 1.0 / static_cast<double>(window * window);
  auto kernel = Tensor::full({1, 1, window, window}, inv);
  auto flat = reshape(x, {n * c, 1, h, w});
  return reshape(conv2d(flat, kernel, 1, window / 2), {n, c, h, w});
}

// Per-pixel (1 - SSIM)/2 clamped to [0,1], per channel.
inline Tensor ssim_dissimilarity(const Tensor& x, const Tensor& y, std::int64_t window) {
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  auto mu_x = box_mean(x, window);
  auto mu_y = box_mean(y, window);
  auto mu_xx = mul(mu_x, mu_x);
  auto mu_yy = mul(mu_y, mu_y);
  auto mu_xy = mul(mu_x, mu_y);
  auto sigma_x = sub(box_mean(mul(x, x), window), mu_xx);
  auto sigma_y = sub(box_mean(mul(y, y), window), mu_yy);
  auto sigma_xy = sub(box_mean(mul(x, y), window), mu_xy);
  auto num = mul(add_scalar(mul_scalar(mu_xy, 2.0), c1), add_scalar(mul_scalar(sigma_xy, 2.0), c2));
  auto den = mul(add_scalar(add(mu_xx, mu_yy), c1), add_scalar(add(sigma_x, sigma_y), c2));
  auto ssim = div(num, den);
  return clamp(mul_scalar(add_scalar(neg(ssim), 1.0), 0.5), 0.0, 1.0);
}

inline Tensor valid_mean(const Tensor& values, const Tensor& valid, std::string_view op) {
  double count = 0.0;
  for (double v : valid.values()) count += v;
  if (count <= 0.0) throw ContractError(std::string(op) + ": no valid pixels");
  return mul_scalar(sum(mul(values, valid)), 1.0 / count);
}

}  // namespace detail

/// ε = w_s (1 - SSIM(L, R~))/2 + (1 - w_s) |L - R~|, averaged over colour
/// channels, with R~ the right image warped by `disparity`.
inline ErrorMap reprojection_error_map(const Tensor& disparity, const Tensor& left,
                                       const Tensor& right, const LossConfig& cfg) {
  cfg.validate();
  if (disparity.rank() != 4 || disparity.dim(1) != 1 || left.rank() != 4 ||
      disparity.dim(0) != left.dim(0) || disparity.dim(2) != left.dim(2) ||
      disparity.dim(3) != left.dim(3)) {
    throw ShapeError("reprojection_error_map: disparity " + to_string(disparity.shape()) +
                     " does not match images " + to_string(left.shape()));
  }
  detail::require_same_shape("reprojection_error_map", left, right);
  auto warped = warp_horizontal(right, disparity);
  const double inv_c = 1.0 / static_cast<double>(left.dim(1));
  Tensor per_pixel;
  if (cfg.l1_weight() > 0.0) {
    auto l1 = mul_scalar(sum_channels(abs(sub(left, warped.image))), inv_c * cfg.l1_weight());
    per_pixel = l1;
  }
  if (cfg.ssim_weight > 0.0) {
    auto d = detail::ssim_dissimilarity(left, warped.image, cfg.ssim_window);
    auto s = mul_scalar(sum_channels(d), inv_c * cfg.ssim_weight);
    per_pixel = per_pixel.defined() ? add(s, per_pixel) : s;
  }
  return {mul(per_pixel, warped.valid), warped.valid};
}

inline ErrorMap reprojection_error_map(const Tensor& disparity, const StereoFrame& frame,
                                       const LossConfig& cfg) {
  frame.validate();
  return reprojection_error_map(disparity, batched(frame.left), batched(frame.right), cfg);
}

/// Mean of |d - gt| over valid pixels.
inline Tensor supervised_loss(const Tensor& disparity, const Tensor& gt, const Tensor& valid) {
  detail::require_same_shape("supervised_loss", disparity, gt);
  detail::require_same_shape("supervised_loss", disparity, valid);
  return detail::valid_mean(abs(sub(disparity, gt)), valid, "supervised_loss");
}

/// Supervised loss against a frame's ground truth (disparity is N1HW, N = 1).
inline Tensor supervised_loss(const Tensor& disparity, const StereoFrame& frame) {
  if (!frame.has_ground_truth()) throw ContractError("supervised_loss: frame has no ground truth");
  return supervised_loss(disparity, batched(*frame.gt_disparity), batched(frame.gt_valid));
}

/// Mean of ε over valid pixels.
inline Tensor unweighted_scalar_loss(const ErrorMap& eps) {
  return detail::valid_mean(eps.values, eps.valid, "unweighted_scalar_loss");
}

/// Confidence-weighted mean Σ_valid W ε / N_valid. Equals Σ normalized(W) ε
/// whenever every pixel is valid; with invalid pixels the same normalisation
/// as the unweighted loss is used, so W ≡ 1 reproduces it exactly.
inline Tensor weighted_scalar_loss(const ErrorMap& eps, const ConfidenceMask& mask) {
  detail::require_same_shape("weighted_scalar_loss", eps.values, mask.raw);
  return detail::valid_mean(mul(mask.raw, eps.values), eps.valid, "weighted_scalar_loss");
}

}  // namespace l2a
