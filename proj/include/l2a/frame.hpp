#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "l2a/errors.hpp"
#include "l2a/tensor.hpp"

namespace l2a {

/// Rectified stereo pair with optional ground truth. Images are 3HW in [0,1],
/// disparity and masks are 1HW (masks hold 0.0 or 1.0).
struct StereoFrame {
  Tensor left;
  Tensor right;
  std::optional<Tensor> gt_disparity;
  Tensor gt_valid;
  // Pixels visible in both views; filled by the renderer, empty otherwise.
  std::optional<Tensor> unoccluded;

  std::int64_t height() const { return left.dim(1); }
  std::int64_t width() const { return left.dim(2); }
  bool has_ground_truth() const { return gt_disparity.has_value(); }

  void validate() const {
    if (left.rank() != 3 || left.dim(0) != 3) {
      throw ShapeError("StereoFrame: left image must be 3xHxW, got " + to_string(left.shape()));
    }
    if (right.shape() != left.shape()) {
      throw ShapeError("StereoFrame: right image " + to_string(right.shape()) +
                       " does not match left " + to_string(left.shape()));
    }
    const Shape mask_shape{1, left.dim(1), left.dim(2)};
    if (gt_disparity && gt_disparity->shape() != mask_shape) {
      throw ShapeError("StereoFrame: disparity must be " + to_string(mask_shape) + ", got " +
                       to_string(gt_disparity->shape()));
    }
    if (gt_disparity && gt_valid.shape() != mask_shape) {
      throw ShapeError("StereoFrame: validity mask must be " + to_string(mask_shape));
    }
  }
};

struct Sequence {
  std::string id;
  std::string domain;
  std::vector<StereoFrame> frames;

  std::size_t size() const { return frames.size(); }
};

/// Adds a leading batch axis: CHW -> 1CHW.
inline Tensor batched(const Tensor& chw) {
  return Tensor({1, chw.dim(0), chw.dim(1), chw.dim(2)},
                std::vector<double>(chw.values().begin(), chw.values().end()));
}

}  // namespace l2a
