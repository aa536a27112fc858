#pragma once

// Differentiable tensor operations.
//
// Every backward function below is expressed with the public operations of
// this header, never with raw loops. Linear and bilinear operations come in
// closed families (conv2d with its two adjoints, correlate1d with its two
// adjoints, the warp family, pooling and resizing with their adjoints) whose
// members differentiate into each other, so gradients of gradients are
// available to any order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "l2a/tensor.hpp"

namespace l2a {

// ---------------------------------------------------------------------------
// Forward declarations (the families reference each other in their backward)

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor sigmoid(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor expand(const Tensor& scalar, const Shape& shape);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor channel_sum(const Tensor& x);
Tensor broadcast_channels(const Tensor& v, const Shape& shape);
Tensor sum_channels(const Tensor& x);
Tensor expand_channels(const Tensor& x, std::int64_t channels);
Tensor slice_channels(const Tensor& x, std::int64_t start, std::int64_t count);
Tensor embed_channels(const Tensor& x, std::int64_t start, std::int64_t total);
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::int64_t stride, std::int64_t padding);
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, std::int64_t in_h,
                         std::int64_t in_w, std::int64_t stride, std::int64_t padding);
Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, std::int64_t k_h,
                          std::int64_t k_w, std::int64_t stride, std::int64_t padding);
Tensor correlate1d(const Tensor& left, const Tensor& right, std::int64_t max_disp);
Tensor correlate1d_grad_left(const Tensor& grad_out, const Tensor& right);
Tensor correlate1d_grad_right(const Tensor& grad_out, const Tensor& left);
Tensor warp_adjoint(const Tensor& grad_out, const Tensor& disparity);
Tensor warp_dx(const Tensor& image, const Tensor& disparity);
Tensor warp_dx_adjoint(const Tensor& grad, const Tensor& disparity);
Tensor avg_pool2x2(const Tensor& x);
Tensor avg_pool2x2_adjoint(const Tensor& g);
Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w);
Tensor resize_bilinear_adjoint(const Tensor& g, std::int64_t in_h, std::int64_t in_w);

inline Tensor ones_like(const Tensor& t) { return Tensor::full(t.shape(), 1.0); }
inline Tensor zeros_like(const Tensor& t) { return Tensor::zeros(t.shape()); }

namespace detail {

inline std::vector<double> buffer(std::int64_t n, double fill = 0.0) {
  return std::vector<double>(static_cast<std::size_t>(n), fill);
}

template <class F>
Tensor map_unary(const Tensor& a, F&& f) {
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  const double* pa = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i]);
  return Tensor(a.shape(), std::move(out));
}

template <class F>
Tensor map_binary(std::string_view op, const Tensor& a, const Tensor& b, F&& f) {
  require_same_shape(op, a, b);
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(pa[i], pb[i]);
  return Tensor(a.shape(), std::move(out));
}

inline bool wants(unsigned need, unsigned i) { return (need >> i) & 1u; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  auto r = detail::map_binary("add", a, b, [](double x, double y) { return x + y; });
  return detail::record("add", std::move(r), {&a, &b},
                        [](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{g, g};
                        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  auto r = detail::map_binary("sub", a, b, [](double x, double y) { return x - y; });
  return detail::record("sub", std::move(r), {&a, &b},
                        [](const Tensor&, const Tensor& g, unsigned need) {
                          std::vector<Tensor> out(2);
                          if (detail::wants(need, 0)) out[0] = g;
                          if (detail::wants(need, 1)) out[1] = neg(g);
                          return out;
                        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  auto r = detail::map_binary("mul", a, b, [](double x, double y) { return x * y; });
  return detail::record("mul", std::move(r), {&a, &b},
                        [a, b](const Tensor&, const Tensor& g, unsigned need) {
                          std::vector<Tensor> out(2);
                          if (detail::wants(need, 0)) out[0] = mul(g, b);
                          if (detail::wants(need, 1)) out[1] = mul(g, a);
                          return out;
                        });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  auto r = detail::map_binary("div", a, b, [](double x, double y) { return x / y; });
  detail::require_finite("div", r);
  return detail::record("div", std::move(r), {&a, &b},
                        [b](const Tensor& out, const Tensor& g, unsigned need) {
                          std::vector<Tensor> res(2);
                          if (detail::wants(need, 0)) res[0] = div(g, b);
                          // d(a/b)/db = -(a/b)/b
                          if (detail::wants(need, 1)) res[1] = neg(div(mul(g, out), b));
                          return res;
                        });
}

inline Tensor neg(const Tensor& a) {
  auto r = detail::map_unary(a, [](double x) { return -x; });
  return detail::record("neg", std::move(r), {&a},
                        [](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{neg(g)};
                        });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  auto r = detail::map_unary(a, [c](double x) { return x + c; });
  return detail::record("add_scalar", std::move(r), {&a},
                        [](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{g};
                        });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  auto r = detail::map_unary(a, [c](double x) { return x * c; });
  return detail::record("mul_scalar", std::move(r), {&a},
                        [c](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{mul_scalar(g, c)};
                        });
}

inline Tensor leaky_relu(const Tensor& x, double slope = 0.2) {
  auto r = detail::map_unary(x, [slope](double v) { return v > 0.0 ? v : slope * v; });
  return detail::record("leaky_relu", std::move(r), {&x},
                        [x, slope](const Tensor&, const Tensor& g, unsigned) {
                          auto d = detail::map_unary(
                              x, [slope](double v) { return v > 0.0 ? 1.0 : slope; });
                          return std::vector<Tensor>{mul(g, d)};
                        });
}

inline Tensor sigmoid(const Tensor& x) {
  auto r = detail::map_unary(x, [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    double e = std::exp(v);
    return e / (1.0 + e);
  });
  return detail::record("sigmoid", std::move(r), {&x},
                        [](const Tensor& out, const Tensor& g, unsigned) {
                          // y (1 - y)
                          auto slope = mul(out, add_scalar(neg(out), 1.0));
                          return std::vector<Tensor>{mul(g, slope)};
                        });
}

inline Tensor softplus(const Tensor& x) {
  auto r = detail::map_unary(x, [](double v) {
    return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  });
  return detail::record("softplus", std::move(r), {&x},
                        [x](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{mul(g, sigmoid(x))};
                        });
}

inline Tensor abs(const Tensor& x) {
  auto r = detail::map_unary(x, [](double v) { return std::fabs(v); });
  return detail::record("abs", std::move(r), {&x},
                        [x](const Tensor&, const Tensor& g, unsigned) {
                          auto s = detail::map_unary(
                              x, [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
                          return std::vector<Tensor>{mul(g, s)};
                        });
}

/// 1 / sqrt(x); requires x > 0.
inline Tensor rsqrt(const Tensor& x) {
  auto r = detail::map_unary(x, [](double v) { return 1.0 / std::sqrt(v); });
  detail::require_finite("rsqrt", r);
  return detail::record("rsqrt", std::move(r), {&x},
                        [](const Tensor& out, const Tensor& g, unsigned) {
                          auto cube = mul(out, mul(out, out));
                          return std::vector<Tensor>{mul(g, mul_scalar(cube, -0.5))};
                        });
}

inline Tensor clamp(const Tensor& x, double lo, double hi) {
  auto r = detail::map_unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); });
  return detail::record("clamp", std::move(r), {&x},
                        [x, lo, hi](const Tensor&, const Tensor& g, unsigned) {
                          auto inside = detail::map_unary(
                              x, [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
                          return std::vector<Tensor>{mul(g, inside)};
                        });
}

inline Tensor square(const Tensor& x) { return mul(x, x); }

// ---------------------------------------------------------------------------
// Reductions and broadcasting

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Shape in_shape = x.shape();
  return detail::record("sum", Tensor::scalar(acc), {&x},
                        [in_shape](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{expand(g, in_shape)};
                        });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Broadcasts a single-element tensor to `shape`.
inline Tensor expand(const Tensor& scalar, const Shape& shape) {
  if (scalar.numel() != 1) {
    throw ShapeError("expand: source must hold one element, got " + to_string(scalar.shape()));
  }
  auto r = Tensor::full(shape, scalar[0]);
  Shape src_shape = scalar.shape();
  return detail::record("expand", std::move(r), {&scalar},
                        [src_shape](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{reshape(sum(g), src_shape)};
                        });
}

inline Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<double> v(x.values().begin(), x.values().end());
  Shape in_shape = x.shape();
  return detail::record("reshape", Tensor(shape, std::move(v)), {&x},
                        [in_shape](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{reshape(g, in_shape)};
                        });
}

/// NCHW -> C, summing over batch and space.
inline Tensor channel_sum(const Tensor& x) {
  detail::require_rank("channel_sum", x, 4);
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto out = detail::buffer(c);
  const double* px = x.data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t k = 0; k < c; ++k) {
      const double* p = px + (i * c + k) * hw;
      double acc = 0.0;
      for (std::int64_t j = 0; j < hw; ++j) acc += p[j];
      out[static_cast<std::size_t>(k)] += acc;
    }
  }
  Shape in_shape = x.shape();
  return detail::record("channel_sum", Tensor({c}, std::move(out)), {&x},
                        [in_shape](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{broadcast_channels(g, in_shape)};
                        });
}

/// C -> NCHW, repeating each channel value over batch and space.
inline Tensor broadcast_channels(const Tensor& v, const Shape& shape) {
  if (shape.size() != 4 || v.rank() != 1 || v.dim(0) != shape[1]) {
    throw ShapeError("broadcast_channels: " + to_string(v.shape()) + " onto " + to_string(shape));
  }
  const auto n = shape[0], c = shape[1], hw = shape[2] * shape[3];
  auto out = detail::buffer(numel(shape));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t k = 0; k < c; ++k) {
      std::fill_n(out.begin() + (i * c + k) * hw, hw, v[k]);
    }
  }
  return detail::record("broadcast_channels", Tensor(shape, std::move(out)), {&v},
                        [](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{channel_sum(g)};
                        });
}

/// NCHW -> N1HW, summing over channels.
inline Tensor sum_channels(const Tensor& x) {
  detail::require_rank("sum_channels", x, 4);
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto out = detail::buffer(n * hw);
  const double* px = x.data();
  for (std::int64_t i = 0; i < n; ++i) {
    double* o = out.data() + i * hw;
    for (std::int64_t k = 0; k < c; ++k) {
      const double* p = px + (i * c + k) * hw;
      for (std::int64_t j = 0; j < hw; ++j) o[j] += p[j];
    }
  }
  return detail::record("sum_channels", Tensor({n, 1, x.dim(2), x.dim(3)}, std::move(out)), {&x},
                        [c](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{expand_channels(g, c)};
                        });
}

/// N1HW -> NCHW, repeating the single channel.
inline Tensor expand_channels(const Tensor& x, std::int64_t channels) {
  detail::require_rank("expand_channels", x, 4);
  if (x.dim(1) != 1) throw ShapeError("expand_channels: input " + to_string(x.shape()));
  const auto n = x.dim(0), hw = x.dim(2) * x.dim(3);
  auto out = detail::buffer(n * channels * hw);
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t k = 0; k < channels; ++k) {
      std::copy_n(x.data() + i * hw, hw, out.begin() + (i * channels + k) * hw);
    }
  }
  return detail::record("expand_channels",
                        Tensor({n, channels, x.dim(2), x.dim(3)}, std::move(out)), {&x},
                        [](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{sum_channels(g)};
                        });
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  detail::require_rank("concat_channels", a, 4);
  detail::require_rank("concat_channels", b, 4);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const auto n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  auto out = detail::buffer(n * (ca + cb) * hw);
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * ca * hw, ca * hw, out.begin() + i * (ca + cb) * hw);
    std::copy_n(b.data() + i * cb * hw, cb * hw, out.begin() + (i * (ca + cb) + ca) * hw);
  }
  return detail::record("concat_channels",
                        Tensor({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out)), {&a, &b},
                        [ca, cb](const Tensor&, const Tensor& g, unsigned need) {
                          std::vector<Tensor> res(2);
                          if (detail::wants(need, 0)) res[0] = slice_channels(g, 0, ca);
                          if (detail::wants(need, 1)) res[1] = slice_channels(g, ca, cb);
                          return res;
                        });
}

inline Tensor slice_channels(const Tensor& x, std::int64_t start, std::int64_t count) {
  detail::require_rank("slice_channels", x, 4);
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (start < 0 || count < 0 || start + count > c) {
    throw ShapeError("slice_channels: range out of bounds for " + to_string(x.shape()));
  }
  auto out = detail::buffer(n * count * hw);
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(x.data() + (i * c + start) * hw, count * hw, out.begin() + i * count * hw);
  }
  return detail::record("slice_channels", Tensor({n, count, x.dim(2), x.dim(3)}, std::move(out)),
                        {&x}, [start, c](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{embed_channels(g, start, c)};
                        });
}

/// Places x's channels at [start, start + C) of a zero tensor with `total` channels.
inline Tensor embed_channels(const Tensor& x, std::int64_t start, std::int64_t total) {
  detail::require_rank("embed_channels", x, 4);
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (start < 0 || start + c > total) throw ShapeError("embed_channels: range out of bounds");
  auto out = detail::buffer(n * total * hw);
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy_n(x.data() + i * c * hw, c * hw, out.begin() + (i * total + start) * hw);
  }
  return detail::record("embed_channels", Tensor({n, total, x.dim(2), x.dim(3)}, std::move(out)),
                        {&x}, [start, c](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{slice_channels(g, start, c)};
                        });
}

// ---------------------------------------------------------------------------
// Convolution family. With T(x, w, y) = <conv2d(x, w), y>, the three members
// are dT/dy, dT/dx and dT/dw; each differentiates into the other two.

namespace detail {

struct ConvDims {
  std::int64_t n, c, h, w, o, kh, kw, oh, ow, stride, pad;
};

inline std::int64_t conv_out_size(std::int64_t in, std::int64_t k, std::int64_t s,
                                  std::int64_t p) {
  return (in + 2 * p - k) / s + 1;
}

/// Output indices [lo, hi) whose input tap `o * s + k - p` lies in [0, in).
inline std::pair<std::int64_t, std::int64_t> tap_range(std::int64_t k, std::int64_t s,
                                                       std::int64_t p, std::int64_t in,
                                                       std::int64_t out) {
  const std::int64_t lo_num = p - k;
  const std::int64_t lo = lo_num <= 0 ? 0 : (lo_num + s - 1) / s;
  const std::int64_t hi_num = in - 1 + p - k;
  if (hi_num < 0) return {0, 0};
  const std::int64_t hi = std::min(hi_num / s + 1, out);
  return {lo, std::max(lo, hi)};
}

inline void conv_forward(const double* x, const double* w, double* y, const ConvDims& d) {
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t o = 0; o < d.o; ++o) {
      double* yp = y + (n * d.o + o) * d.oh * d.ow;
      for (std::int64_t c = 0; c < d.c; ++c) {
        const double* xp = x + (n * d.c + c) * d.h * d.w;
        const double* wp = w + (o * d.c + c) * d.kh * d.kw;
        for (std::int64_t ky = 0; ky < d.kh; ++ky) {
          auto [oy0, oy1] = tap_range(ky, d.stride, d.pad, d.h, d.oh);
          for (std::int64_t kx = 0; kx < d.kw; ++kx) {
            auto [ox0, ox1] = tap_range(kx, d.stride, d.pad, d.w, d.ow);
            const double wv = wp[ky * d.kw + kx];
            for (std::int64_t oy = oy0; oy < oy1; ++oy) {
              const double* xr = xp + (oy * d.stride + ky - d.pad) * d.w + kx - d.pad;
              double* yr = yp + oy * d.ow;
              if (d.stride == 1) {
                for (std::int64_t ox = ox0; ox < ox1; ++ox) yr[ox] += wv * xr[ox];
              } else {
                for (std::int64_t ox = ox0; ox < ox1; ++ox) yr[ox] += wv * xr[ox * d.stride];
              }
            }
          }
        }
      }
    }
  }
}

inline void conv_input_grad(const double* gy, const double* w, double* gx, const ConvDims& d) {
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t o = 0; o < d.o; ++o) {
      const double* gp = gy + (n * d.o + o) * d.oh * d.ow;
      for (std::int64_t c = 0; c < d.c; ++c) {
        double* xp = gx + (n * d.c + c) * d.h * d.w;
        const double* wp = w + (o * d.c + c) * d.kh * d.kw;
        for (std::int64_t ky = 0; ky < d.kh; ++ky) {
          auto [oy0, oy1] = tap_range(ky, d.stride, d.pad, d.h, d.oh);
          for (std::int64_t kx = 0; kx < d.kw; ++kx) {
            auto [ox0, ox1] = tap_range(kx, d.stride, d.pad, d.w, d.ow);
            const double wv = wp[ky * d.kw + kx];
            for (std::int64_t oy = oy0; oy < oy1; ++oy) {
              double* xr = xp + (oy * d.stride + ky - d.pad) * d.w + kx - d.pad;
              const double* gr = gp + oy * d.ow;
              if (d.stride == 1) {
                for (std::int64_t ox = ox0; ox < ox1; ++ox) xr[ox] += wv * gr[ox];
              } else {
                for (std::int64_t ox = ox0; ox < ox1; ++ox) xr[ox * d.stride] += wv * gr[ox];
              }
            }
          }
        }
      }
    }
  }
}

inline void conv_weight_grad(const double* x, const double* gy, double* gw, const ConvDims& d) {
  for (std::int64_t n = 0; n < d.n; ++n) {
    for (std::int64_t o = 0; o < d.o; ++o) {
      const double* gp = gy + (n * d.o + o) * d.oh * d.ow;
      for (std::int64_t c = 0; c < d.c; ++c) {
        const double* xp = x + (n * d.c + c) * d.h * d.w;
        double* wp = gw + (o * d.c + c) * d.kh * d.kw;
        for (std::int64_t ky = 0; ky < d.kh; ++ky) {
          auto [oy0, oy1] = tap_range(ky, d.stride, d.pad, d.h, d.oh);
          for (std::int64_t kx = 0; kx < d.kw; ++kx) {
            auto [ox0, ox1] = tap_range(kx, d.stride, d.pad, d.w, d.ow);
            double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
            for (std::int64_t oy = oy0; oy < oy1; ++oy) {
              const double* xr = xp + (oy * d.stride + ky - d.pad) * d.w + kx - d.pad;
              const double* gr = gp + oy * d.ow;
              std::int64_t ox = ox0;
              if (d.stride == 1) {
                for (; ox + 3 < ox1; ox += 4) {
                  a0 += gr[ox] * xr[ox];
                  a1 += gr[ox + 1] * xr[ox + 1];
                  a2 += gr[ox + 2] * xr[ox + 2];
                  a3 += gr[ox + 3] * xr[ox + 3];
                }
              }
              for (; ox < ox1; ++ox) a0 += gr[ox] * xr[ox * d.stride];
            }
            wp[ky * d.kw + kx] += (a0 + a1) + (a2 + a3);
          }
        }
      }
    }
  }
}

inline void check_conv_args(std::int64_t stride, std::int64_t padding) {
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (padding < 0) throw ContractError("conv2d: padding must be >= 0");
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::int64_t stride,
                     std::int64_t padding) {
  detail::check_conv_args(stride, padding);
  if (input.rank() != 4 || kernel.rank() != 4 || input.dim(1) != kernel.dim(1)) {
    throw ShapeError("conv2d: input " + to_string(input.shape()) + " incompatible with kernel " +
                     to_string(kernel.shape()));
  }
  detail::ConvDims d{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0),
                     kernel.dim(2), kernel.dim(3), 0, 0, stride, padding};
  d.oh = detail::conv_out_size(d.h, d.kh, stride, padding);
  d.ow = detail::conv_out_size(d.w, d.kw, stride, padding);
  if (d.oh < 1 || d.ow < 1) {
    throw ShapeError("conv2d: kernel " + to_string(kernel.shape()) + " larger than padded input " +
                     to_string(input.shape()));
  }
  auto out = detail::buffer(d.n * d.o * d.oh * d.ow);
  detail::conv_forward(input.data(), kernel.data(), out.data(), d);
  return detail::record(
      "conv2d", Tensor({d.n, d.o, d.oh, d.ow}, std::move(out)), {&input, &kernel},
      [input, kernel, d](const Tensor&, const Tensor& g, unsigned need) {
        std::vector<Tensor> res(2);
        if (detail::wants(need, 0)) res[0] = conv2d_input_grad(g, kernel, d.h, d.w, d.stride, d.pad);
        if (detail::wants(need, 1)) res[1] = conv2d_weight_grad(input, g, d.kh, d.kw, d.stride, d.pad);
        return res;
      });
}

/// Adjoint of conv2d with respect to its input (a transposed convolution).
inline Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& kernel, std::int64_t in_h,
                                std::int64_t in_w, std::int64_t stride, std::int64_t padding) {
  detail::check_conv_args(stride, padding);
  if (grad_out.rank() != 4 || kernel.rank() != 4 || grad_out.dim(1) != kernel.dim(0)) {
    throw ShapeError("conv2d_input_grad: gradient " + to_string(grad_out.shape()) +
                     " incompatible with kernel " + to_string(kernel.shape()));
  }
  detail::ConvDims d{grad_out.dim(0), kernel.dim(1), in_h, in_w, kernel.dim(0), kernel.dim(2),
                     kernel.dim(3), grad_out.dim(2), grad_out.dim(3), stride, padding};
  if (detail::conv_out_size(in_h, d.kh, stride, padding) != d.oh ||
      detail::conv_out_size(in_w, d.kw, stride, padding) != d.ow) {
    throw ShapeError("conv2d_input_grad: output size does not match input size");
  }
  auto out = detail::buffer(d.n * d.c * d.h * d.w);
  detail::conv_input_grad(grad_out.data(), kernel.data(), out.data(), d);
  return detail::record(
      "conv2d_input_grad", Tensor({d.n, d.c, d.h, d.w}, std::move(out)), {&grad_out, &kernel},
      [grad_out, kernel, d](const Tensor&, const Tensor& h, unsigned need) {
        std::vector<Tensor> res(2);
        if (detail::wants(need, 0)) res[0] = conv2d(h, kernel, d.stride, d.pad);
        if (detail::wants(need, 1)) res[1] = conv2d_weight_grad(h, grad_out, d.kh, d.kw, d.stride, d.pad);
        return res;
      });
}

/// Adjoint of conv2d with respect to its kernel.
inline Tensor conv2d_weight_grad(const Tensor& input, const Tensor& grad_out, std::int64_t k_h,
                                 std::int64_t k_w, std::int64_t stride, std::int64_t padding) {
  detail::check_conv_args(stride, padding);
  if (input.rank() != 4 || grad_out.rank() != 4 || input.dim(0) != grad_out.dim(0)) {
    throw ShapeError("conv2d_weight_grad: input " + to_string(input.shape()) +
                     " incompatible with gradient " + to_string(grad_out.shape()));
  }
  detail::ConvDims d{input.dim(0), input.dim(1), input.dim(2), input.dim(3), grad_out.dim(1),
                     k_h, k_w, grad_out.dim(2), grad_out.dim(3), stride, padding};
  if (detail::conv_out_size(d.h, k_h, stride, padding) != d.oh ||
      detail::conv_out_size(d.w, k_w, stride, padding) != d.ow) {
    throw ShapeError("conv2d_weight_grad: gradient size does not match input size");
  }
  auto out = detail::buffer(d.o * d.c * k_h * k_w);
  detail::conv_weight_grad(input.data(), grad_out.data(), out.data(), d);
  return detail::record(
      "conv2d_weight_grad", Tensor({d.o, d.c, k_h, k_w}, std::move(out)), {&input, &grad_out},
      [input, grad_out, d](const Tensor&, const Tensor& h, unsigned need) {
        std::vector<Tensor> res(2);
        if (detail::wants(need, 0)) res[0] = conv2d_input_grad(grad_out, h, d.h, d.w, d.stride, d.pad);
        if (detail::wants(need, 1)) res[1] = conv2d(input, h, d.stride, d.pad);
        return res;
      });
}

// ---------------------------------------------------------------------------
// 1D correlation along scanlines. With
//   T(L, R, G) = sum G[n,d,y,x] * L[n,c,y,x] * R[n,c,y,x-d] / C
// correlate1d = dT/dG, correlate1d_grad_left = dT/dL, correlate1d_grad_right = dT/dR.

inline Tensor correlate1d(const Tensor& left, const Tensor& right, std::int64_t max_disp) {
  detail::require_rank("correlate1d", left, 4);
  detail::require_same_shape("correlate1d", left, right);
  if (max_disp < 0) throw ContractError("correlate1d: max_disp must be >= 0");
  const auto n = left.dim(0), c = left.dim(1), h = left.dim(2), w = left.dim(3);
  const auto nd = max_disp + 1;
  const double inv_c = 1.0 / static_cast<double>(c);
  auto out = detail::buffer(n * nd * h * w);
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t d = 0; d < nd && d < w; ++d) {
      double* op = out.data() + (b * nd + d) * h * w;
      for (std::int64_t k = 0; k < c; ++k) {
        const double* lp = left.data() + (b * c + k) * h * w;
        const double* rp = right.data() + (b * c + k) * h * w;
        for (std::int64_t y = 0; y < h; ++y) {
          const double* lr = lp + y * w;
          const double* rr = rp + y * w - d;
          double* orow = op + y * w;
          for (std::int64_t x = d; x < w; ++x) orow[x] += lr[x] * rr[x];
        }
      }
      for (std::int64_t i = 0; i < h * w; ++i) op[i] *= inv_c;
    }
  }
  return detail::record("correlate1d", Tensor({n, nd, h, w}, std::move(out)), {&left, &right},
                        [left, right](const Tensor&, const Tensor& g, unsigned need) {
                          std::vector<Tensor> res(2);
                          if (detail::wants(need, 0)) res[0] = correlate1d_grad_left(g, right);
                          if (detail::wants(need, 1)) res[1] = correlate1d_grad_right(g, left);
                          return res;
                        });
}

inline Tensor correlate1d_grad_left(const Tensor& grad_out, const Tensor& right) {
  detail::require_rank("correlate1d_grad_left", grad_out, 4);
  detail::require_rank("correlate1d_grad_left", right, 4);
  const auto n = right.dim(0), c = right.dim(1), h = right.dim(2), w = right.dim(3);
  const auto nd = grad_out.dim(1);
  if (grad_out.dim(0) != n || grad_out.dim(2) != h || grad_out.dim(3) != w) {
    throw ShapeError("correlate1d_grad_left: " + to_string(grad_out.shape()) + " vs " +
                     to_string(right.shape()));
  }
  const double inv_c = 1.0 / static_cast<double>(c);
  auto out = detail::buffer(right.numel());
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t d = 0; d < nd && d < w; ++d) {
      const double* gp = grad_out.data() + (b * nd + d) * h * w;
      for (std::int64_t k = 0; k < c; ++k) {
        const double* rp = right.data() + (b * c + k) * h * w;
        double* zp = out.data() + (b * c + k) * h * w;
        for (std::int64_t y = 0; y < h; ++y) {
          const double* gr = gp + y * w;
          const double* rr = rp + y * w - d;
          double* zr = zp + y * w;
          for (std::int64_t x = d; x < w; ++x) zr[x] += gr[x] * rr[x] * inv_c;
        }
      }
    }
  }
  return detail::record("correlate1d_grad_left", Tensor(right.shape(), std::move(out)),
                        {&grad_out, &right},
                        [grad_out, right, nd](const Tensor&, const Tensor& hdir, unsigned need) {
                          std::vector<Tensor> res(2);
                          if (detail::wants(need, 0)) res[0] = correlate1d(hdir, right, nd - 1);
                          if (detail::wants(need, 1)) res[1] = correlate1d_grad_right(grad_out, hdir);
                          return res;
                        });
}

inline Tensor correlate1d_grad_right(const Tensor& grad_out, const Tensor& left) {
  detail::require_rank("correlate1d_grad_right", grad_out, 4);
  detail::require_rank("correlate1d_grad_right", left, 4);
  const auto n = left.dim(0), c = left.dim(1), h = left.dim(2), w = left.dim(3);
  const auto nd = grad_out.dim(1);
  if (grad_out.dim(0) != n || grad_out.dim(2) != h || grad_out.dim(3) != w) {
    throw ShapeError("correlate1d_grad_right: " + to_string(grad_out.shape()) + " vs " +
                     to_string(left.shape()));
  }
  const double inv_c = 1.0 / static_cast<double>(c);
  auto out = detail::buffer(left.numel());
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t d = 0; d < nd && d < w; ++d) {
      const double* gp = grad_out.data() + (b * nd + d) * h * w;
      for (std::int64_t k = 0; k < c; ++k) {
        const double* lp = left.data() + (b * c + k) * h * w;
        double* zp = out.data() + (b * c + k) * h * w;
        for (std::int64_t y = 0; y < h; ++y) {
          const double* gr = gp + y * w + d;
          const double* lr = lp + y * w + d;
          double* zr = zp + y * w;
          for (std::int64_t x = 0; x + d < w; ++x) zr[x] += gr[x] * lr[x] * inv_c;
        }
      }
    }
  }
  return detail::record("correlate1d_grad_right", Tensor(left.shape(), std::move(out)),
                        {&grad_out, &left},
                        [grad_out, left, nd](const Tensor&, const Tensor& hdir, unsigned need) {
                          std::vector<Tensor> res(2);
                          if (detail::wants(need, 0)) res[0] = correlate1d(left, hdir, nd - 1);
                          if (detail::wants(need, 1)) res[1] = correlate1d_grad_left(grad_out, hdir);
                          return res;
                        });
}

// ---------------------------------------------------------------------------
// Horizontal warping. out[n,c,y,x] samples image row y at x - disparity[n,0,y,x]
// with linear interpolation; samples outside [0, W-1] are clamped to the
// border and reported invalid. Family members:
//   warp_horizontal   image -> warped image
//   warp_adjoint      scatter of a warped-space gradient back to image space
//   warp_dx           per-pixel slope I[x0+1] - I[x0] at the sample (0 where clamped)
//   warp_dx_adjoint   adjoint of warp_dx with respect to the image

struct WarpResult {
  Tensor image;
  Tensor valid;  // N1HW, 1 where the sample fell inside the row, 0 otherwise
};

namespace detail {

struct WarpTap {
  std::int64_t x0;
  double w1;
  bool valid;
};

inline std::vector<WarpTap> warp_taps(const Tensor& disparity, std::int64_t width) {
  if (width < 2) throw ShapeError("warp: image width must be at least 2");
  require_finite("warp disparity", disparity);
  const auto n = disparity.dim(0), h = disparity.dim(2), w = disparity.dim(3);
  std::vector<WarpTap> taps(static_cast<std::size_t>(n * h * w));
  const double hi = static_cast<double>(width - 1);
  for (std::int64_t i = 0; i < n * h; ++i) {
    for (std::int64_t x = 0; x < w; ++x) {
      const auto idx = static_cast<std::size_t>(i * w + x);
      const double xs = static_cast<double>(x) - disparity[i * w + x];
      const bool valid = xs >= 0.0 && xs <= hi;
      const double xc = std::clamp(xs, 0.0, hi);
      auto x0 = static_cast<std::int64_t>(std::floor(xc));
      x0 = std::min(x0, width - 2);
      taps[idx] = WarpTap{x0, xc - static_cast<double>(x0), valid};
    }
  }
  return taps;
}

inline void check_warp_shapes(std::string_view op, const Tensor& image, const Tensor& disparity) {
  require_rank(op, image, 4);
  require_rank(op, disparity, 4);
  if (disparity.dim(1) != 1 || disparity.dim(0) != image.dim(0) ||
      disparity.dim(2) != image.dim(2) || disparity.dim(3) != image.dim(3)) {
    throw ShapeError(std::string(op) + ": disparity " + to_string(disparity.shape()) +
                     " does not match image " + to_string(image.shape()));
  }
}

}  // namespace detail

inline Tensor warp_image(const Tensor& image, const Tensor& disparity) {
  detail::check_warp_shapes("warp_horizontal", image, disparity);
  const auto n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  auto taps = detail::warp_taps(disparity, w);
  auto out = detail::buffer(image.numel());
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t k = 0; k < c; ++k) {
      for (std::int64_t y = 0; y < h; ++y) {
        const double* row = image.data() + ((b * c + k) * h + y) * w;
        double* orow = out.data() + ((b * c + k) * h + y) * w;
        const detail::WarpTap* t = taps.data() + (b * h + y) * w;
        for (std::int64_t x = 0; x < w; ++x) {
          orow[x] = (1.0 - t[x].w1) * row[t[x].x0] + t[x].w1 * row[t[x].x0 + 1];
        }
      }
    }
  }
  return detail::record(
      "warp_horizontal", Tensor(image.shape(), std::move(out)), {&image, &disparity},
      [image, disparity](const Tensor&, const Tensor& g, unsigned need) {
        std::vector<Tensor> res(2);
        if (detail::wants(need, 0)) res[0] = warp_adjoint(g, disparity);
        if (detail::wants(need, 1)) res[1] = neg(sum_channels(mul(g, warp_dx(image, disparity))));
        return res;
      });
}

inline WarpResult warp_horizontal(const Tensor& image, const Tensor& disparity) {
  WarpResult result;
  result.image = warp_image(image, disparity);
  auto taps = detail::warp_taps(disparity, image.dim(3));
  std::vector<double> valid(taps.size());
  for (std::size_t i = 0; i < taps.size(); ++i) valid[i] = taps[i].valid ? 1.0 : 0.0;
  result.valid = Tensor(disparity.shape(), std::move(valid));
  return result;
}

inline Tensor warp_adjoint(const Tensor& grad_out, const Tensor& disparity) {
  detail::check_warp_shapes("warp_adjoint", grad_out, disparity);
  const auto n = grad_out.dim(0), c = grad_out.dim(1), h = grad_out.dim(2), w = grad_out.dim(3);
  auto taps = detail::warp_taps(disparity, w);
  auto out = detail::buffer(grad_out.numel());
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t k = 0; k < c; ++k) {
      for (std::int64_t y = 0; y < h; ++y) {
        const double* grow = grad_out.data() + ((b * c + k) * h + y) * w;
        double* orow = out.data() + ((b * c + k) * h + y) * w;
        const detail::WarpTap* t = taps.data() + (b * h + y) * w;
        for (std::int64_t x = 0; x < w; ++x) {
          orow[t[x].x0] += (1.0 - t[x].w1) * grow[x];
          orow[t[x].x0 + 1] += t[x].w1 * grow[x];
        }
      }
    }
  }
  return detail::record(
      "warp_adjoint", Tensor(grad_out.shape(), std::move(out)), {&grad_out, &disparity},
      [grad_out, disparity](const Tensor&, const Tensor& hdir, unsigned need) {
        std::vector<Tensor> res(2);
        if (detail::wants(need, 0)) res[0] = warp_image(hdir, disparity);
        if (detail::wants(need, 1)) res[1] = neg(sum_channels(mul(grad_out, warp_dx(hdir, disparity))));
        return res;
      });
}

inline Tensor warp_dx(const Tensor& image, const Tensor& disparity) {
  detail::check_warp_shapes("warp_dx", image, disparity);
  const auto n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  auto taps = detail::warp_taps(disparity, w);
  auto out = detail::buffer(image.numel());
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t k = 0; k < c; ++k) {
      for (std::int64_t y = 0; y < h; ++y) {
        const double* row = image.data() + ((b * c + k) * h + y) * w;
        double* orow = out.data() + ((b * c + k) * h + y) * w;
        const detail::WarpTap* t = taps.data() + (b * h + y) * w;
        for (std::int64_t x = 0; x < w; ++x) {
          orow[x] = t[x].valid ? row[t[x].x0 + 1] - row[t[x].x0] : 0.0;
        }
      }
    }
  }
  // Piecewise constant in the disparity, so only the image receives a gradient.
  return detail::record("warp_dx", Tensor(image.shape(), std::move(out)), {&image, &disparity},
                        [disparity](const Tensor&, const Tensor& hdir, unsigned need) {
                          std::vector<Tensor> res(2);
                          if (detail::wants(need, 0)) res[0] = warp_dx_adjoint(hdir, disparity);
                          return res;
                        });
}

inline Tensor warp_dx_adjoint(const Tensor& grad, const Tensor& disparity) {
  detail::check_warp_shapes("warp_dx_adjoint", grad, disparity);
  const auto n = grad.dim(0), c = grad.dim(1), h = grad.dim(2), w = grad.dim(3);
  auto taps = detail::warp_taps(disparity, w);
  auto out = detail::buffer(grad.numel());
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t k = 0; k < c; ++k) {
      for (std::int64_t y = 0; y < h; ++y) {
        const double* grow = grad.data() + ((b * c + k) * h + y) * w;
        double* orow = out.data() + ((b * c + k) * h + y) * w;
        const detail::WarpTap* t = taps.data() + (b * h + y) * w;
        for (std::int64_t x = 0; x < w; ++x) {
          if (!t[x].valid) continue;
          orow[t[x].x0 + 1] += grow[x];
          orow[t[x].x0] -= grow[x];
        }
      }
    }
  }
  return detail::record("warp_dx_adjoint", Tensor(grad.shape(), std::move(out)),
                        {&grad, &disparity},
                        [disparity](const Tensor&, const Tensor& hdir, unsigned need) {
                          std::vector<Tensor> res(2);
                          if (detail::wants(need, 0)) res[0] = warp_dx(hdir, disparity);
                          return res;
                        });
}

// ---------------------------------------------------------------------------
// Resampling

inline Tensor avg_pool2x2(const Tensor& x) {
  detail::require_rank("avg_pool2x2", x, 4);
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2x2: odd spatial size " + to_string(x.shape()));
  const auto oh = h / 2, ow = w / 2;
  auto out = detail::buffer(n * c * oh * ow);
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* xp = x.data() + p * h * w;
    double* op = out.data() + p * oh * ow;
    for (std::int64_t y = 0; y < oh; ++y) {
      const double* r0 = xp + 2 * y * w;
      const double* r1 = r0 + w;
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        op[y * ow + xx] = 0.25 * ((r0[2 * xx] + r0[2 * xx + 1]) + (r1[2 * xx] + r1[2 * xx + 1]));
      }
    }
  }
  return detail::record("avg_pool2x2", Tensor({n, c, oh, ow}, std::move(out)), {&x},
                        [](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{avg_pool2x2_adjoint(g)};
                        });
}

inline Tensor avg_pool2x2_adjoint(const Tensor& g) {
  detail::require_rank("avg_pool2x2_adjoint", g, 4);
  const auto n = g.dim(0), c = g.dim(1), h = g.dim(2), w = g.dim(3);
  auto out = detail::buffer(n * c * 4 * h * w);
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* gp = g.data() + p * h * w;
    double* op = out.data() + p * 4 * h * w;
    for (std::int64_t y = 0; y < 2 * h; ++y) {
      for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
        op[y * 2 * w + xx] = 0.25 * gp[(y / 2) * w + xx / 2];
      }
    }
  }
  return detail::record("avg_pool2x2_adjoint", Tensor({n, c, 2 * h, 2 * w}, std::move(out)), {&g},
                        [](const Tensor&, const Tensor& hdir, unsigned) {
                          return std::vector<Tensor>{avg_pool2x2(hdir)};
                        });
}

namespace detail {

struct AxisInterp {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> w1;
};

/// Half-pixel-centred linear interpolation weights from `in` samples to `out`.
inline AxisInterp axis_interp(std::int64_t in, std::int64_t out) {
  AxisInterp a;
  a.i0.resize(static_cast<std::size_t>(out));
  a.i1.resize(static_cast<std::size_t>(out));
  a.w1.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    auto i1 = std::min(i0 + 1, in - 1);
    const auto k = static_cast<std::size_t>(o);
    a.i0[k] = i0;
    a.i1[k] = i1;
    a.w1[k] = src - static_cast<double>(i0);
  }
  return a;
}

}  // namespace detail

inline Tensor resize_bilinear(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  detail::require_rank("resize_bilinear", x, 4);
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: empty output size");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ay = detail::axis_interp(h, out_h);
  const auto ax = detail::axis_interp(w, out_w);
  auto out = detail::buffer(n * c * out_h * out_w);
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* xp = x.data() + p * h * w;
    double* op = out.data() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto ky = static_cast<std::size_t>(oy);
      const double* r0 = xp + ay.i0[ky] * w;
      const double* r1 = xp + ay.i1[ky] * w;
      const double wy = ay.w1[ky];
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto kx = static_cast<std::size_t>(ox);
        const double wx = ax.w1[kx];
        const double top = (1.0 - wx) * r0[ax.i0[kx]] + wx * r0[ax.i1[kx]];
        const double bot = (1.0 - wx) * r1[ax.i0[kx]] + wx * r1[ax.i1[kx]];
        op[oy * out_w + ox] = (1.0 - wy) * top + wy * bot;
      }
    }
  }
  return detail::record("resize_bilinear", Tensor({n, c, out_h, out_w}, std::move(out)), {&x},
                        [h, w](const Tensor&, const Tensor& g, unsigned) {
                          return std::vector<Tensor>{resize_bilinear_adjoint(g, h, w)};
                        });
}

inline Tensor resize_bilinear_adjoint(const Tensor& g, std::int64_t in_h, std::int64_t in_w) {
  detail::require_rank("resize_bilinear_adjoint", g, 4);
  const auto n = g.dim(0), c = g.dim(1), out_h = g.dim(2), out_w = g.dim(3);
  const auto ay = detail::axis_interp(in_h, out_h);
  const auto ax = detail::axis_interp(in_w, out_w);
  auto out = detail::buffer(n * c * in_h * in_w);
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* gp = g.data() + p * out_h * out_w;
    double* op = out.data() + p * in_h * in_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto ky = static_cast<std::size_t>(oy);
      double* r0 = op + ay.i0[ky] * in_w;
      double* r1 = op + ay.i1[ky] * in_w;
      const double wy = ay.w1[ky];
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto kx = static_cast<std::size_t>(ox);
        const double wx = ax.w1[kx];
        const double v = gp[oy * out_w + ox];
        r0[ax.i0[kx]] += (1.0 - wy) * (1.0 - wx) * v;
        r0[ax.i1[kx]] += (1.0 - wy) * wx * v;
        r1[ax.i0[kx]] += wy * (1.0 - wx) * v;
        r1[ax.i1[kx]] += wy * wx * v;
      }
    }
  }
  return detail::record("resize_bilinear_adjoint", Tensor({n, c, in_h, in_w}, std::move(out)),
                        {&g}, [out_h, out_w](const Tensor&, const Tensor& hdir, unsigned) {
                          return std::vector<Tensor>{resize_bilinear(hdir, out_h, out_w)};
                        });
}

/// Bilinear upsampling by an integer factor (2 and 4 are what the models use).
inline Tensor bilinear_upsample(const Tensor& x, std::int64_t factor) {
  detail::require_rank("bilinear_upsample", x, 4);
  if (factor < 1) throw ContractError("bilinear_upsample: factor must be >= 1");
  return resize_bilinear(x, x.dim(2) * factor, x.dim(3) * factor);
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

struct BatchNormOutput {
  Tensor out;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // biased
};

inline BatchNormOutput batch_norm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                        double eps = 1e-5) {
  detail::require_rank("batch_norm", x, 4);
  const auto c = x.dim(1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("batch_norm: affine parameters must have shape [" + std::to_string(c) + "]");
  }
  const double inv_m = 1.0 / static_cast<double>(x.dim(0) * x.dim(2) * x.dim(3));
  auto mu = mul_scalar(channel_sum(x), inv_m);
  auto centred = sub(x, broadcast_channels(mu, x.shape()));
  auto var = mul_scalar(channel_sum(square(centred)), inv_m);
  auto scale = mul(rsqrt(add_scalar(var, eps)), gamma);
  auto out = add(mul(centred, broadcast_channels(scale, x.shape())),
                 broadcast_channels(beta, x.shape()));
  BatchNormOutput r;
  r.out = out;
  r.batch_mean.assign(mu.values().begin(), mu.values().end());
  r.batch_var.assign(var.values().begin(), var.values().end());
  return r;
}

inline Tensor batch_norm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              std::span<const double> running_mean,
                              std::span<const double> running_var, double eps = 1e-5) {
  detail::require_rank("batch_norm", x, 4);
  const auto c = x.dim(1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} ||
      static_cast<std::int64_t>(running_mean.size()) != c ||
      static_cast<std::int64_t>(running_var.size()) != c) {
    throw ShapeError("batch_norm: parameter sizes do not match " + std::to_string(c) + " channels");
  }
  std::vector<double> inv_std(static_cast<std::size_t>(c));
  std::vector<double> mean_v(running_mean.begin(), running_mean.end());
  for (std::size_t k = 0; k < inv_std.size(); ++k) inv_std[k] = 1.0 / std::sqrt(running_var[k] + eps);
  auto scale = mul(Tensor({c}, std::move(inv_std)), gamma);
  auto centred = sub(x, broadcast_channels(Tensor({c}, std::move(mean_v)), x.shape()));
  return add(mul(centred, broadcast_channels(scale, x.shape())),
             broadcast_channels(beta, x.shape()));
}

}  // namespace l2a
