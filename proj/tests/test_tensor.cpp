#include <gtest/gtest.h>

#include <random>

#include "l2a/autodiff.hpp"
#include "l2a/ops.hpp"
#include "l2a/optim.hpp"
#include "test_util.hpp"

using namespace l2a;
using l2a::testing::random_tensor;

namespace {

// Naive sliding-window convolution, written independently of the library kernels.
std::vector<double> naive_conv(const Tensor& x, const Tensor& k, int stride, int pad) {
  const int n = static_cast<int>(x.dim(0)), c = static_cast<int>(x.dim(1));
  const int h = static_cast<int>(x.dim(2)), w = static_cast<int>(x.dim(3));
  const int o = static_cast<int>(k.dim(0)), kh = static_cast<int>(k.dim(2));
  const int kw = static_cast<int>(k.dim(3));
  const int oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(n * o * oh * ow), 0.0);
  for (int b = 0; b < n; ++b)
    for (int oc = 0; oc < o; ++oc)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          double acc = 0.0;
          for (int ic = 0; ic < c; ++ic)
            for (int i = 0; i < kh; ++i)
              for (int j = 0; j < kw; ++j) {
                int iy = y * stride + i - pad, ix = xx * stride + j - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += x[((b * c + ic) * h + iy) * w + ix] * k[((oc * c + ic) * kh + i) * kw + j];
              }
          out[static_cast<std::size_t>(((b * o + oc) * oh + y) * ow + xx)] = acc;
        }
  return out;
}

}  // namespace

TEST(Tensor, RejectsInconsistentShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_NO_THROW(Tensor({2, 3}, std::vector<double>(6)));
}

TEST(Conv2d, OnesKernelSumsWindow) {
  auto x = Tensor::full({1, 1, 3, 3}, 1.0);
  auto k = Tensor::full({1, 1, 2, 2}, 1.0);
  auto y = conv2d(x, k, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (double v : y.values()) EXPECT_EQ(v, 4.0);
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(1);
  auto x = random_tensor(rng, {2, 1, 4, 5});
  auto y = conv2d(x, Tensor::full({1, 1, 1, 1}, 1.0), 1, 0);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Conv2d, MatchesNaiveOracle) {
  std::mt19937_64 rng(2);
  auto x = random_tensor(rng, {1, 2, 5, 5});
  auto k = random_tensor(rng, {3, 2, 3, 3});
  auto y = conv2d(x, k, 1, 0);
  auto ref = naive_conv(x, k, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[static_cast<std::int64_t>(i)], ref[i], 1e-12);
}

TEST(Conv2d, StridedPaddedMatchesNaiveOracle) {
  std::mt19937_64 rng(3);
  for (int stride : {1, 2, 3}) {
    for (int pad : {0, 1, 2}) {
      auto x = random_tensor(rng, {2, 3, 7, 6});
      auto k = random_tensor(rng, {4, 3, 3, 3});
      auto y = conv2d(x, k, stride, pad);
      auto ref = naive_conv(x, k, stride, pad);
      ASSERT_EQ(static_cast<std::size_t>(y.numel()), ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) {
        EXPECT_NEAR(y[static_cast<std::int64_t>(i)], ref[i], 1e-12) << "stride " << stride << " pad " << pad;
      }
    }
  }
}

TEST(Conv2d, ExactOnIntegerInputs) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> d(-4, 4);
  std::vector<double> xv(2 * 6 * 6), kv(2 * 2 * 3 * 3);
  for (auto& v : xv) v = d(rng);
  for (auto& v : kv) v = d(rng);
  Tensor x({1, 2, 6, 6}, xv), k({2, 2, 3, 3}, kv);
  auto y = conv2d(x, k, 2, 1);
  auto ref = naive_conv(x, k, 2, 1);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_EQ(y[static_cast<std::int64_t>(i)], ref[i]);
}

TEST(Conv2d, ShapeErrorNamesBothShapes) {
  auto x = Tensor::zeros({1, 2, 5, 5});
  auto k = Tensor::zeros({1, 3, 3, 3});
  try {
    conv2d(x, k, 1, 0);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[1x2x5x5]"), std::string::npos);
    EXPECT_NE(msg.find("[1x3x3x3]"), std::string::npos);
  }
  EXPECT_THROW(conv2d(x, Tensor::zeros({1, 2, 3, 3}), 0, 0), ContractError);
  EXPECT_THROW(conv2d(x, Tensor::zeros({1, 2, 3, 3}), 1, -1), ContractError);
}

TEST(Correlate1d, SelfCorrelationAtZeroIsSquare) {
  std::mt19937_64 rng(5);
  auto f = random_tensor(rng, {1, 1, 3, 6});
  auto c = correlate1d(f, f, 2);
  ASSERT_EQ(c.shape(), (Shape{1, 3, 3, 6}));
  for (std::int64_t i = 0; i < f.numel(); ++i) EXPECT_EQ(c[i], f[i] * f[i]);
}

TEST(Correlate1d, HandDotProducts) {
  Tensor row({1, 1, 1, 3}, {1, 2, 3});
  auto c = correlate1d(row, row, 1);
  // plane d=1 starts at index 3
  EXPECT_EQ(c[3 + 1], 2.0);  // x=1: 2 * 1
  EXPECT_EQ(c[3 + 0], 0.0);  // x=0 has no partner
  EXPECT_EQ(c[3 + 2], 6.0);  // x=2: 3 * 2
}

TEST(Correlate1d, ZeroRightGivesZero) {
  std::mt19937_64 rng(6);
  auto l = random_tensor(rng, {2, 3, 4, 5});
  auto c = correlate1d(l, Tensor::zeros(l.shape()), 3);
  for (double v : c.values()) EXPECT_EQ(v, 0.0);
}

TEST(Correlate1d, MatchesLoopOracle) {
  std::mt19937_64 rng(7);
  auto l = random_tensor(rng, {2, 3, 4, 7});
  auto r = random_tensor(rng, {2, 3, 4, 7});
  const int D = 4;
  auto c = correlate1d(l, r, D);
  for (int n = 0; n < 2; ++n)
    for (int d = 0; d <= D; ++d)
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 7; ++x) {
          double ref = 0.0;
          if (x - d >= 0) {
            for (int k = 0; k < 3; ++k) ref += l[((n * 3 + k) * 4 + y) * 7 + x] * r[((n * 3 + k) * 4 + y) * 7 + x - d];
            ref /= 3.0;
          }
          EXPECT_NEAR(c[((n * (D + 1) + d) * 4 + y) * 7 + x], ref, 1e-14);
        }
}

TEST(Correlate1d, ShapeMismatch) {
  EXPECT_THROW(correlate1d(Tensor::zeros({1, 2, 3, 4}), Tensor::zeros({1, 2, 3, 5}), 2), ShapeError);
  EXPECT_THROW(correlate1d(Tensor::zeros({1, 2, 3, 4}), Tensor::zeros({1, 2, 3, 4}), -1), ContractError);
}

TEST(Warp, ZeroDisparityIsIdentity) {
  std::mt19937_64 rng(8);
  auto img = random_tensor(rng, {2, 3, 5, 9});
  auto w = warp_horizontal(img, Tensor::zeros({2, 1, 5, 9}));
  for (std::int64_t i = 0; i < img.numel(); ++i) EXPECT_EQ(w.image[i], img[i]);
  for (double v : w.valid.values()) EXPECT_EQ(v, 1.0);
}

TEST(Warp, HalfPixelShiftInterpolates) {
  Tensor row({1, 1, 1, 4}, {0, 2, 4, 6});
  auto w = warp_horizontal(row, Tensor::full({1, 1, 1, 4}, 0.5));
  EXPECT_EQ(w.valid[0], 0.0);
  EXPECT_DOUBLE_EQ(w.image[1], 1.0);
  EXPECT_DOUBLE_EQ(w.image[2], 3.0);
  EXPECT_DOUBLE_EQ(w.image[3], 5.0);
  EXPECT_EQ(w.valid[1], 1.0);
  EXPECT_EQ(w.valid[3], 1.0);
}

TEST(Warp, IntegerShift) {
  Tensor row({1, 1, 1, 4}, {1, 2, 3, 4});
  auto w = warp_horizontal(row, Tensor::full({1, 1, 1, 4}, 1.0));
  EXPECT_EQ(w.valid[0], 0.0);
  EXPECT_EQ(w.image[1], 1.0);
  EXPECT_EQ(w.image[2], 2.0);
  EXPECT_EQ(w.image[3], 3.0);
  EXPECT_EQ(w.image[0], 1.0);  // clamped to the border
}

TEST(Warp, NegativeDisparityPastRightBorderIsInvalid) {
  Tensor row({1, 1, 1, 4}, {1, 2, 3, 4});
  auto w = warp_horizontal(row, Tensor::full({1, 1, 1, 4}, -1.0));
  EXPECT_EQ(w.valid[3], 0.0);
  EXPECT_EQ(w.image[3], 4.0);
  EXPECT_EQ(w.image[0], 2.0);
}

TEST(Warp, ShapeChecks) {
  EXPECT_THROW(warp_horizontal(Tensor::zeros({1, 3, 4, 5}), Tensor::zeros({1, 1, 4, 6})), ShapeError);
  EXPECT_THROW(warp_horizontal(Tensor::zeros({1, 3, 4, 5}), Tensor::zeros({1, 2, 4, 5})), ShapeError);
}

TEST(Resample, UpsamplePreservesConstant) {
  auto x = Tensor::full({1, 2, 3, 4}, 0.7);
  for (int f : {2, 4}) {
    auto y = bilinear_upsample(x, f);
    EXPECT_EQ(y.shape(), (Shape{1, 2, 3 * f, 4 * f}));
    for (double v : y.values()) EXPECT_NEAR(v, 0.7, 1e-15);
  }
}

TEST(Resample, UpsampleInterpolatesHalfPixelCentres) {
  Tensor x({1, 1, 1, 2}, {0.0, 4.0});
  auto y = bilinear_upsample(x, 2);
  // output centres map to source -0.25, 0.25, 0.75, 1.25 (clamped at the ends)
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
  EXPECT_DOUBLE_EQ(y[2], 3.0);
  EXPECT_DOUBLE_EQ(y[3], 4.0);
}

TEST(Resample, AvgPoolAverages) {
  Tensor x({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto y = avg_pool2x2(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_DOUBLE_EQ(y[0], 3.5);
  EXPECT_DOUBLE_EQ(y[1], 5.5);
  EXPECT_THROW(avg_pool2x2(Tensor::zeros({1, 1, 3, 4})), ShapeError);
}

TEST(Elementwise, Basics) {
  Tensor a({3}, {-1.0, 0.5, 2.0});
  Tensor b({3}, {2.0, 4.0, -1.0});
  EXPECT_EQ(add(a, b)[2], 1.0);
  EXPECT_EQ(sub(a, b)[0], -3.0);
  EXPECT_EQ(mul(a, b)[1], 2.0);
  EXPECT_EQ(div(a, b)[1], 0.125);
  EXPECT_EQ(abs(a)[0], 1.0);
  EXPECT_DOUBLE_EQ(leaky_relu(a, 0.2)[0], -0.2);
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_NEAR(softplus(Tensor::scalar(0.0)).item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(softplus(Tensor::scalar(800.0)).item(), 800.0, 1e-12);
  EXPECT_EQ(sum(a).item(), 1.5);
  EXPECT_EQ(mean(a).item(), 0.5);
  EXPECT_THROW(add(a, Tensor::zeros({2})), ShapeError);
}

TEST(BatchNorm, NormalizesPerChannel) {
  std::mt19937_64 rng(9);
  auto x = random_tensor(rng, {2, 3, 4, 4}, -2.0, 5.0);
  auto r = batch_norm_train(x, Tensor::full({3}, 1.0), Tensor::zeros({3}));
  auto s = channel_sum(r.out);
  auto s2 = channel_sum(square(r.out));
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(s[c] / 32.0, 0.0, 1e-12);
    EXPECT_NEAR(s2[c] / 32.0, 1.0, 1e-3);
  }
}

TEST(SgdStep, ZeroLearningRateKeepsParameters) {
  ParamSet p;
  p.add("w", Tensor({2}, {1.5, -2.0}));
  auto st = OptimizerState::for_params(p, 0.0, 0.9);
  std::vector<Tensor> g{Tensor({2}, {3.0, 4.0})};
  auto q = sgd_step(p, g, st);
  EXPECT_TRUE(q.bit_equal(p));
}

TEST(SgdStep, PlainStepOnQuadratic) {
  ParamSet p;
  p.add("theta", Tensor::scalar(1.0));
  auto st = OptimizerState::for_params(p, 0.1, 0.0);
  // L = theta^2 / 2, dL/dtheta = theta
  std::vector<Tensor> g{Tensor::scalar(1.0)};
  auto q = sgd_step(p, g, st);
  EXPECT_DOUBLE_EQ(q[0].item(), 0.9);
}

TEST(SgdStep, MomentumRecursion) {
  ParamSet p;
  p.add("theta", Tensor::scalar(1.0));
  auto st = OptimizerState::for_params(p, 0.1, 0.9);
  std::vector<Tensor> g1{Tensor::scalar(p[0].item())};
  p = sgd_step(p, g1, st);
  EXPECT_DOUBLE_EQ(p[0].item(), 0.9);  // v1 = 1
  std::vector<Tensor> g2{Tensor::scalar(p[0].item())};
  p = sgd_step(p, g2, st);
  EXPECT_NEAR(st.velocity[0][0], 1.8, 1e-15);
  EXPECT_NEAR(p[0].item(), 0.72, 1e-15);
}

TEST(SgdStep, NanGradientNamesParameter) {
  ParamSet p;
  p.add("enc1.w", Tensor::scalar(1.0));
  auto st = OptimizerState::for_params(p, 0.1, 0.0);
  std::vector<Tensor> g{Tensor::scalar(std::nan(""))};
  try {
    sgd_step(p, g, st);
    FAIL();
  } catch (const NumericFault& e) {
    EXPECT_NE(std::string(e.what()).find("enc1.w"), std::string::npos);
  }
}

TEST(SgdStep, MisalignedGradients) {
  ParamSet p;
  p.add("a", Tensor::zeros({2}));
  auto st = OptimizerState::for_params(p, 0.1, 0.0);
  std::vector<Tensor> g{Tensor::zeros({3})};
  EXPECT_THROW(sgd_step(p, g, st), ShapeError);
  EXPECT_THROW(OptimizerState::for_params(p, 0.1, 1.0), ConfigError);
}
