#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "l2a/autodiff.hpp"
#include "l2a/model.hpp"
#include "test_util.hpp"

using namespace l2a;
namespace lt = l2a::testing;

namespace {

NetConfig small_net() {
  NetConfig c;
  c.height = 16;
  c.width = 32;
  c.base_channels = 4;
  c.max_disp = 8;
  return c;
}

Tensor random_image(std::mt19937_64& rng, const NetConfig& c, std::int64_t n = 1) {
  return lt::random_tensor(rng, {n, 3, c.height, c.width}, 0.0, 1.0);
}

}  // namespace

TEST(DisparityNet, SameSeedGivesIdenticalParams) {
  auto a = init_disparity_net(small_net(), 11);
  auto b = init_disparity_net(small_net(), 11);
  EXPECT_TRUE(a.theta.bit_equal(b.theta));
}

TEST(DisparityNet, DifferentSeedsDiffer) {
  auto a = init_disparity_net(small_net(), 11);
  auto b = init_disparity_net(small_net(), 12);
  EXPECT_FALSE(a.theta.bit_equal(b.theta));
}

TEST(DisparityNet, ZeroImagesGiveFiniteOutput) {
  auto c = small_net();
  auto p = init_disparity_net(c, 3);
  auto zero = Tensor::zeros({1, 3, c.height, c.width});
  auto d = forward_disparity(c, p.theta, zero, zero);
  for (double v : d.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(DisparityNet, OutputShapeAndRange) {
  auto c = small_net();
  auto p = init_disparity_net(c, 3);
  std::mt19937_64 rng(1);
  for (std::int64_t n : {1, 2}) {
    auto d = forward_disparity(c, p.theta, random_image(rng, c, n), random_image(rng, c, n));
    EXPECT_EQ(d.shape(), (Shape{n, 1, c.height, c.width}));
    for (double v : d.values()) EXPECT_GE(v, 0.0);
  }
}

TEST(DisparityNet, Deterministic) {
  auto c = small_net();
  auto p = init_disparity_net(c, 3);
  std::mt19937_64 rng(2);
  auto l = random_image(rng, c), r = random_image(rng, c);
  auto a = forward_disparity(c, p.theta, l, r);
  auto b = forward_disparity(c, p.theta, l, r);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

TEST(DisparityNet, ResolutionMismatchIsShapeError) {
  auto c = small_net();
  auto p = init_disparity_net(c, 3);
  auto img = Tensor::zeros({1, 3, c.height, c.width + 4});
  EXPECT_THROW(forward_disparity(c, p.theta, img, img), ShapeError);
}

TEST(DisparityNet, InvalidConfigRejected) {
  auto c = small_net();
  c.height = 18;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(DisparityNet, WiderNetKeepsShapeContract) {
  auto c = small_net();
  auto wide = c;
  wide.base_channels = 2 * c.base_channels;
  auto p = init_disparity_net(c, 3);
  auto q = init_disparity_net(wide, 3);
  EXPECT_GT(q.theta.parameter_count(), p.theta.parameter_count());
  std::mt19937_64 rng(4);
  auto l = random_image(rng, c), r = random_image(rng, c);
  EXPECT_EQ(forward_disparity(c, p.theta, l, r).shape(), forward_disparity(wide, q.theta, l, r).shape());
}

// d mean(disparity) / dθ against central differences, a few coordinates per tensor.
TEST(DisparityNet, ThetaGradientMatchesFiniteDifferences) {
  auto c = small_net();
  auto p = init_disparity_net(c, 5);
  std::mt19937_64 rng(6);
  auto l = random_image(rng, c), r = random_image(rng, c);
  auto objective = [&](const ParamSet& th) { return mean(forward_disparity(c, th, l, r)); };

  Tape tape;
  TapeGuard guard(tape);
  std::vector<Tensor> vars;
  for (const auto& t : p.theta.tensors()) vars.push_back(tape.watch(t));
  auto g = grad(objective(p.theta.with_tensors(vars)), vars);

  NoGradGuard ng;
  for (std::size_t i = 0; i < p.theta.size(); ++i) {
    std::uniform_int_distribution<std::int64_t> pick(0, p.theta[i].numel() - 1);
    for (int rep = 0; rep < 3; ++rep) {
      const auto k = pick(rng);
      const double h = 1e-5;
      auto at = [&](double delta) {
        auto v = p.theta.tensors();
        v[i] = lt::with_value(v[i], k, v[i][k] + delta);
        return objective(p.theta.with_tensors(v)).item();
      };
      const double fd = (at(h) - at(-h)) / (2 * h);
      const double an = g[i][k];
      const double rel = std::fabs(fd - an) / std::max({std::fabs(fd), std::fabs(an), 1e-7});
      EXPECT_LT(rel, 1e-3) << p.theta.name(i) << "[" << k << "] fd " << fd << " analytic " << an;
    }
  }
}

TEST(ConfidenceNet, RangeAndShape) {
  auto conf = init_confidence_net(1);
  std::mt19937_64 rng(2);
  auto eps = lt::random_tensor(rng, {2, 1, 16, 32}, 0.0, 0.5);
  for (auto mode : {BatchNormMode::batch_statistics, BatchNormMode::running_statistics}) {
    auto out = forward_confidence(conf, eps, mode);
    EXPECT_EQ(out.raw.shape(), eps.shape());
    for (double v : out.raw.values()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(ConfidenceNet, ConstantInputGivesNearConstantInterior) {
  auto conf = init_confidence_net(3);
  auto eps = Tensor::full({1, 1, 64, 128}, 0.2);
  auto raw = forward_confidence(conf, eps, BatchNormMode::running_statistics).raw;
  // Pixels whose quarter-resolution receptive field (3 stacked 3x3 convs plus
  // the bilinear taps) stays clear of the zero padding.
  const std::int64_t margin = 4 * 5;
  double lo = 1.0, hi = 0.0;
  for (std::int64_t y = margin; y < 64 - margin; ++y) {
    for (std::int64_t x = margin; x < 128 - margin; ++x) {
      const double v = raw[y * 128 + x];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  ASSERT_LE(lo, hi);
  EXPECT_LT(hi - lo, 1e-6);
}

TEST(ConfidenceNet, NegativeInputIsContractError) {
  auto conf = init_confidence_net(1);
  auto eps = Tensor::full({1, 1, 8, 8}, 0.1);
  eps = lt::with_value(eps, 5, -0.01);
  EXPECT_THROW(forward_confidence(conf, eps, BatchNormMode::running_statistics), ContractError);
}

TEST(ConfidenceNet, RunningStatisticsUpdateOnlyInBatchMode) {
  auto conf = init_confidence_net(1);
  std::mt19937_64 rng(9);
  auto eps = lt::random_tensor(rng, {1, 1, 16, 16}, 0.0, 1.0);
  auto frozen = forward_confidence(conf, eps, BatchNormMode::running_statistics);
  EXPECT_TRUE(frozen.buffers.bit_equal(conf.buffers));
  auto live = forward_confidence(conf, eps, BatchNormMode::batch_statistics);
  EXPECT_FALSE(live.buffers.bit_equal(conf.buffers));
}
