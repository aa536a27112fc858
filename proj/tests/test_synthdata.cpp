#include <gtest/gtest.h>

#include <cmath>

#include "l2a/losses.hpp"
#include "l2a/synthdata.hpp"

using namespace l2a;

namespace {

Surface plane(double x, double y, double w, double h, double z, std::uint64_t tex) {
  Surface s;
  s.x = x;
  s.y = y;
  s.width = w;
  s.height = h;
  s.depth = z;
  s.texture_seed = tex;
  return s;
}

SceneSpec two_planes() {
  SceneSpec scene;
  scene.height = 24;
  scene.width = 48;
  scene.focal = 100.0;
  scene.baseline = 0.5;
  scene.surfaces = {plane(-50, -50, 200, 200, 50.0, 1), plane(14.0, 6.0, 18, 10, 10.0, 2)};
  return scene;
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

}  // namespace

TEST(RenderFrame, SinglePlaneDisparity) {
  SceneSpec scene;
  scene.height = 8;
  scene.width = 16;
  scene.surfaces = {plane(-20, -20, 60, 60, 25.0, 3)};
  auto f = render_frame(scene, DomainSpec{}, 0, 1);
  for (std::int64_t i = 0; i < f.gt_disparity->numel(); ++i) {
    EXPECT_EQ((*f.gt_disparity)[i], 2.0);
    EXPECT_EQ(f.gt_valid[i], 1.0);
  }
}

TEST(RenderFrame, TwoPlanesMatchZBufferOracle) {
  auto scene = two_planes();
  auto f = render_frame(scene, DomainSpec{}, 0, 1);
  int near = 0;
  for (std::int64_t y = 0; y < 24; ++y) {
    for (std::int64_t x = 0; x < 48; ++x) {
      // nearest covering surface, computed independently
      double best_z = 1e300, d = -1.0;
      for (const auto& s : scene.surfaces) {
        if (x >= s.x && x < s.x + s.width && y >= s.y && y < s.y + s.height && s.depth < best_z) {
          best_z = s.depth;
          d = scene.focal * scene.baseline / s.depth;
        }
      }
      EXPECT_EQ((*f.gt_disparity)[y * 48 + x], d) << x << "," << y;
      near += d == 5.0;
    }
  }
  EXPECT_EQ(near, 18 * 10);
}

TEST(RenderFrame, WarpConsistencyOnUnoccludedPixels) {
  auto scene = two_planes();
  auto f = render_frame(scene, DomainSpec{}, 0, 1);
  int checked = 0, occluded = 0;
  for (std::int64_t y = 0; y < 24; ++y) {
    for (std::int64_t x = 0; x < 48; ++x) {
      const auto i = y * 48 + x;
      const auto d = static_cast<std::int64_t>((*f.gt_disparity)[i]);
      if ((*f.unoccluded)[i] == 0.0) {
        ++occluded;
        continue;
      }
      ASSERT_GE(x - d, 0);
      for (int c = 0; c < 3; ++c) {
        EXPECT_EQ(f.left[c * 24 * 48 + i], f.right[c * 24 * 48 + y * 48 + x - d]);
      }
      ++checked;
    }
  }
  EXPECT_GT(checked, 900);
  EXPECT_GT(occluded, 0);  // the near plane hides part of the background in the right view
}

TEST(RenderFrame, PhotometricErrorVanishesAtGroundTruth) {
  auto scene = two_planes();
  LossConfig l1;
  l1.ssim_weight = 0.0;
  for (int t = 0; t < 3; ++t) {
    auto f = render_frame(scene, DomainSpec{}, t, 4);
    auto eps = reprojection_error_map(batched(*f.gt_disparity), f, l1);
    for (std::int64_t i = 0; i < eps.values.numel(); ++i) {
      if ((*f.unoccluded)[i] == 1.0 && eps.valid[i] == 1.0) {
        EXPECT_LT(eps.values[i], 1e-8);
      }
    }
  }
}

TEST(RenderFrame, Deterministic) {
  SceneRanges r;
  auto scene = random_scene(r, 5, 10);
  DomainSpec noisy{"x", 1.1, 1.2, 0.03, TextureFamily::fine};
  auto a = render_frame(scene, noisy, 3, 9);
  auto b = render_frame(scene, noisy, 3, 9);
  EXPECT_TRUE(same(a.left, b.left));
  EXPECT_TRUE(same(a.right, b.right));
  EXPECT_TRUE(same(*a.gt_disparity, *b.gt_disparity));
  auto c = render_frame(scene, noisy, 3, 10);
  EXPECT_FALSE(same(a.left, c.left));
}

TEST(RenderFrame, ImagesInUnitRange) {
  SceneRanges r;
  auto f = render_frame(random_scene(r, 6, 10), DomainSpec{"b", 1.3, 1.5, 0.05, TextureFamily::mixed}, 0, 2);
  for (double v : f.left.values()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(RenderFrame, GroundTruthWithinDepthRange) {
  SceneRanges r;
  for (std::uint64_t seed = 1; seed < 6; ++seed) {
    auto scene = random_scene(r, seed, 50);
    for (int t : {0, 25, 49}) {
      double zmin = 1e300, zmax = 0.0;
      for (const auto& s : scene.surfaces) {
        zmin = std::min(zmin, s.depth_at(t));
        zmax = std::max(zmax, s.depth_at(t));
      }
      const double fb = scene.focal * scene.baseline;
      auto f = render_frame(scene, DomainSpec{}, t, seed);
      for (std::int64_t i = 0; i < f.gt_disparity->numel(); ++i) {
        ASSERT_EQ(f.gt_valid[i], 1.0);
        // storage grid is 1/256 px
        EXPECT_GE((*f.gt_disparity)[i], fb / zmax - 1.0 / 512);
        EXPECT_LE((*f.gt_disparity)[i], fb / zmin + 1.0 / 512);
      }
    }
  }
}

TEST(RenderFrame, TemporalCoherence) {
  SceneRanges r;
  for (std::uint64_t seed = 1; seed < 6; ++seed) {
    auto seq = render_sequence({random_scene(r, seed, 30), DomainSpec{}}, "s", 30, seed);
    for (std::size_t t = 1; t < seq.size(); ++t) {
      const auto& a = *seq.frames[t - 1].gt_disparity;
      const auto& b = *seq.frames[t].gt_disparity;
      double diff = 0.0;
      for (std::int64_t i = 0; i < a.numel(); ++i) diff += std::fabs(a[i] - b[i]);
      EXPECT_LT(diff / a.numel(), 1.0) << "seed " << seed << " frame " << t;
    }
  }
}

TEST(RenderFrame, Sparsification) {
  SceneRanges r;
  RenderOptions sparse;
  sparse.gt_density = 0.2;
  auto f = render_frame(random_scene(r, 3, 5), DomainSpec{}, 0, 3, sparse);
  double kept = 0.0;
  for (std::int64_t i = 0; i < f.gt_valid.numel(); ++i) {
    kept += f.gt_valid[i];
    if (f.gt_valid[i] == 0.0) EXPECT_EQ((*f.gt_disparity)[i], 0.0);
  }
  const double frac = kept / f.gt_valid.numel();
  EXPECT_NEAR(frac, 0.2, 0.03);
}

TEST(RenderFrame, EmptySceneIsContractError) {
  SceneSpec scene;
  EXPECT_THROW(render_frame(scene, DomainSpec{}, 0, 0), ContractError);
}

TEST(RenderSequence, NeedsTwoFrames) {
  SceneRanges r;
  EXPECT_THROW(render_sequence({random_scene(r, 1, 1), DomainSpec{}}, "s", 1, 1), ContractError);
}

TEST(GenerateDataset, EmptySpecsIsError) { EXPECT_THROW(generate_dataset({}, 5, 1), ContractError); }

TEST(GenerateDataset, SameSeedIsBitIdentical) {
  SceneRanges r;
  std::vector<SequenceSpec> specs = {{random_scene(r, 1, 4), DomainSpec{"n", 1, 1, 0.02, TextureFamily::mixed}},
                                     {random_scene(r, 2, 4), DomainSpec{}}};
  auto a = generate_dataset(specs, 4, 7);
  auto b = generate_dataset(specs, 4, 7);
  ASSERT_EQ(a.sequences.size(), 2u);
  for (std::size_t s = 0; s < 2; ++s) {
    EXPECT_EQ(a.sequences[s].id, sequence_id(s));
    for (std::size_t t = 0; t < 4; ++t) {
      EXPECT_TRUE(same(a.sequences[s].frames[t].left, b.sequences[s].frames[t].left));
      EXPECT_TRUE(same(a.sequences[s].frames[t].right, b.sequences[s].frames[t].right));
    }
  }
}

TEST(GenerateDataset, DomainTagAudit) {
  SceneRanges r;
  DomainSpec a{"A", 0.8, 0.8, 0.0, TextureFamily::smooth}, b{"B", 1.2, 1.2, 0.0, TextureFamily::fine};
  auto train = generate_dataset({{random_scene(r, 1, 2), a}, {random_scene(r, 2, 2), a}}, 2, 1);
  auto test = generate_dataset({{random_scene(r, 3, 2), b}}, 2, 2);
  auto mixed = generate_dataset({{random_scene(r, 4, 2), b}, {random_scene(r, 5, 2), a}}, 2, 3);
  EXPECT_TRUE(domains_disjoint(train, test));
  EXPECT_FALSE(domains_disjoint(train, mixed));
  EXPECT_EQ(train.domain_tags(), (std::set<std::string>{"A"}));
}

TEST(TextureFamily, StringRoundTrip) {
  for (auto f : {TextureFamily::smooth, TextureFamily::fine, TextureFamily::mixed}) {
    EXPECT_EQ(texture_family_from_string(to_string(f)), f);
  }
  EXPECT_THROW(texture_family_from_string("plaid"), ConfigError);
}
