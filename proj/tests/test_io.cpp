#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "l2a/config.hpp"
#include "l2a/io.hpp"
#include "test_util.hpp"

using namespace l2a;
namespace fs = std::filesystem;
namespace lt = l2a::testing;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("l2a_test_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

Dataset small_dataset(std::uint64_t seed, RenderOptions opts = {}) {
  SceneRanges r;
  r.height = 16;
  r.width = 32;
  std::vector<SequenceSpec> specs = {{random_scene(r, seed, 3), DomainSpec{"A", 0.9, 1.1, 0.01, TextureFamily::smooth}},
                                     {random_scene(r, seed + 1, 3), DomainSpec{"B", 1.0, 1.0, 0.0, TextureFamily::fine}}};
  return generate_dataset(specs, 3, seed, opts);
}

}  // namespace

TEST(Netpbm, RgbRoundTripIsLossless) {
  auto dir = scratch_dir("ppm");
  SceneRanges r;
  auto f = render_frame(random_scene(r, 1, 2), DomainSpec{"x", 1.1, 1.3, 0.02, TextureFamily::mixed}, 0, 1);
  io::write_ppm(dir / "a.ppm", f.left);
  EXPECT_TRUE(same(io::read_ppm(dir / "a.ppm"), f.left));
}

TEST(Netpbm, DisparityRoundTripKeepsValidity) {
  auto dir = scratch_dir("pgm");
  SceneRanges r;
  RenderOptions sparse;
  sparse.gt_density = 0.3;
  auto f = render_frame(random_scene(r, 2, 2), DomainSpec{}, 0, 1, sparse);
  io::write_disparity_pgm(dir / "d.pgm", *f.gt_disparity, f.gt_valid);
  auto [d, v] = io::read_disparity_pgm(dir / "d.pgm");
  EXPECT_TRUE(same(d, *f.gt_disparity));
  EXPECT_TRUE(same(v, f.gt_valid));
}

TEST(Netpbm, MissingFileIsIoError) { EXPECT_THROW(io::read_ppm("/nonexistent/x.ppm"), IoError); }

TEST(Dataset, SaveLoadRoundTrip) {
  auto dir = scratch_dir("ds");
  auto ds = small_dataset(3);
  io::save_dataset(dir, ds);
  auto back = io::load_dataset(dir);
  ASSERT_EQ(back.sequences.size(), ds.sequences.size());
  EXPECT_TRUE(back.supervised);
  for (std::size_t s = 0; s < ds.sequences.size(); ++s) {
    EXPECT_EQ(back.sequences[s].id, ds.sequences[s].id);
    EXPECT_EQ(back.sequences[s].domain, ds.sequences[s].domain);
    ASSERT_EQ(back.sequences[s].size(), ds.sequences[s].size());
    for (std::size_t t = 0; t < ds.sequences[s].size(); ++t) {
      const auto& a = ds.sequences[s].frames[t];
      const auto& b = back.sequences[s].frames[t];
      EXPECT_TRUE(same(a.left, b.left));
      EXPECT_TRUE(same(a.right, b.right));
      EXPECT_TRUE(same(*a.gt_disparity, *b.gt_disparity));
      EXPECT_TRUE(same(a.gt_valid, b.gt_valid));
      EXPECT_TRUE(same(*a.unoccluded, *b.unoccluded));
    }
  }
}

TEST(Dataset, SameSeedGivesByteIdenticalFiles) {
  auto a = scratch_dir("bytes_a"), b = scratch_dir("bytes_b");
  io::save_dataset(a, small_dataset(5));
  io::save_dataset(b, small_dataset(5));
  int files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 1 + 2 * 3 * 4);
}

TEST(Dataset, ManifestListsEverySequenceWithDomain) {
  auto dir = scratch_dir("manifest");
  auto ds = small_dataset(7);
  io::save_dataset(dir, ds);
  auto entries = io::read_manifest(dir);
  ASSERT_EQ(entries.size(), ds.sequences.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    EXPECT_EQ(entries[i].id, ds.sequences[i].id);
    EXPECT_EQ(entries[i].values.at("domain"), ds.sequences[i].domain);
    EXPECT_EQ(entries[i].values.at("frames"), "3");
  }
}

TEST(Dataset, MissingManifestIsIoError) {
  EXPECT_THROW(io::load_dataset(scratch_dir("empty")), IoError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  NetConfig c;
  c.base_channels = 6;
  c.max_disp = 12;
  c.disparity_scale = 3.3;
  io::Checkpoint ck;
  ck.theta = init_disparity_net(c, 4);
  // perturb so values are not just the init distribution
  std::mt19937_64 rng(1);
  auto t = ck.theta.theta.tensors();
  t[0] = lt::random_tensor(rng, t[0].shape(), -1e-300, 1e300);
  ck.theta.theta = ck.theta.theta.with_tensors(t);
  ck.eta = init_confidence_net(5, 1.5);
  ck.provenance = {{"command", "train"}, {"iterations", "12"}};
  auto bytes = io::serialize_checkpoint(ck);
  auto back = io::deserialize_checkpoint(bytes);
  EXPECT_TRUE(back.theta.theta.bit_equal(ck.theta.theta));
  EXPECT_TRUE(back.eta->eta.bit_equal(ck.eta->eta));
  EXPECT_TRUE(back.eta->buffers.bit_equal(ck.eta->buffers));
  EXPECT_EQ(back.theta.config.base_channels, 6);
  EXPECT_EQ(back.theta.config.max_disp, 12);
  EXPECT_EQ(back.theta.config.disparity_scale, 3.3);
  EXPECT_EQ(back.provenance.at("command"), "train");
  EXPECT_EQ(io::serialize_checkpoint(back), bytes);

  auto dir = scratch_dir("ckpt");
  io::save_checkpoint(dir / "a.ckpt", ck);
  EXPECT_TRUE(io::load_checkpoint(dir / "a.ckpt").theta.theta.bit_equal(ck.theta.theta));
}

TEST(Checkpoint, ThetaOnly) {
  io::Checkpoint ck;
  ck.theta = init_disparity_net(NetConfig{}, 1);
  auto back = io::deserialize_checkpoint(io::serialize_checkpoint(ck));
  EXPECT_FALSE(back.eta.has_value());
}

TEST(Checkpoint, CorruptInputIsIoError) {
  io::Checkpoint ck;
  ck.theta = init_disparity_net(NetConfig{}, 1);
  auto bytes = io::serialize_checkpoint(ck);
  EXPECT_THROW(io::deserialize_checkpoint("not a checkpoint"), IoError);
  EXPECT_THROW(io::deserialize_checkpoint(bytes.substr(0, bytes.size() / 2)), IoError);
  auto bad_version = bytes;
  bad_version[8] = 99;
  EXPECT_THROW(io::deserialize_checkpoint(bad_version), IoError);
}

TEST(Config, RoundTripIsLossless) {
  ExperimentConfig c;
  c.net.base_channels = 8;
  c.adapt.alpha = 1.0 / 3.0;
  c.meta.weighted = true;
  c.meta.inner_loss = AdaptLoss::unsupervised;
  c.supervised.optimizer = SupervisedOptimizer::adam;
  c.data.domain.texture = TextureFamily::fine;
  c.data.domain.tag = "B-sunny";
  c.run.seed = 1234567890123ull;
  const auto text = serialize_config(c);
  auto back = parse_config(text);
  EXPECT_EQ(serialize_config(back), text);
  EXPECT_EQ(back.adapt.alpha, 1.0 / 3.0);
  EXPECT_EQ(back.run.seed, 1234567890123ull);
  EXPECT_EQ(back.data.domain.texture, TextureFamily::fine);
}

TEST(Config, UnknownKeyIsConfigError) {
  EXPECT_THROW(parse_config("[adapt]\nalpah = 0.1\n"), ConfigError);
  EXPECT_THROW(parse_config("[nosuch]\nalpha = 0.1\n"), ConfigError);
}

TEST(Config, BadValuesAreConfigErrors) {
  EXPECT_THROW(parse_config("[adapt]\nalpha = fast\n"), ConfigError);
  EXPECT_THROW(parse_config("[meta]\nk = 2.5\n"), ConfigError);
  EXPECT_THROW(parse_config("[data]\ntexture = plaid\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\nseed = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("[adapt\nalpha = 1\n"), ConfigError);
}

TEST(Config, SyncCopiesSharedFields) {
  auto c = parse_config("[net]\nheight = 32\nwidth = 96\n[loss]\nssim_weight = 0.25\n");
  EXPECT_EQ(c.adapt.loss.ssim_weight, 0.25);
  EXPECT_EQ(c.meta.loss.ssim_weight, 0.25);
  EXPECT_EQ(c.data.scene.height, 32);
  EXPECT_EQ(c.data.scene.width, 96);
}
