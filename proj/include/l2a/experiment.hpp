#pragma once

// Desk-scale benchmark: neutral pretraining, training on domain A, evaluation
// on the disjoint domain B with measure-then-adapt on every frame.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "l2a/adapt.hpp"
#include "l2a/eval.hpp"
#include "l2a/meta.hpp"
#include "l2a/model.hpp"
#include "l2a/synthdata.hpp"

namespace l2a::bench {

struct DomainPreset {
  DomainSpec domain;
  SceneRanges scene;
};

inline DomainPreset neutral_domain() {
  DomainPreset p;
  p.domain = {"neutral", 1.0, 1.0, 0.0, TextureFamily::mixed};
  p.scene.near_disparity = 12.0;
  p.scene.far_disparity = 2.0;
  return p;
}

/// Training domain: dim, low contrast, smooth textures.
inline DomainPreset domain_a() {
  DomainPreset p;
  p.domain = {"A-overcast", 0.8, 0.8, 0.01, TextureFamily::smooth};
  p.scene.near_disparity = 12.0;
  p.scene.far_disparity = 2.0;
  return p;
}

/// Test domain: bright, high contrast, fine textures, closer objects.
inline DomainPreset domain_b() {
  DomainPreset p;
  p.domain = {"B-sunny", 1.15, 1.3, 0.02, TextureFamily::fine};
  p.scene.near_disparity = 16.0;
  p.scene.far_disparity = 3.0;
  return p;
}

inline Dataset make_dataset(const DomainPreset& preset, int sequences, int frames, std::uint64_t seed,
                            std::int64_t height = 64, std::int64_t width = 128) {
  auto ranges = preset.scene;
  ranges.height = height;
  ranges.width = width;
  std::vector<SequenceSpec> specs;
  for (int i = 0; i < sequences; ++i) {
    specs.push_back({random_scene(ranges, detail::mix_seed(seed, 1000 + static_cast<std::uint64_t>(i)), frames),
                     preset.domain});
  }
  return generate_dataset(specs, frames, seed);
}

struct BenchConfig {
  NetConfig net;
  // Shared neutral pretraining (stand-in for a synthetic pretraining corpus).
  int pretrain_sequences = 8;
  int pretrain_frames = 50;
  SupervisedConfig pretrain{1000, 2e-3, 0.9, 4, SupervisedOptimizer::adam};
  std::uint64_t pretrain_seed = 1;
  // Per-seed data.
  int train_sequences = 8;
  int test_sequences = 4;
  int frames = 100;
  // Meta-training; SL gets the same number of supervised gradient terms
  // (b*k per iteration) at the same per-term step size.
  MetaConfig meta;
  AdaptConfig test_adapt;

  BenchConfig() {
    net.base_channels = 8;
    meta.alpha = 1e-5;
    meta.beta = 1e-4;
    meta.k = 3;
    meta.b = 4;
    meta.iterations = 40;
    test_adapt.alpha = 1e-4;
    test_adapt.momentum = 0.9;
  }

  SupervisedConfig matched_supervised() const {
    SupervisedConfig s;
    s.iterations = meta.iterations;
    s.batch = meta.b * meta.k;
    s.learning_rate = meta.beta * meta.b * meta.k;  // mean over the batch, so scale up
    s.momentum = meta.outer_momentum;
    s.optimizer = SupervisedOptimizer::sgd;
    return s;
  }
};

inline DisparityParams pretrain(const BenchConfig& cfg) {
  auto data = make_dataset(neutral_domain(), cfg.pretrain_sequences, cfg.pretrain_frames, cfg.pretrain_seed,
                           cfg.net.height, cfg.net.width);
  auto theta0 = init_disparity_net(cfg.net, cfg.pretrain_seed);
  return train_supervised(data, theta0, cfg.pretrain, cfg.pretrain_seed).theta;
}

/// Per-frame records of every sequence in a dataset.
inline std::vector<MetricsRecord> evaluate(const DisparityParams& theta, const ConfidenceParams* conf,
                                           const Dataset& data, const AdaptConfig& cfg) {
  std::vector<MetricsRecord> all;
  for (const auto& seq : data.sequences) {
    auto r = run_sequence(theta, conf, seq, cfg);
    all.insert(all.end(), r.begin(), r.end());
  }
  return all;
}

struct SeedResult {
  // Method name -> per-frame records on domain B.
  std::map<std::string, std::vector<MetricsRecord>> runs;
  bool disjoint_domains = false;

  AggregateReport report(const std::string& method) const { return aggregate(runs.at(method)); }
};

inline const char* const kMethodSL = "SL";
inline const char* const kMethodSLAd = "SL+Ad";
inline const char* const kMethodL2AWAd = "L2A+WAd";
inline const char* const kMethodSLAdSup = "SL+Ad(sup)";
inline const char* const kMethodL2AAdSup = "L2A+Ad(sup)";

/// Trains SL and L2A variants on domain A from `base`, evaluates on domain B.
/// `supervised_ablation` adds the L_u = L_s pair.
inline SeedResult run_seed(const BenchConfig& cfg, const DisparityParams& base, std::uint64_t seed,
                           bool headline = true, bool supervised_ablation = true) {
  auto train = make_dataset(domain_a(), cfg.train_sequences, cfg.frames, detail::mix_seed(seed, 1),
                            cfg.net.height, cfg.net.width);
  auto test = make_dataset(domain_b(), cfg.test_sequences, cfg.frames, detail::mix_seed(seed, 2),
                           cfg.net.height, cfg.net.width);
  SeedResult out;
  out.disjoint_domains = domains_disjoint(train, test);

  auto sl = train_supervised(train, base, cfg.matched_supervised(), detail::mix_seed(seed, 3)).theta;
  AdaptConfig frozen = cfg.test_adapt;
  frozen.alpha = 0.0;
  if (headline) {
    out.runs[kMethodSL] = evaluate(sl, nullptr, test, frozen);
    out.runs[kMethodSLAd] = evaluate(sl, nullptr, test, cfg.test_adapt);

    auto meta = cfg.meta;
    meta.weighted = true;
    meta.inner_loss = AdaptLoss::unsupervised;
    auto conf0 = init_confidence_net(detail::mix_seed(seed, 4), cfg.net.confidence_bias);
    auto l2a = train_meta(train, base, conf0, meta, detail::mix_seed(seed, 5));
    AdaptConfig wad = cfg.test_adapt;
    wad.weighted = true;
    out.runs[kMethodL2AWAd] = evaluate(l2a.theta, &*l2a.eta, test, wad);
  }
  if (supervised_ablation) {
    AdaptConfig sup = cfg.test_adapt;
    sup.adapt_loss = AdaptLoss::supervised;
    out.runs[kMethodSLAdSup] = evaluate(sl, nullptr, test, sup);
    auto meta = cfg.meta;
    meta.weighted = false;
    meta.inner_loss = AdaptLoss::supervised;
    auto l2a = train_meta(train, base, std::nullopt, meta, detail::mix_seed(seed, 6));
    out.runs[kMethodL2AAdSup] = evaluate(l2a.theta, nullptr, test, sup);
  }
  return out;
}

}  // namespace l2a::bench
