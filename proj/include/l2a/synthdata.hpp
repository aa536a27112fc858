#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "l2a/errors.hpp"
#include "l2a/frame.hpp"

namespace l2a {

/// Textured fronto-parallel rectangle, positioned in left-image pixels.
struct Surface {
  double x = 0.0, y = 0.0;            // top-left corner at t = 0
  double width = 0.0, height = 0.0;
  double depth = 1.0;                 // Z at t = 0
  double vx = 0.0, vy = 0.0, vz = 0.0;  // per-frame drift
  std::uint64_t texture_seed = 0;

  double depth_at(int t) const { return depth + vz * t; }
};

struct SceneSpec {
  std::int64_t height = 64;
  std::int64_t width = 128;
  double focal = 100.0;
  double baseline = 0.5;
  // Rendered back to front by depth; add a covering plane for dense ground truth.
  std::vector<Surface> surfaces;
};

enum class TextureFamily { smooth, fine, mixed };

inline std::string to_string(TextureFamily f) {
  switch (f) {
    case TextureFamily::smooth: return "smooth";
    case TextureFamily::fine: return "fine";
    case TextureFamily::mixed: return "mixed";
  }
  return "?";
}

inline TextureFamily texture_family_from_string(const std::string& s) {
  if (s == "smooth") return TextureFamily::smooth;
  if (s == "fine") return TextureFamily::fine;
  if (s == "mixed") return TextureFamily::mixed;
  throw ConfigError("unknown texture family '" + s + "'");
}

struct DomainSpec {
  std::string tag = "neutral";
  double gain = 1.0;
  double contrast = 1.0;
  double noise_sigma = 0.0;
  TextureFamily texture = TextureFamily::mixed;
};

struct RenderOptions {
  // Fraction of ground-truth pixels kept; 1 is dense, 0.2 mimics sparse lidar.
  double gt_density = 1.0;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 step over the combined value
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E5Bull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

struct Wave {
  double fx, fy, phase, amp;
};

struct Texture {
  std::vector<Wave> waves;
  double tint[3];
  double offset[3];

  double value(int channel, double u, double v) const {
    double lum = 0.0;
    for (const auto& w : waves) {
      lum += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * u + w.fy * v) + w.phase);
    }
    return tint[channel] * (0.5 + lum) + offset[channel];
  }
};

inline Texture make_texture(std::uint64_t seed, TextureFamily family) {
  std::mt19937_64 rng(seed);
  double lo = 0.03, hi = 0.3;
  if (family == TextureFamily::smooth) hi = 0.12;
  if (family == TextureFamily::fine) lo = 0.1;
  std::uniform_real_distribution<double> freq(lo, hi);
  std::uniform_real_distribution<double> angle(-std::numbers::pi / 3.0, std::numbers::pi / 3.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Texture tex{};
  constexpr int kWaves = 6;
  double total = 0.0;
  for (int k = 0; k < kWaves; ++k) {
    // Orientation kept within 60 degrees of horizontal so every texture varies along x.
    const double f = freq(rng), a = angle(rng);
    tex.waves.push_back({f * std::cos(a), f * std::sin(a), phase(rng), 0.2 + unit(rng)});
    total += tex.waves.back().amp;
  }
  for (auto& w : tex.waves) w.amp *= 0.4 / total;
  for (int c = 0; c < 3; ++c) {
    tex.tint[c] = 0.6 + 0.4 * unit(rng);
    tex.offset[c] = 0.1 * unit(rng);
  }
  return tex;
}

inline double quantize(double v, double levels) { return std::round(v * levels) / levels; }

}  // namespace detail

/// Disparity of a surface at frame t, on the 1/256 grid used for storage.
inline double surface_disparity(const SceneSpec& scene, const Surface& s, int t) {
  const double z = s.depth_at(t);
  if (!(z > 0.0)) throw ContractError("render_frame: surface depth must stay positive");
  return detail::quantize(scene.focal * scene.baseline / z, 256.0);
}

inline StereoFrame render_frame(const SceneSpec& scene, const DomainSpec& domain, int t,
                                std::uint64_t seed, const RenderOptions& options = {}) {
  const auto h = scene.height, w = scene.width;
  if (h <= 0 || w < 2) throw ContractError("render_frame: image must be at least 1x2");
  if (scene.surfaces.empty()) throw ContractError("render_frame: scene has no surfaces");

  const std::size_t ns = scene.surfaces.size();
  std::vector<double> disp(ns), sx(ns), sy(ns);
  std::vector<detail::Texture> tex;
  for (std::size_t i = 0; i < ns; ++i) {
    const auto& s = scene.surfaces[i];
    disp[i] = surface_disparity(scene, s, t);
    sx[i] = s.x + s.vx * t;
    sy[i] = s.y + s.vy * t;
    tex.push_back(detail::make_texture(s.texture_seed, domain.texture));
  }
  // Nearest surface covering left-frame point (u, y); ties go to the lower index.
  auto owner = [&](double u, double y, bool right_view) {
    int best = -1;
    double best_z = 0.0;
    for (std::size_t i = 0; i < ns; ++i) {
      const auto& s = scene.surfaces[i];
      const double ul = right_view ? u + disp[i] : u;
      if (ul < sx[i] || ul >= sx[i] + s.width || y < sy[i] || y >= sy[i] + s.height) continue;
      const double z = s.depth_at(t);
      if (best < 0 || z < best_z) {
        best = static_cast<int>(i);
        best_z = z;
      }
    }
    return best;
  };

  const auto plane = h * w;
  std::vector<double> left(static_cast<std::size_t>(3 * plane), 0.0);
  std::vector<double> right(left.size(), 0.0);
  std::vector<double> gt(static_cast<std::size_t>(plane), 0.0);
  std::vector<double> valid(gt.size(), 0.0);
  std::vector<double> visible(gt.size(), 0.0);
  std::vector<int> right_owner(gt.size(), -1);

  std::mt19937_64 noise_rng(detail::mix_seed(seed, static_cast<std::uint64_t>(t)));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> keep(0.0, 1.0);

  auto shade = [&](double v, double n) {
    v = domain.gain * (0.5 + domain.contrast * (v - 0.5)) + domain.noise_sigma * n;
    return detail::quantize(std::clamp(v, 0.0, 1.0), 255.0);
  };

  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const auto idx = static_cast<std::size_t>(y * w + x);
      const int r = owner(static_cast<double>(x), static_cast<double>(y), true);
      right_owner[idx] = r;
      const int l = owner(static_cast<double>(x), static_cast<double>(y), false);
      for (int c = 0; c < 3; ++c) {
        const auto ci = static_cast<std::size_t>(c * plane) + idx;
        const double nl = domain.noise_sigma > 0.0 ? noise(noise_rng) : 0.0;
        const double nr = domain.noise_sigma > 0.0 ? noise(noise_rng) : 0.0;
        if (l >= 0) {
          left[ci] = shade(tex[l].value(c, x - sx[l], y - sy[l]), nl);
        }
        if (r >= 0) {
          right[ci] = shade(tex[r].value(c, x + disp[r] - sx[r], y - sy[r]), nr);
        }
      }
      if (l >= 0) {
        gt[idx] = disp[l];
        valid[idx] = 1.0;
      }
    }
  }
  // Visible in both views: every right pixel the warp would read shows the same surface.
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const auto idx = static_cast<std::size_t>(y * w + x);
      if (valid[idx] == 0.0) continue;
      const int l = owner(static_cast<double>(x), static_cast<double>(y), false);
      const double xs = static_cast<double>(x) - gt[idx];
      if (xs < 0.0) continue;
      const auto x0 = static_cast<std::int64_t>(std::floor(xs));
      const bool frac = xs > static_cast<double>(x0);
      bool ok = right_owner[static_cast<std::size_t>(y * w + x0)] == l;
      if (frac) ok = ok && x0 + 1 < w && right_owner[static_cast<std::size_t>(y * w + x0 + 1)] == l;
      visible[idx] = ok ? 1.0 : 0.0;
    }
  }
  if (options.gt_density < 1.0) {
    std::mt19937_64 mask_rng(detail::mix_seed(seed ^ 0xA5A5A5A5ull, static_cast<std::uint64_t>(t)));
    for (auto& v : valid) {
      if (keep(mask_rng) >= options.gt_density) v = 0.0;
    }
    for (std::size_t i = 0; i < valid.size(); ++i) {
      if (valid[i] == 0.0) gt[i] = 0.0;
    }
  }

  StereoFrame f;
  f.left = Tensor({3, h, w}, std::move(left));
  f.right = Tensor({3, h, w}, std::move(right));
  f.gt_disparity = Tensor({1, h, w}, std::move(gt));
  f.gt_valid = Tensor({1, h, w}, std::move(valid));
  f.unoccluded = Tensor({1, h, w}, std::move(visible));
  return f;
}

struct Dataset {
  std::vector<Sequence> sequences;
  bool supervised = true;

  std::set<std::string> domain_tags() const {
    std::set<std::string> tags;
    for (const auto& s : sequences) tags.insert(s.domain);
    return tags;
  }
};

struct SequenceSpec {
  SceneSpec scene;
  DomainSpec domain;
};

inline Sequence render_sequence(const SequenceSpec& spec, const std::string& id, int frames,
                                std::uint64_t seed, const RenderOptions& options = {}) {
  if (frames < 2) throw ContractError("render_sequence: a sequence needs at least 2 frames");
  Sequence seq;
  seq.id = id;
  seq.domain = spec.domain.tag;
  for (int t = 0; t < frames; ++t) seq.frames.push_back(render_frame(spec.scene, spec.domain, t, seed, options));
  return seq;
}

inline std::string sequence_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "seq%03zu", index);
  return buf;
}

inline Dataset generate_dataset(const std::vector<SequenceSpec>& specs, int frames_per_sequence,
                                std::uint64_t seed, const RenderOptions& options = {}) {
  if (specs.empty()) throw ContractError("generate_dataset: no sequence specs given");
  Dataset ds;
  ds.supervised = true;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    ds.sequences.push_back(render_sequence(specs[i], sequence_id(i), frames_per_sequence,
                                           detail::mix_seed(seed, i), options));
  }
  return ds;
}

/// True when no domain tag appears on both sides of a split.
inline bool domains_disjoint(const Dataset& a, const Dataset& b) {
  auto ta = a.domain_tags();
  for (const auto& t : b.domain_tags()) {
    if (ta.count(t)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Random scene layouts.

struct SceneRanges {
  std::int64_t height = 64;
  std::int64_t width = 128;
  double focal = 100.0;
  double baseline = 0.5;
  int min_objects = 2;
  int max_objects = 5;
  double near_disparity = 12.0;  // largest object disparity, px
  double far_disparity = 3.0;    // smallest object disparity, px
  double background_disparity = 1.0;
  double max_speed = 0.4;        // px per frame
  double max_disparity_rate = 0.03;  // px per frame
};

inline SceneSpec random_scene(const SceneRanges& r, std::uint64_t seed, int frames) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double fb = r.focal * r.baseline;
  SceneSpec s;
  s.height = r.height;
  s.width = r.width;
  s.focal = r.focal;
  s.baseline = r.baseline;
  // Background wide enough to stay covering while shifted by its disparity.
  Surface bg;
  bg.x = -4.0 * r.width;
  bg.y = -4.0 * r.height;
  bg.width = 9.0 * r.width;
  bg.height = 9.0 * r.height;
  bg.depth = fb / r.background_disparity;
  bg.texture_seed = rng();
  s.surfaces.push_back(bg);
  std::uniform_int_distribution<int> count(r.min_objects, r.max_objects);
  const int n = count(rng);
  for (int i = 0; i < n; ++i) {
    Surface o;
    o.width = r.width * (0.15 + 0.3 * unit(rng));
    o.height = r.height * (0.25 + 0.5 * unit(rng));
    o.x = -0.1 * r.width + unit(rng) * (1.1 * r.width - o.width);
    o.y = -0.1 * r.height + unit(rng) * (1.1 * r.height - o.height);
    const double d0 = r.far_disparity + unit(rng) * (r.near_disparity - r.far_disparity);
    o.depth = fb / d0;
    o.vx = (2.0 * unit(rng) - 1.0) * r.max_speed;
    o.vy = (2.0 * unit(rng) - 1.0) * r.max_speed * 0.5;
    // Drift disparity linearly in time but keep it inside the configured band.
    double rate = (2.0 * unit(rng) - 1.0) * r.max_disparity_rate;
    const double d_end = std::clamp(d0 + rate * frames, r.far_disparity, r.near_disparity);
    rate = frames > 0 ? (d_end - d0) / frames : 0.0;
    // Depth drift that reproduces that disparity change by the last frame.
    o.vz = frames > 0 ? (fb / (d0 + rate * frames) - o.depth) / frames : 0.0;
    o.texture_seed = rng();
    s.surfaces.push_back(o);
  }
  return s;
}

}  // namespace l2a
