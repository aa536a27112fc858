#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "l2a/adapt.hpp"
#include "l2a/errors.hpp"
#include "l2a/meta.hpp"
#include "l2a/model.hpp"
#include "l2a/synthdata.hpp"

namespace l2a {

/// Dataset generation parameters for `gen-data`.
struct DataConfig {
  int sequences = 4;
  int frames = 100;
  DomainSpec domain;
  SceneRanges scene;
  double gt_density = 1.0;
};

/// Paths and run-level options.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string dataset;          // train or evaluation dataset directory
  std::string checkpoint;       // checkpoint read by adapt-eval, or initial weights for train
  std::string output = "out";
  std::string run_id = "run";
  int dump_every = 0;           // write Fig.-4 style panels every n frames (0 = never)
};

struct ExperimentConfig {
  NetConfig net;
  LossConfig loss;
  AdaptConfig adapt;
  MetaConfig meta;
  SupervisedConfig supervised;
  DataConfig data;
  RunConfig run;
};

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt(bool v) { return v ? "true" : "false"; }
inline std::string fmt(const std::string& v) { return v; }
template <class T>
  requires std::is_integral_v<T>
std::string fmt(T v) { return std::to_string(v); }

inline void parse(const std::string& s, double& out) {
  std::size_t used = 0;
  try { out = std::stod(s, &used); } catch (const std::exception&) { used = 0; }
  if (used != s.size() || s.empty()) throw ConfigError("expected a number, got '" + s + "'");
}
inline void parse(const std::string& s, bool& out) {
  if (s == "true" || s == "1") out = true;
  else if (s == "false" || s == "0") out = false;
  else throw ConfigError("expected true/false, got '" + s + "'");
}
inline void parse(const std::string& s, std::string& out) { out = s; }
template <class T>
  requires std::is_integral_v<T>
void parse(const std::string& s, T& out) {
  std::size_t used = 0;
  long long v = 0;
  try { v = std::stoll(s, &used); } catch (const std::exception&) { used = 0; }
  if (used != s.size() || s.empty()) throw ConfigError("expected an integer, got '" + s + "'");
  if constexpr (std::is_unsigned_v<T>) {
    if (v < 0) throw ConfigError("expected a non-negative integer, got '" + s + "'");
  }
  out = static_cast<T>(v);
}

struct Field {
  std::string key;  // section.name
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <class T>
Field field(std::string key, T& ref) {
  return {std::move(key), [&ref] { return fmt(ref); }, [&ref](const std::string& s) { parse(s, ref); }};
}

template <class E>
Field enum_field(std::string key, E& ref, std::vector<std::pair<std::string, E>> names) {
  return {std::move(key),
          [&ref, names] {
            for (const auto& [n, v] : names) if (v == ref) return n;
            return std::string("?");
          },
          [&ref, names, key](const std::string& s) {
            for (const auto& [n, v] : names) {
              if (n == s) { ref = v; return; }
            }
            throw ConfigError("invalid value '" + s + "' for " + key);
          }};
}

inline std::vector<Field> fields(ExperimentConfig& c) {
  std::vector<Field> f;
  f.push_back(field("net.height", c.net.height));
  f.push_back(field("net.width", c.net.width));
  f.push_back(field("net.base_channels", c.net.base_channels));
  f.push_back(field("net.max_disp", c.net.max_disp));
  f.push_back(field("net.disparity_scale", c.net.disparity_scale));
  f.push_back(field("net.confidence_bias", c.net.confidence_bias));
  f.push_back(field("loss.ssim_weight", c.loss.ssim_weight));
  f.push_back(field("loss.ssim_window", c.loss.ssim_window));
  f.push_back(field("adapt.alpha", c.adapt.alpha));
  f.push_back(field("adapt.momentum", c.adapt.momentum));
  f.push_back(enum_field("adapt.loss", c.adapt.adapt_loss,
                         {{"unsupervised", AdaptLoss::unsupervised}, {"supervised", AdaptLoss::supervised}}));
  f.push_back(field("adapt.mask_gradient", c.adapt.mask_gradient));
  f.push_back(enum_field("adapt.confidence_bn", c.adapt.confidence_bn,
                         {{"running", BatchNormMode::running_statistics},
                          {"batch", BatchNormMode::batch_statistics}}));
  f.push_back(field("meta.alpha", c.meta.alpha));
  f.push_back(field("meta.beta", c.meta.beta));
  f.push_back(field("meta.k", c.meta.k));
  f.push_back(field("meta.b", c.meta.b));
  f.push_back(field("meta.first_order", c.meta.first_order));
  f.push_back(field("meta.iterations", c.meta.iterations));
  f.push_back(field("meta.outer_momentum", c.meta.outer_momentum));
  f.push_back(field("meta.mask_gradient", c.meta.mask_gradient));
  f.push_back(enum_field("meta.inner_loss", c.meta.inner_loss,
                         {{"unsupervised", AdaptLoss::unsupervised}, {"supervised", AdaptLoss::supervised}}));
  f.push_back(field("supervised.iterations", c.supervised.iterations));
  f.push_back(field("supervised.learning_rate", c.supervised.learning_rate));
  f.push_back(field("supervised.momentum", c.supervised.momentum));
  f.push_back(field("supervised.batch", c.supervised.batch));
  f.push_back(enum_field("supervised.optimizer", c.supervised.optimizer,
                         {{"sgd", SupervisedOptimizer::sgd}, {"adam", SupervisedOptimizer::adam}}));
  f.push_back(field("data.sequences", c.data.sequences));
  f.push_back(field("data.frames", c.data.frames));
  f.push_back(field("data.domain", c.data.domain.tag));
  f.push_back(field("data.gain", c.data.domain.gain));
  f.push_back(field("data.contrast", c.data.domain.contrast));
  f.push_back(field("data.noise_sigma", c.data.domain.noise_sigma));
  f.push_back(enum_field("data.texture", c.data.domain.texture,
                         {{"smooth", TextureFamily::smooth}, {"fine", TextureFamily::fine},
                          {"mixed", TextureFamily::mixed}}));
  f.push_back(field("data.gt_density", c.data.gt_density));
  f.push_back(field("data.focal", c.data.scene.focal));
  f.push_back(field("data.baseline", c.data.scene.baseline));
  f.push_back(field("data.min_objects", c.data.scene.min_objects));
  f.push_back(field("data.max_objects", c.data.scene.max_objects));
  f.push_back(field("data.near_disparity", c.data.scene.near_disparity));
  f.push_back(field("data.far_disparity", c.data.scene.far_disparity));
  f.push_back(field("data.background_disparity", c.data.scene.background_disparity));
  f.push_back(field("data.max_speed", c.data.scene.max_speed));
  f.push_back(field("data.max_disparity_rate", c.data.scene.max_disparity_rate));
  f.push_back(field("run.seed", c.run.seed));
  f.push_back(field("run.dataset", c.run.dataset));
  f.push_back(field("run.checkpoint", c.run.checkpoint));
  f.push_back(field("run.output", c.run.output));
  f.push_back(field("run.run_id", c.run.run_id));
  f.push_back(field("run.dump_every", c.run.dump_every));
  return f;
}

}  // namespace detail

/// Sets one `section.key` entry; unknown keys are errors.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  for (auto& f : detail::fields(c)) {
    if (f.key == key) {
      try {
        f.set(value);
      } catch (const ConfigError& e) {
        throw ConfigError(key + ": " + e.what());
      }
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// Keeps the derived copies (grid size, loss) in step with their source sections.
inline void sync_config(ExperimentConfig& c) {
  c.adapt.loss = c.loss;
  c.meta.loss = c.loss;
  c.data.scene.height = c.net.height;
  c.data.scene.width = c.net.width;
}

inline ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>") {
  boost::property_tree::ptree tree;
  std::istringstream is(text);
  try {
    boost::property_tree::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(source + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  ExperimentConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError(source + ": key '" + section + "' must live inside a section");
    }
    for (const auto& [key, value] : body) {
      set_config_value(c, section + "." + key, value.data());
    }
  }
  sync_config(c);
  return c;
}

inline std::string serialize_config(const ExperimentConfig& in) {
  ExperimentConfig c = in;
  std::ostringstream os;
  std::string current;
  for (auto& f : detail::fields(c)) {
    const auto dot = f.key.find('.');
    const auto section = f.key.substr(0, dot);
    if (section != current) {
      if (!current.empty()) os << "\n";
      os << "[" << section << "]\n";
      current = section;
    }
    os << f.key.substr(dot + 1) << " = " << f.get() << "\n";
  }
  return os.str();
}

}  // namespace l2a
