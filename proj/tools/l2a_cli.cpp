// Command-line driver: dataset generation, training, adaptation runs and
// method comparison.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "l2a/adapt.hpp"
#include "l2a/config.hpp"
#include "l2a/eval.hpp"
#include "l2a/io.hpp"
#include "l2a/meta.hpp"
#include "l2a/synthdata.hpp"

using namespace l2a;
namespace fs = std::filesystem;

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  std::string dataset;
  std::string checkpoint;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "configuration file (INI sections)");
  cmd->add_option("--seed", o.seed, "random seed (overrides run.seed)");
  cmd->add_option("--out", o.out, "output directory (overrides run.output)");
  cmd->add_option("--set", o.overrides, "override a config entry, section.key=value")->take_all();
}

ExperimentConfig load_config(const CommonOptions& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : parse_config(io::read_text(o.config_path), o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) c.run.seed = *o.seed;
  if (!o.out.empty()) c.run.output = o.out;
  if (!o.dataset.empty()) c.run.dataset = o.dataset;
  if (!o.checkpoint.empty()) c.run.checkpoint = o.checkpoint;
  sync_config(c);
  c.net.validate();
  c.loss.validate();
  return c;
}

void write_file(const fs::path& p, const std::string& text) {
  auto os = io::open_out(p);
  os << text;
  if (!os) throw IoError("write failed: " + p.string());
}

std::string config_hash(const ExperimentConfig& c) { return io::fnv1a_hex(serialize_config(c)); }

void require_resolution(const Dataset& data, const NetConfig& net) {
  for (const auto& s : data.sequences) {
    for (const auto& f : s.frames) {
      if (f.height() != net.height || f.width() != net.width) {
        throw ConfigError("dataset frames are " + std::to_string(f.height()) + "x" + std::to_string(f.width()) +
                          " but the network expects " + std::to_string(net.height) + "x" +
                          std::to_string(net.width));
      }
    }
  }
}

Dataset load_data(const ExperimentConfig& c) {
  if (c.run.dataset.empty()) throw ConfigError("no dataset given (run.dataset or --data)");
  return io::load_dataset(c.run.dataset);
}

// gen-data ---------------------------------------------------------------------

void cmd_gen_data(const ExperimentConfig& c) {
  if (c.data.sequences < 1) throw ConfigError("data.sequences must be >= 1");
  if (c.data.frames < 2) throw ConfigError("data.frames must be >= 2");
  if (!(c.data.gt_density > 0.0 && c.data.gt_density <= 1.0)) throw ConfigError("data.gt_density must lie in (0,1]");
  std::vector<SequenceSpec> specs;
  std::vector<io::SequenceProvenance> prov;
  for (int i = 0; i < c.data.sequences; ++i) {
    specs.push_back({random_scene(c.data.scene, detail::mix_seed(c.run.seed, 1000 + static_cast<std::uint64_t>(i)),
                                  c.data.frames),
                     c.data.domain});
    prov.push_back({specs.back(), detail::mix_seed(c.run.seed, static_cast<std::uint64_t>(i))});
  }
  RenderOptions opts;
  opts.gt_density = c.data.gt_density;
  auto ds = generate_dataset(specs, c.data.frames, c.run.seed, opts);
  const fs::path out = c.run.output;
  io::save_dataset(out, ds, prov);
  write_file(out / "config.ini", serialize_config(c));
  std::cout << "wrote " << ds.sequences.size() << " sequences (" << c.data.domain.tag << ") to " << out.string()
            << "\n";
}

// train ------------------------------------------------------------------------

void cmd_train(const ExperimentConfig& c, const std::string& mode) {
  if (mode != "sl" && mode != "l2a" && mode != "l2a-weighted") {
    throw ConfigError("unknown training mode '" + mode + "'");
  }
  auto data = load_data(c);
  io::Checkpoint ck;
  if (!c.run.checkpoint.empty()) {
    ck = io::load_checkpoint(c.run.checkpoint);
  } else {
    ck.theta = init_disparity_net(c.net, c.run.seed);
  }
  require_resolution(data, ck.theta.config);

  TrainResult r;
  const fs::path out = c.run.output;
  auto progress = [](const TrainLogEntry& e) {
    if ((e.iteration + 1) % 10 == 0) std::fprintf(stderr, "iteration %d loss %.6f\n", e.iteration + 1, e.loss);
  };
  int iterations = 0;
  if (mode == "sl") {
    iterations = c.supervised.iterations;
    r = train_supervised(data, ck.theta, c.supervised, c.run.seed, progress);
    r.eta = ck.eta;
  } else {
    MetaConfig meta = c.meta;
    meta.weighted = mode == "l2a-weighted";
    if (meta.weighted && meta.inner_loss == AdaptLoss::supervised) {
      throw ConfigError("mode l2a-weighted needs meta.inner_loss = unsupervised");
    }
    std::optional<ConfidenceParams> eta = ck.eta;
    if (meta.weighted && !eta) eta = init_confidence_net(detail::mix_seed(c.run.seed, 77), c.net.confidence_bias);
    iterations = meta.iterations;
    r = train_meta(data, ck.theta, eta, meta, c.run.seed, progress);
    if (!meta.weighted) r.eta = ck.eta;
  }
  io::Checkpoint result;
  result.theta = r.theta;
  result.eta = r.eta;
  result.provenance = ck.provenance;
  result.provenance["command"] = "train";
  result.provenance["mode"] = mode;
  result.provenance["config_hash"] = config_hash(c);
  result.provenance["seed"] = std::to_string(c.run.seed);
  const auto prior = ck.provenance.count("iterations") ? std::stoll(ck.provenance["iterations"]) : 0LL;
  result.provenance["iterations"] = std::to_string(prior + iterations);
  io::save_checkpoint(out / "checkpoint.ckpt", result);

  std::ostringstream log;
  log << "iteration,loss,wall_seconds\n";
  for (const auto& e : r.log) log << e.iteration << ',' << format_double(e.loss) << ',' << format_double(e.wall_seconds) << '\n';
  write_file(out / "train_log.csv", log.str());
  write_file(out / "config.ini", serialize_config(c));
  std::cout << "trained " << mode << " for " << iterations << " iterations; checkpoint "
            << (out / "checkpoint.ckpt").string() << "\n";
}

// adapt-eval -------------------------------------------------------------------

void dump_panels(const fs::path& dir, const Sequence& seq, std::size_t t, const StepTrace& tr) {
  const fs::path d = dir / seq.id;
  const auto& f = seq.frames[t];
  double dmax = 1.0;
  for (double v : f.gt_disparity->values()) dmax = std::max(dmax, v);
  io::write_gray_pgm(d / io::frame_name("pred", t, "pgm"), tr.disparity, dmax);
  if (!tr.error) return;
  const auto& eps = tr.error->values;
  double emax = 0.0;
  for (double v : eps.values()) emax = std::max(emax, v);
  io::write_gray_pgm(d / io::frame_name("error", t, "pgm"), eps, emax);
  if (!tr.mask) return;
  io::write_gray_pgm(d / io::frame_name("confidence", t, "pgm"), tr.mask->raw, 1.0);
  NoGradGuard ng;
  io::write_gray_pgm(d / io::frame_name("weighted_error", t, "pgm"), mul(tr.mask->raw, eps), emax);
}

void cmd_adapt_eval(ExperimentConfig c, const std::string& adaptation) {
  if (adaptation != "none" && adaptation != "ad" && adaptation != "wad") {
    throw ConfigError("unknown adaptation '" + adaptation + "'");
  }
  if (c.run.checkpoint.empty()) throw ConfigError("no checkpoint given (run.checkpoint or --checkpoint)");
  auto ck = io::load_checkpoint(c.run.checkpoint);
  auto data = load_data(c);
  require_resolution(data, ck.theta.config);
  AdaptConfig cfg = c.adapt;
  if (adaptation == "none") cfg.alpha = 0.0;
  cfg.weighted = adaptation == "wad";
  if (cfg.weighted && cfg.adapt_loss == AdaptLoss::unsupervised && !ck.eta) {
    throw ConfigError("adaptation wad needs a checkpoint with confidence parameters");
  }
  const ConfidenceParams* conf = ck.eta ? &*ck.eta : nullptr;
  const fs::path out = c.run.output;
  const std::string run_id = c.run.run_id;

  std::vector<MetricsRecord> all;
  for (const auto& seq : data.sequences) {
    FrameObserver obs;
    if (c.run.dump_every > 0) {
      obs = [&](std::size_t t, const MetricsRecord&, const StepTrace& tr) {
        if (t % static_cast<std::size_t>(c.run.dump_every) == 0) dump_panels(out / "panels", seq, t, tr);
      };
    }
    auto recs = run_sequence(ck.theta, conf, seq, cfg, obs);
    all.insert(all.end(), recs.begin(), recs.end());
  }
  auto rep = aggregate(all);
  std::ostringstream m, r, cv;
  write_metrics_csv(m, run_id, all);
  write_report_csv(r, rep);
  write_curve_csv(cv, rep);
  write_file(out / "metrics.csv", m.str());
  write_file(out / "report.csv", r.str());
  write_file(out / "curve.csv", cv.str());
  write_file(out / "config.ini", serialize_config(c));
  std::printf("%s: D1-all %.4f  EPE %.4f over %zu sequences\n", run_id.c_str(), rep.d1_all, rep.epe,
              rep.sequences.size());
}

// compare ----------------------------------------------------------------------

std::pair<std::string, std::vector<MetricsRecord>> read_metrics(const fs::path& run_dir) {
  const auto path = fs::is_directory(run_dir) ? run_dir / "metrics.csv" : run_dir;
  auto is = io::open_in(path);
  std::string line;
  std::getline(is, line);
  if (line != "run_id,sequence,frame,epe,d1_all,valid_pixels") throw IoError(path.string() + ": unexpected header");
  std::string run_id;
  std::vector<MetricsRecord> recs;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 6) throw IoError(path.string() + ": malformed row '" + line + "'");
    if (run_id.empty()) run_id = cells[0];
    MetricsRecord r;
    r.sequence = cells[1];
    r.frame = std::stoll(cells[2]);
    r.epe = std::stod(cells[3]);
    r.d1_all = std::stod(cells[4]);
    r.valid_pixels = std::stoll(cells[5]);
    recs.push_back(r);
  }
  if (recs.empty()) throw IoError(path.string() + ": no metrics rows");
  return {run_id, recs};
}

void cmd_compare(const ExperimentConfig& c, const std::vector<std::string>& runs, const std::string& baseline) {
  std::vector<std::pair<std::string, AggregateReport>> reports;
  for (const auto& r : runs) {
    auto [id, recs] = read_metrics(r);
    reports.emplace_back(id, aggregate(recs));
  }
  auto rows = compare_runs(reports, baseline);
  std::ostringstream os;
  write_comparison_csv(os, rows);
  write_file(fs::path(c.run.output) / "comparison.csv", os.str());
  std::cout << os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online stereo adaptation experiments"};
  app.require_subcommand(1);
  CommonOptions opts;
  std::string mode, adaptation, baseline, run_id;
  std::vector<std::string> runs;

  auto* gen = app.add_subcommand("gen-data", "render a synthetic stereo dataset");
  add_common(gen, opts);

  auto* train = app.add_subcommand("train", "train a disparity network");
  add_common(train, opts);
  train->add_option("--mode", mode, "sl | l2a | l2a-weighted")->required()->check(
      CLI::IsMember({"sl", "l2a", "l2a-weighted"}));
  train->add_option("--data", opts.dataset, "training dataset directory");
  train->add_option("--checkpoint", opts.checkpoint, "initial weights");

  auto* eval = app.add_subcommand("adapt-eval", "run measure-then-adapt over a dataset");
  add_common(eval, opts);
  eval->add_option("--adaptation", adaptation, "none | ad | wad")->required()->check(
      CLI::IsMember({"none", "ad", "wad"}));
  eval->add_option("--data", opts.dataset, "evaluation dataset directory");
  eval->add_option("--checkpoint", opts.checkpoint, "trained weights");
  eval->add_option("--run-id", run_id, "name recorded in metrics.csv (default: output directory name)");

  auto* cmp = app.add_subcommand("compare", "tabulate runs against a baseline");
  add_common(cmp, opts);
  cmp->add_option("--baseline", baseline, "run id of the baseline")->required();
  cmp->add_option("runs", runs, "run directories (or metrics.csv files)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    auto c = load_config(opts);
    if (gen->parsed()) {
      cmd_gen_data(c);
    } else if (train->parsed()) {
      cmd_train(c, mode);
    } else if (eval->parsed()) {
      if (!run_id.empty()) {
        c.run.run_id = run_id;
      } else if (c.run.run_id == RunConfig{}.run_id) {
        c.run.run_id = fs::path(c.run.output).lexically_normal().filename().string();
        if (c.run.run_id.empty()) c.run.run_id = fs::path(c.run.output).lexically_normal().parent_path().filename().string();
      }
      cmd_adapt_eval(c, adaptation);
    } else if (cmp->parsed()) {
      cmd_compare(c, runs, baseline);
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    for (auto& ch : msg) ch = ch == '\n' ? ' ' : ch;
    std::cerr << "l2a: error: " << msg << "\n";
    return 1;
  }
  return 0;
}
