#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "l2a/errors.hpp"
#include "l2a/tensor.hpp"

namespace l2a {

inline constexpr double kD1Threshold = 3.0;

struct MetricsRecord {
  std::string sequence;
  std::int64_t frame = 0;
  double epe = 0.0;
  double d1_all = 0.0;  // percent
  std::int64_t valid_pixels = 0;
};

/// EPE and D1-all over the valid pixels (mask values != 0).
inline MetricsRecord frame_metrics(const Tensor& pred, const Tensor& gt, const Tensor& valid) {
  if (pred.numel() != gt.numel() || pred.numel() != valid.numel()) {
    throw ShapeError("frame_metrics: shapes " + to_string(pred.shape()) + ", " +
                     to_string(gt.shape()) + ", " + to_string(valid.shape()) + " do not match");
  }
  double err_sum = 0.0;
  std::int64_t bad = 0, count = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    if (valid[i] == 0.0) continue;
    const double e = std::fabs(pred[i] - gt[i]);
    err_sum += e;
    bad += e > kD1Threshold ? 1 : 0;
    ++count;
  }
  if (count == 0) throw ContractError("frame_metrics: no valid pixels");
  MetricsRecord r;
  r.epe = err_sum / static_cast<double>(count);
  r.d1_all = 100.0 * static_cast<double>(bad) / static_cast<double>(count);
  r.valid_pixels = count;
  return r;
}

struct SequenceMean {
  std::string sequence;
  double epe = 0.0;
  double d1_all = 0.0;
  std::int64_t frames = 0;
};

struct CurvePoint {
  std::int64_t frame = 0;
  double epe = 0.0;
  double d1_all = 0.0;
};

struct AggregateReport {
  std::vector<SequenceMean> sequences;  // sorted by sequence id
  double epe = 0.0;
  double d1_all = 0.0;
  std::vector<CurvePoint> curve;  // mean across sequences at each frame index

  /// Mean of the curve over frame indices in [first, last].
  std::pair<double, double> curve_mean(std::int64_t first, std::int64_t last) const {
    double e = 0.0, d = 0.0;
    std::int64_t n = 0;
    for (const auto& p : curve) {
      if (p.frame < first || p.frame > last) continue;
      e += p.epe;
      d += p.d1_all;
      ++n;
    }
    if (n == 0) throw ContractError("curve_mean: no frames in range");
    return {e / static_cast<double>(n), d / static_cast<double>(n)};
  }
};

/// Per-sequence means, then the mean over sequences. Sequences are reduced in
/// id order, so the result does not depend on record order.
inline AggregateReport aggregate(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw ContractError("aggregate: no records");
  std::map<std::string, std::vector<const MetricsRecord*>> by_seq;
  for (const auto& r : records) by_seq[r.sequence].push_back(&r);

  AggregateReport rep;
  std::int64_t common = -1;
  for (auto& [id, rs] : by_seq) {
    std::sort(rs.begin(), rs.end(), [](auto* a, auto* b) { return a->frame < b->frame; });
    SequenceMean m;
    m.sequence = id;
    for (const auto* r : rs) {
      m.epe += r->epe;
      m.d1_all += r->d1_all;
    }
    m.frames = static_cast<std::int64_t>(rs.size());
    m.epe /= static_cast<double>(m.frames);
    m.d1_all /= static_cast<double>(m.frames);
    rep.sequences.push_back(m);
    common = common < 0 ? m.frames : std::min(common, m.frames);
  }
  for (const auto& m : rep.sequences) {
    rep.epe += m.epe;
    rep.d1_all += m.d1_all;
  }
  const double ns = static_cast<double>(rep.sequences.size());
  rep.epe /= ns;
  rep.d1_all /= ns;

  // Curve over the frame positions every sequence has.
  for (std::int64_t i = 0; i < common; ++i) {
    CurvePoint p;
    p.frame = by_seq.begin()->second[static_cast<std::size_t>(i)]->frame;
    for (const auto& [id, rs] : by_seq) {
      p.epe += rs[static_cast<std::size_t>(i)]->epe;
      p.d1_all += rs[static_cast<std::size_t>(i)]->d1_all;
    }
    p.epe /= ns;
    p.d1_all /= ns;
    rep.curve.push_back(p);
  }
  return rep;
}

struct ComparisonRow {
  std::string method;
  double d1_all = 0.0;
  double epe = 0.0;
  double delta_d1 = 0.0;
  double delta_epe = 0.0;
};

inline std::vector<ComparisonRow> compare_runs(
    const std::vector<std::pair<std::string, AggregateReport>>& reports, const std::string& baseline) {
  const AggregateReport* base = nullptr;
  for (const auto& [name, rep] : reports) {
    if (name == baseline) base = &rep;
  }
  if (!base) throw ConfigError("compare_runs: unknown baseline '" + baseline + "'");
  std::vector<ComparisonRow> rows;
  for (const auto& [name, rep] : reports) {
    rows.push_back({name, rep.d1_all, rep.epe, rep.d1_all - base->d1_all, rep.epe - base->epe});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// CSV output. Values use %.17g so identical runs give identical bytes.

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_metrics_csv(std::ostream& os, const std::string& run_id,
                              const std::vector<MetricsRecord>& records, bool header = true) {
  if (header) os << "run_id,sequence,frame,epe,d1_all,valid_pixels\n";
  for (const auto& r : records) {
    os << run_id << ',' << r.sequence << ',' << r.frame << ',' << format_double(r.epe) << ','
       << format_double(r.d1_all) << ',' << r.valid_pixels << '\n';
  }
}

inline void write_curve_csv(std::ostream& os, const AggregateReport& rep) {
  os << "frame,epe,d1_all\n";
  for (const auto& p : rep.curve) {
    os << p.frame << ',' << format_double(p.epe) << ',' << format_double(p.d1_all) << '\n';
  }
}

inline void write_report_csv(std::ostream& os, const AggregateReport& rep) {
  os << "sequence,frames,epe,d1_all\n";
  for (const auto& m : rep.sequences) {
    os << m.sequence << ',' << m.frames << ',' << format_double(m.epe) << ','
       << format_double(m.d1_all) << '\n';
  }
  os << "ALL," << rep.sequences.size() << ',' << format_double(rep.epe) << ','
     << format_double(rep.d1_all) << '\n';
}

inline void write_comparison_csv(std::ostream& os, const std::vector<ComparisonRow>& rows) {
  os << "method,d1_all,epe,delta_d1,delta_epe\n";
  for (const auto& r : rows) {
    os << r.method << ',' << format_double(r.d1_all) << ',' << format_double(r.epe) << ','
       << format_double(r.delta_d1) << ',' << format_double(r.delta_epe) << '\n';
  }
}

}  // namespace l2a
