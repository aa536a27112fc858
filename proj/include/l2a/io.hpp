#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "l2a/errors.hpp"
#include "l2a/frame.hpp"
#include "l2a/model.hpp"
#include "l2a/synthdata.hpp"

namespace l2a::io {

namespace fs = std::filesystem;

inline std::ofstream open_out(const fs::path& p, bool binary = false) {
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + p.parent_path().string() + ": " + ec.message());
  }
  std::ofstream os(p, binary ? std::ios::binary : std::ios::out);
  if (!os) throw IoError("cannot open " + p.string() + " for writing");
  return os;
}

inline std::ifstream open_in(const fs::path& p, bool binary = false) {
  std::ifstream is(p, binary ? std::ios::binary : std::ios::in);
  if (!is) throw IoError("cannot open " + p.string());
  return is;
}

inline std::string read_text(const fs::path& p) {
  auto is = open_in(p);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Netpbm images. RGB: 8-bit P6. Disparity: 16-bit P5 holding round(256 d),
// 0 marking pixels without ground truth. Masks: 8-bit P5 of 0/255.

namespace detail {

struct PnmHeader {
  std::string magic;
  std::int64_t width = 0, height = 0, maxval = 0;
};

inline PnmHeader read_pnm_header(std::istream& is, const fs::path& p) {
  PnmHeader h;
  auto token = [&]() {
    std::string t;
    while (true) {
      int c = is.peek();
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
      } else if (std::isspace(c)) {
        is.get();
      } else {
        break;
      }
    }
    is >> t;
    return t;
  };
  h.magic = token();
  try {
    h.width = std::stoll(token());
    h.height = std::stoll(token());
    h.maxval = std::stoll(token());
  } catch (const std::exception&) {
    throw IoError("malformed image header in " + p.string());
  }
  is.get();  // single whitespace before raster
  if (!is || h.width <= 0 || h.height <= 0 || h.maxval <= 0 || h.maxval > 65535) {
    throw IoError("malformed image header in " + p.string());
  }
  return h;
}

inline std::vector<unsigned char> read_raster(std::istream& is, std::size_t bytes, const fs::path& p) {
  std::vector<unsigned char> buf(bytes);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(is.gcount()) != bytes) throw IoError("truncated image " + p.string());
  return buf;
}

inline unsigned to_byte(double v) {
  return static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace detail

/// Writes a 3HW image in [0,1] as binary PPM.
inline void write_ppm(const fs::path& p, const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("write_ppm: expected 3xHxW, got " + to_string(img.shape()));
  const auto h = img.dim(1), w = img.dim(2);
  auto os = open_out(p, true);
  os << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(3 * h * w));
  for (std::int64_t i = 0; i < h * w; ++i) {
    for (int c = 0; c < 3; ++c) buf[static_cast<std::size_t>(3 * i + c)] = static_cast<unsigned char>(detail::to_byte(img[c * h * w + i]));
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("write failed: " + p.string());
}

inline Tensor read_ppm(const fs::path& p) {
  auto is = open_in(p, true);
  auto h = detail::read_pnm_header(is, p);
  if (h.magic != "P6" || h.maxval != 255) throw IoError(p.string() + " is not an 8-bit binary PPM");
  auto buf = detail::read_raster(is, static_cast<std::size_t>(3 * h.width * h.height), p);
  const auto n = h.width * h.height;
  std::vector<double> v(static_cast<std::size_t>(3 * n));
  for (std::int64_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) v[static_cast<std::size_t>(c * n + i)] = buf[static_cast<std::size_t>(3 * i + c)] / 255.0;
  }
  return Tensor({3, h.height, h.width}, std::move(v));
}

/// 1HW disparity and validity as 16-bit PGM (big-endian samples).
inline void write_disparity_pgm(const fs::path& p, const Tensor& disp, const Tensor& valid) {
  if (disp.rank() != 3 || disp.dim(0) != 1) throw ShapeError("write_disparity_pgm: expected 1xHxW");
  const auto h = disp.dim(1), w = disp.dim(2);
  auto os = open_out(p, true);
  os << "P5\n" << w << ' ' << h << "\n65535\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(2 * h * w));
  for (std::int64_t i = 0; i < h * w; ++i) {
    long q = 0;
    if (valid[i] != 0.0) {
      q = std::lround(disp[i] * 256.0);
      if (q < 1 || q > 65535) {
        throw IoError("write_disparity_pgm: disparity " + std::to_string(disp[i]) +
                      " not representable in " + p.string());
      }
    }
    buf[static_cast<std::size_t>(2 * i)] = static_cast<unsigned char>(q >> 8);
    buf[static_cast<std::size_t>(2 * i + 1)] = static_cast<unsigned char>(q & 0xFF);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("write failed: " + p.string());
}

inline std::pair<Tensor, Tensor> read_disparity_pgm(const fs::path& p) {
  auto is = open_in(p, true);
  auto h = detail::read_pnm_header(is, p);
  if (h.magic != "P5" || h.maxval != 65535) throw IoError(p.string() + " is not a 16-bit PGM");
  const auto n = h.width * h.height;
  auto buf = detail::read_raster(is, static_cast<std::size_t>(2 * n), p);
  std::vector<double> d(static_cast<std::size_t>(n)), valid(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const unsigned q = (unsigned{buf[static_cast<std::size_t>(2 * i)]} << 8) | buf[static_cast<std::size_t>(2 * i + 1)];
    d[static_cast<std::size_t>(i)] = q / 256.0;
    valid[static_cast<std::size_t>(i)] = q > 0 ? 1.0 : 0.0;
  }
  return {Tensor({1, h.height, h.width}, std::move(d)), Tensor({1, h.height, h.width}, std::move(valid))};
}

/// Single-channel map scaled so that `max_value` maps to 255 (8-bit PGM).
inline void write_gray_pgm(const fs::path& p, const Tensor& map, double max_value) {
  const auto h = map.dim(map.rank() - 2), w = map.dim(map.rank() - 1);
  if (map.numel() != h * w) throw ShapeError("write_gray_pgm: expected a single-channel map");
  auto os = open_out(p, true);
  os << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> buf(static_cast<std::size_t>(h * w));
  const double scale = max_value > 0.0 ? 1.0 / max_value : 0.0;
  for (std::int64_t i = 0; i < h * w; ++i) buf[static_cast<std::size_t>(i)] = static_cast<unsigned char>(detail::to_byte(map[i] * scale));
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("write failed: " + p.string());
}

inline Tensor read_gray_pgm(const fs::path& p) {
  auto is = open_in(p, true);
  auto h = detail::read_pnm_header(is, p);
  if (h.magic != "P5" || h.maxval != 255) throw IoError(p.string() + " is not an 8-bit PGM");
  const auto n = h.width * h.height;
  auto buf = detail::read_raster(is, static_cast<std::size_t>(n), p);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = buf[static_cast<std::size_t>(i)] / 255.0;
  return Tensor({1, h.height, h.width}, std::move(v));
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.txt plus one directory per sequence.

inline std::string frame_name(const char* prefix, std::size_t t, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04zu.%s", prefix, t, ext);
  return buf;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string describe_surface(const Surface& s) {
  std::ostringstream os;
  os << format_double(s.x) << ' ' << format_double(s.y) << ' ' << format_double(s.width) << ' '
     << format_double(s.height) << ' ' << format_double(s.depth) << ' ' << format_double(s.vx) << ' '
     << format_double(s.vy) << ' ' << format_double(s.vz) << ' ' << s.texture_seed;
  return os.str();
}

/// Optional per-sequence generation parameters recorded in the manifest.
struct SequenceProvenance {
  std::optional<SequenceSpec> spec;
  std::uint64_t seed = 0;
};

inline void save_dataset(const fs::path& dir, const Dataset& ds,
                         const std::vector<SequenceProvenance>& provenance = {}) {
  std::ostringstream man;
  man << "# stereo dataset manifest\n";
  man << "sequences = " << ds.sequences.size() << "\n";
  man << "supervised = " << (ds.supervised ? 1 : 0) << "\n";
  for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
    const auto& seq = ds.sequences[i];
    man << "\n[" << seq.id << "]\n";
    man << "domain = " << seq.domain << "\n";
    man << "frames = " << seq.size() << "\n";
    if (i < provenance.size() && provenance[i].spec) {
      const auto& sp = *provenance[i].spec;
      man << "seed = " << provenance[i].seed << "\n";
      man << "focal = " << format_double(sp.scene.focal) << "\n";
      man << "baseline = " << format_double(sp.scene.baseline) << "\n";
      man << "gain = " << format_double(sp.domain.gain) << "\n";
      man << "contrast = " << format_double(sp.domain.contrast) << "\n";
      man << "noise_sigma = " << format_double(sp.domain.noise_sigma) << "\n";
      man << "texture = " << to_string(sp.domain.texture) << "\n";
      for (std::size_t k = 0; k < sp.scene.surfaces.size(); ++k) {
        man << "surface" << k << " = " << describe_surface(sp.scene.surfaces[k]) << "\n";
      }
    }
    const fs::path sd = dir / seq.id;
    for (std::size_t t = 0; t < seq.size(); ++t) {
      const auto& f = seq.frames[t];
      write_ppm(sd / frame_name("left", t, "ppm"), f.left);
      write_ppm(sd / frame_name("right", t, "ppm"), f.right);
      if (f.gt_disparity) write_disparity_pgm(sd / frame_name("disp", t, "pgm"), *f.gt_disparity, f.gt_valid);
      if (f.unoccluded) write_gray_pgm(sd / frame_name("visible", t, "pgm"), *f.unoccluded, 1.0);
    }
  }
  auto os = open_out(dir / "manifest.txt");
  os << man.str();
  if (!os) throw IoError("write failed: " + (dir / "manifest.txt").string());
}

struct ManifestEntry {
  std::string id;
  std::map<std::string, std::string> values;
};

inline std::vector<ManifestEntry> read_manifest(const fs::path& dir, bool* supervised = nullptr) {
  auto is = open_in(dir / "manifest.txt");
  std::vector<ManifestEntry> out;
  std::string line;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[' && line.back() == ']') {
      out.push_back({line.substr(1, line.size() - 2), {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("malformed manifest line: " + line);
    const auto key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (out.empty()) {
      if (key == "supervised" && supervised) *supervised = value == "1";
    } else {
      out.back().values[key] = value;
    }
  }
  return out;
}

inline Dataset load_dataset(const fs::path& dir) {
  Dataset ds;
  bool supervised = true;
  auto entries = read_manifest(dir, &supervised);
  if (entries.empty()) throw IoError("dataset " + dir.string() + " lists no sequences");
  ds.supervised = supervised;
  for (const auto& e : entries) {
    Sequence seq;
    seq.id = e.id;
    auto it = e.values.find("domain");
    seq.domain = it == e.values.end() ? "" : it->second;
    it = e.values.find("frames");
    if (it == e.values.end()) throw IoError("manifest entry " + e.id + " has no frame count");
    const auto frames = std::stoul(it->second);
    const fs::path sd = dir / seq.id;
    for (std::size_t t = 0; t < frames; ++t) {
      StereoFrame f;
      f.left = read_ppm(sd / frame_name("left", t, "ppm"));
      f.right = read_ppm(sd / frame_name("right", t, "ppm"));
      const auto dp = sd / frame_name("disp", t, "pgm");
      if (fs::exists(dp)) {
        auto [d, v] = read_disparity_pgm(dp);
        f.gt_disparity = d;
        f.gt_valid = v;
      } else {
        ds.supervised = false;
      }
      const auto vp = sd / frame_name("visible", t, "pgm");
      if (fs::exists(vp)) f.unoccluded = read_gray_pgm(vp);
      f.validate();
      seq.frames.push_back(std::move(f));
    }
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints: little-endian binary.
//   "L2ACKPT\0" | u32 version | u32 meta_len | meta (key=value lines)
//   | u32 count | count x (u32 name_len, name, u8 dtype, u32 rank, rank x i64, u64 offset)
//   | payload (f64 values, offsets relative to payload start)

inline constexpr std::array<char, 8> kCheckpointMagic{'L', '2', 'A', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

struct Checkpoint {
  DisparityParams theta;
  std::optional<ConfidenceParams> eta;
  std::map<std::string, std::string> provenance;  // command, config_hash, iterations, ...
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  put_le(out, bits);
}

class Reader {
 public:
  Reader(const std::string& data, std::string source) : data_(data), source_(std::move(source)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t{static_cast<unsigned char>(data_[pos_ + i])} << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  double get_f64() {
    auto bits = get<std::uint64_t>();
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) {
    if (p > data_.size()) fail();
    pos_ = p;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) fail();
  }
  [[noreturn]] void fail() const { throw IoError("checkpoint " + source_ + " is truncated or corrupt"); }
  const std::string& data_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::string net_config_text(const NetConfig& c) {
  std::ostringstream os;
  os << "net.height=" << c.height << "\nnet.width=" << c.width << "\nnet.base_channels=" << c.base_channels
     << "\nnet.max_disp=" << c.max_disp << "\nnet.disparity_scale=" << format_double(c.disparity_scale)
     << "\nnet.confidence_bias=" << format_double(c.confidence_bias) << "\n";
  return os.str();
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string meta = detail::net_config_text(ck.theta.config);
  for (const auto& [k, v] : ck.provenance) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw IoError("checkpoint provenance entries must be single-line key=value");
    }
    meta += "prov." + k + "=" + v + "\n";
  }
  std::vector<std::pair<std::string, const Tensor*>> table;
  for (std::size_t i = 0; i < ck.theta.theta.size(); ++i) table.push_back({"theta/" + ck.theta.theta.name(i), &ck.theta.theta[i]});
  if (ck.eta) {
    for (std::size_t i = 0; i < ck.eta->eta.size(); ++i) table.push_back({"eta/" + ck.eta->eta.name(i), &ck.eta->eta[i]});
    for (std::size_t i = 0; i < ck.eta->buffers.size(); ++i) table.push_back({"buffers/" + ck.eta->buffers.name(i), &ck.eta->buffers[i]});
  }
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(table.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : table) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_le<std::uint8_t>(out, kDtypeF64);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape()) detail::put_le<std::int64_t>(out, d);
    detail::put_le<std::uint64_t>(out, offset);
    offset += static_cast<std::uint64_t>(t->numel()) * 8u;
  }
  for (const auto& [name, t] : table) {
    for (double v : t->values()) detail::put_f64(out, v);
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& data, const std::string& source = "<memory>") {
  detail::Reader r(data, source);
  auto magic = r.bytes(kCheckpointMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) {
    throw IoError(source + " is not a checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version == 0 || version > kCheckpointVersion) {
    throw IoError(source + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto meta = r.bytes(r.get<std::uint32_t>());
  Checkpoint ck;
  NetConfig& nc = ck.theta.config;
  std::istringstream ms(meta);
  std::string line;
  while (std::getline(ms, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "net.height") nc.height = std::stoll(value);
    else if (key == "net.width") nc.width = std::stoll(value);
    else if (key == "net.base_channels") nc.base_channels = std::stoll(value);
    else if (key == "net.max_disp") nc.max_disp = std::stoll(value);
    else if (key == "net.disparity_scale") nc.disparity_scale = std::stod(value);
    else if (key == "net.confidence_bias") nc.confidence_bias = std::stod(value);
    else if (key.rfind("prov.", 0) == 0) ck.provenance[key.substr(5)] = value;
  }
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.bytes(r.get<std::uint32_t>());
    if (r.get<std::uint8_t>() != kDtypeF64) throw IoError(source + ": unsupported dtype for " + e.name);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw IoError(source + ": implausible rank for " + e.name);
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(r.get<std::int64_t>());
    e.offset = r.get<std::uint64_t>();
    entries.push_back(std::move(e));
  }
  const std::size_t payload = r.pos();
  ConfidenceParams conf;
  bool has_eta = false;
  for (const auto& e : entries) {
    r.seek(payload + e.offset);
    std::vector<double> v(static_cast<std::size_t>(numel(e.shape)));
    for (auto& x : v) x = r.get_f64();
    Tensor t(e.shape, std::move(v));
    const auto slash = e.name.find('/');
    const auto group = e.name.substr(0, slash), name = e.name.substr(slash + 1);
    if (group == "theta") ck.theta.theta.add(name, t);
    else if (group == "eta") { conf.eta.add(name, t); has_eta = true; }
    else if (group == "buffers") conf.buffers.add(name, t);
    else throw IoError(source + ": unknown tensor group in '" + e.name + "'");
  }
  if (has_eta) ck.eta = std::move(conf);
  // Shapes must agree with what the stored config would build.
  auto reference = init_disparity_net(nc, 0);
  if (reference.theta.names() != ck.theta.theta.names()) {
    throw IoError(source + ": disparity tensors do not match the stored network config");
  }
  reference.theta.with_tensors(ck.theta.theta.tensors());
  return ck;
}

inline void save_checkpoint(const fs::path& p, const Checkpoint& ck) {
  auto bytes = serialize_checkpoint(ck);
  auto os = open_out(p, true);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed: " + p.string());
}

inline Checkpoint load_checkpoint(const fs::path& p) {
  auto is = open_in(p, true);
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint(ss.str(), p.string());
}

/// 64-bit FNV-1a, used to fingerprint configs.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace l2a::io
