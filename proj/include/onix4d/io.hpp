#pragma once

// Binary containers (projection stacks, volumes, parameter checkpoints), the
// dataset manifest and image output.
//
//   XMPJ     "XMPJ" | version u32 | channel u8 | T V H W u32 | f32 payload | crc32
//   XVOL     "XVOL" | nx ny nz u32 | f32 payload | crc32
//   ONIXCKPT "ONIXCKPT" | version u32 | { name_len u32 | name | ndims u32 | dims u32... | f32 payload }*
//
// All integers and floats are little-endian; the crc covers every preceding byte.

#include <zlib.h>

#include <atomic>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "onix4d/experiment.hpp"
#include "onix4d/grid.hpp"
#include "onix4d/params.hpp"

namespace onix::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "little-endian host required");

class FormatError : public Error {
 public:
  using Error::Error;
};

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n, std::uint32_t seed = 0) {
  uLong c = seed;
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = ::crc32(c, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void f32(std::span<const float> v) { raw(v.data(), v.size() * 4); }
  void crc() { u32(crc32(buf_.data(), buf_.size())); }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::vector<std::uint8_t> bytes, std::string what) : buf_(std::move(bytes)), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }
  bool done() const { return pos_ == buf_.size(); }

  void need(std::size_t n) const {
    if (remaining() < n) {
      throw FormatError(what_ + ": truncated file: need " + std::to_string(n) + " bytes at offset " +
                        std::to_string(pos_) + ", " + std::to_string(remaining()) + " available");
    }
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::vector<float> f32(std::size_t n) {
    if (n > remaining() / 4) need(n * 4);
    std::vector<float> v(n);
    raw(v.data(), n * 4);
    return v;
  }
  void magic(std::string_view m) {
    std::string got(m.size(), '\0');
    need(m.size());
    raw(got.data(), m.size());
    if (got != m) throw FormatError(what_ + ": bad magic, expected '" + std::string(m) + "'");
  }
  // Verifies a trailing crc over everything before it and that nothing follows.
  void verify_crc() {
    const std::size_t at = pos_;
    const std::uint32_t expected = crc32(buf_.data(), at);
    const std::uint32_t stored = u32();
    if (stored != expected) {
      throw FormatError(what_ + ": CRC mismatch at offset " + std::to_string(at));
    }
    if (!done()) throw FormatError(what_ + ": trailing bytes after CRC at offset " + std::to_string(pos_));
  }

 private:
  std::vector<std::uint8_t> buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open '" + p.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

// Writes through a temporary file so that readers never see partial output.
inline void write_file(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + p.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for '" + p.string() + "'");
  }
  fs::rename(tmp, p);
}

inline std::string read_text(const fs::path& p) {
  const auto b = read_file(p);
  return std::string(b.begin(), b.end());
}

inline void write_text(const fs::path& p, const std::string& s) {
  write_file(p, std::vector<std::uint8_t>(s.begin(), s.end()));
}

// ---------------------------------------------------------------------------

struct ProjectionStack {
  Channel channel = Channel::Absorption;
  std::uint32_t t = 0, v = 0, h = 0, w = 0;
  std::vector<float> data;  // [T][V][H][W]

  std::size_t frame_size() const { return std::size_t{h} * w; }
  std::span<const float> frame(std::size_t ti, std::size_t vi) const {
    return std::span<const float>(data).subspan((ti * v + vi) * frame_size(), frame_size());
  }
};

inline constexpr std::uint32_t kXmpjVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_xmpj(const ProjectionStack& s) {
  if (s.data.size() != std::size_t{s.t} * s.v * s.h * s.w) throw Error("xmpj: payload size does not match dims");
  ByteWriter w;
  w.raw("XMPJ", 4);
  w.u32(kXmpjVersion);
  w.u8(static_cast<std::uint8_t>(s.channel));
  w.u32(s.t), w.u32(s.v), w.u32(s.h), w.u32(s.w);
  w.f32(s.data);
  w.crc();
  return w.bytes();
}

inline ProjectionStack decode_xmpj(std::vector<std::uint8_t> bytes, const std::string& what = "xmpj") {
  ByteReader r(std::move(bytes), what);
  r.magic("XMPJ");
  const auto version = r.u32();
  if (version != kXmpjVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  ProjectionStack s;
  const auto tag = r.u8();
  if (tag > 2) throw FormatError(what + ": unknown channel tag " + std::to_string(tag));
  s.channel = static_cast<Channel>(tag);
  s.t = r.u32(), s.v = r.u32(), s.h = r.u32(), s.w = r.u32();
  s.data = r.f32(std::size_t{s.t} * s.v * s.h * s.w);
  r.verify_crc();
  return s;
}

inline void write_xmpj(const fs::path& p, const ProjectionStack& s) { write_file(p, encode_xmpj(s)); }
inline ProjectionStack read_xmpj(const fs::path& p) { return decode_xmpj(read_file(p), p.string()); }

inline std::vector<std::uint8_t> encode_xvol(const Volume& v) {
  ByteWriter w;
  w.raw("XVOL", 4);
  w.u32(static_cast<std::uint32_t>(v.nx)), w.u32(static_cast<std::uint32_t>(v.ny)), w.u32(static_cast<std::uint32_t>(v.nz));
  w.f32(v.data);
  w.crc();
  return w.bytes();
}

inline Volume decode_xvol(std::vector<std::uint8_t> bytes, const std::string& what = "xvol") {
  ByteReader r(std::move(bytes), what);
  r.magic("XVOL");
  Volume v;
  v.nx = r.u32(), v.ny = r.u32(), v.nz = r.u32();
  v.data = r.f32(v.nx * v.ny * v.nz);
  r.verify_crc();
  return v;
}

inline void write_xvol(const fs::path& p, const Volume& v) { write_file(p, encode_xvol(v)); }
inline Volume read_xvol(const fs::path& p) { return decode_xvol(read_file(p), p.string()); }

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  ByteWriter w;
  w.raw("ONIXCKPT", 8);
  w.u32(kCheckpointVersion);
  for (const auto& t : tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.raw(t.name.data(), t.name.size());
    w.u32(static_cast<std::uint32_t>(t.value.rank()));
    for (auto d : t.value.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32(t.value.vec());
  }
  w.crc();
  return w.bytes();
}

inline std::vector<NamedTensor> decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& what = "checkpoint") {
  ByteReader r(std::move(bytes), what);
  r.magic("ONIXCKPT");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  std::vector<NamedTensor> out;
  while (r.remaining() > 4) {
    NamedTensor t;
    const auto len = r.u32();
    r.need(len);
    t.name.resize(len);
    r.raw(t.name.data(), len);
    const auto nd = r.u32();
    if (nd > 8) throw FormatError(what + ": implausible rank " + std::to_string(nd) + " for '" + t.name + "'");
    Shape shape(nd);
    for (auto& d : shape) d = r.u32();
    t.value = Tensor<float>(shape, r.f32(numel(shape)));
    out.push_back(std::move(t));
  }
  r.verify_crc();
  return out;
}

template <class T>
std::vector<NamedTensor> snapshot(const ParamStore<T>& store) {
  std::vector<NamedTensor> out;
  for (const auto& p : store.entries()) out.push_back({p.name, p.var.value().template cast<float>()});
  return out;
}

template <class T>
void save_checkpoint(const fs::path& p, const ParamStore<T>& store) {
  write_file(p, encode_checkpoint(snapshot(store)));
}

// Loads every tensor of the store by name; missing, extra or mis-shaped
// entries are rejected before any parameter is modified.
template <class T>
void load_checkpoint(const fs::path& p, ParamStore<T>& store) {
  const auto tensors = decode_checkpoint(read_file(p), p.string());
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) {
    if (!by_name.emplace(t.name, &t).second) throw FormatError(p.string() + ": duplicate tensor '" + t.name + "'");
  }
  for (const auto& e : store.entries()) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw FormatError(p.string() + ": missing tensor '" + e.name + "'");
    if (it->second->value.shape() != e.var.shape()) {
      throw FormatError(p.string() + ": tensor '" + e.name + "' has shape " + to_string(it->second->value.shape()) +
                        ", expected " + to_string(e.var.shape()));
    }
  }
  if (by_name.size() != store.size()) throw FormatError(p.string() + ": checkpoint holds unknown tensors");
  for (auto& e : store.entries()) {
    const auto& src = by_name[e.name]->value;
    auto& dst = e.var.mutable_value();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
  }
}

// ---------------------------------------------------------------------------
// JSON conversions

inline json to_json(const Material& m) { return {{"delta0", m.delta0}, {"beta0", m.beta0}}; }
inline Material material_from(const json& j) { return {j.at("delta0").get<double>(), j.at("beta0").get<double>()}; }

inline json to_json(const DropletScenario& s) {
  return {{"r1", s.r1},
          {"r2", s.r2},
          {"v1", s.v1},
          {"v2", s.v2},
          {"impact", s.impact},
          {"start_x", s.start_x},
          {"smoothness", s.smoothness},
          {"merge_duration", s.merge_duration},
          {"oscillation_period", s.oscillation_period},
          {"damping", s.damping},
          {"oscillation_amplitude", s.oscillation_amplitude},
          {"material", to_json(s.material)},
          {"timestamps", s.timestamps}};
}

inline DropletScenario droplet_from(const json& j) {
  DropletScenario s;
  s.r1 = j.at("r1");
  s.r2 = j.at("r2");
  s.v1 = j.at("v1");
  s.v2 = j.at("v2");
  s.impact = j.at("impact");
  s.start_x = j.at("start_x");
  s.smoothness = j.at("smoothness");
  s.merge_duration = j.at("merge_duration");
  s.oscillation_period = j.at("oscillation_period");
  s.damping = j.at("damping");
  s.oscillation_amplitude = j.at("oscillation_amplitude");
  s.material = material_from(j.at("material"));
  s.timestamps = j.at("timestamps");
  return s;
}

inline json to_json(const MeltScenario& s) {
  return {{"half_x", s.half_x},
          {"half_y", s.half_y},
          {"z_bottom", s.z_bottom},
          {"z_top", s.z_top},
          {"layers", s.layers},
          {"layer_contrast", s.layer_contrast},
          {"pool_center_x", s.pool_center_x},
          {"pool_half_x", s.pool_half_x},
          {"pool_half_y", s.pool_half_y},
          {"max_depth", s.max_depth},
          {"pool_density", s.pool_density},
          {"material", to_json(s.material)},
          {"timestamps", s.timestamps}};
}

inline MeltScenario melt_from(const json& j) {
  MeltScenario s;
  s.half_x = j.at("half_x");
  s.half_y = j.at("half_y");
  s.z_bottom = j.at("z_bottom");
  s.z_top = j.at("z_top");
  s.layers = j.at("layers");
  s.layer_contrast = j.at("layer_contrast");
  s.pool_center_x = j.at("pool_center_x");
  s.pool_half_x = j.at("pool_half_x");
  s.pool_half_y = j.at("pool_half_y");
  s.max_depth = j.at("max_depth");
  s.pool_density = j.at("pool_density");
  s.material = material_from(j.at("material"));
  s.timestamps = j.at("timestamps");
  return s;
}

inline std::string to_string(NoiseModel::Kind k) {
  switch (k) {
    case NoiseModel::Kind::None: return "none";
    case NoiseModel::Kind::Gaussian: return "gaussian";
    case NoiseModel::Kind::Poisson: return "poisson";
  }
  return "none";
}

inline NoiseModel::Kind noise_kind_from(const std::string& s) {
  if (s == "none") return NoiseModel::Kind::None;
  if (s == "gaussian") return NoiseModel::Kind::Gaussian;
  if (s == "poisson") return NoiseModel::Kind::Poisson;
  throw Error("unknown noise model '" + s + "'");
}

inline json to_json(const Acquisition& a) {
  return {{"energy_kev", a.energy_kev},
          {"unit_length_m", a.unit_length_m},
          {"detector", {{"width", a.detector.width}, {"height", a.detector.height}, {"pitch", a.detector.pitch}}},
          {"samples_per_ray", a.samples_per_ray},
          {"noise", {{"kind", to_string(a.noise.kind)}, {"sigma", a.noise.sigma}, {"photons", a.noise.photons}}},
          {"relative_angles", a.relative_angles}};
}

inline Acquisition acquisition_from(const json& j) {
  Acquisition a;
  a.energy_kev = j.at("energy_kev");
  a.unit_length_m = j.at("unit_length_m");
  a.detector.width = j.at("detector").at("width");
  a.detector.height = j.at("detector").at("height");
  a.detector.pitch = j.at("detector").at("pitch");
  a.samples_per_ray = j.at("samples_per_ray");
  a.noise.kind = noise_kind_from(j.at("noise").at("kind"));
  a.noise.sigma = j.at("noise").at("sigma");
  a.noise.photons = j.at("noise").at("photons");
  a.relative_angles = j.at("relative_angles").get<std::vector<double>>();
  return a;
}

// ---------------------------------------------------------------------------
// Dataset on disk: manifest.json plus two XMPJ stacks per experiment.

struct ExperimentEntry {
  std::size_t id = 0;
  std::vector<double> relative_angles;
  std::size_t timestamps = 0;
  std::string absorption_file;
  std::string phase_file;
};

// Everything training may see.
struct TrainingView {
  PhantomKind phantom = PhantomKind::Droplet;
  ScenarioKind kind = ScenarioKind::Reproducible;
  std::uint64_t seed = 0;
  Acquisition acquisition;
  Material reference;
  std::vector<ExperimentEntry> experiments;
};

struct SealedExperiment {
  std::size_t id = 0;
  double phi1 = 0;
  DropletScenario droplet;
  MeltScenario melt;
};

struct SealedSection {
  PhantomKind phantom = PhantomKind::Droplet;
  std::vector<SealedExperiment> experiments;

  const SealedExperiment& find(std::size_t id) const {
    for (const auto& e : experiments)
      if (e.id == id) return e;
    throw Error("sealed section has no experiment " + std::to_string(id));
  }
};

inline std::string stack_name(std::size_t id, Channel c) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "exp%03zu_%s.xmpj", id, c == Channel::Absorption ? "absorption" : "phase");
  return buf;
}

inline json manifest_json(const Dataset& ds) {
  json exps = json::array(), sealed = json::array();
  for (const auto& e : ds.experiments) {
    exps.push_back({{"id", e.id},
                    {"relative_angles", e.relative_angles},
                    {"timestamps", e.timestamps},
                    {"files", {{"absorption", stack_name(e.id, Channel::Absorption)},
                               {"phase", stack_name(e.id, Channel::Phase)}}}});
    json s = {{"id", e.id}, {"phi1", e.phi1}};
    if (ds.phantom == PhantomKind::Droplet) s["droplet"] = to_json(e.droplet);
    else s["melt"] = to_json(e.melt);
    sealed.push_back(std::move(s));
  }
  return {{"format", "onix4d-manifest"},
          {"version", 1},
          {"phantom", to_string(ds.phantom)},
          {"scenario", to_string(ds.kind)},
          {"seed", ds.seed},
          {"acquisition", to_json(ds.acquisition)},
          {"reference", to_json(ds.reference)},
          {"experiments", std::move(exps)},
          {"eval_only", {{"experiments", std::move(sealed)}}}};
}

inline ProjectionStack stack_of(const ExperimentRecord& e, Channel c) {
  ProjectionStack s;
  s.channel = c;
  s.t = static_cast<std::uint32_t>(e.timestamps);
  s.v = static_cast<std::uint32_t>(e.views());
  const Image& first = c == Channel::Absorption ? e.frames.at(0).absorption : e.frames.at(0).phase;
  s.h = static_cast<std::uint32_t>(first.height);
  s.w = static_cast<std::uint32_t>(first.width);
  for (const auto& f : e.frames) {
    const Image& img = c == Channel::Absorption ? f.absorption : f.phase;
    s.data.insert(s.data.end(), img.px.begin(), img.px.end());
  }
  return s;
}

inline void write_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  for (const auto& e : ds.experiments) {
    write_xmpj(dir / stack_name(e.id, Channel::Absorption), stack_of(e, Channel::Absorption));
    write_xmpj(dir / stack_name(e.id, Channel::Phase), stack_of(e, Channel::Phase));
  }
  write_text(dir / "manifest.json", manifest_json(ds).dump(2) + "\n");
}

// Parses a manifest and hands out its public part freely. The sealed part is
// only available through eval_section(), which is counted process-wide.
class ManifestReader {
 public:
  explicit ManifestReader(const fs::path& path) : dir_(path.parent_path()) {
    const auto bytes = read_file(path);
    json j;
    try {
      j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    try {
      if (j.at("format") != "onix4d-manifest") throw FormatError(path.string() + ": not a dataset manifest");
      view_.phantom = phantom_kind_from(j.at("phantom"));
      view_.kind = scenario_kind_from(j.at("scenario"));
      view_.seed = j.at("seed");
      view_.acquisition = acquisition_from(j.at("acquisition"));
      view_.reference = material_from(j.at("reference"));
      for (const auto& e : j.at("experiments")) {
        ExperimentEntry x;
        x.id = e.at("id");
        x.relative_angles = e.at("relative_angles").get<std::vector<double>>();
        x.timestamps = e.at("timestamps");
        x.absorption_file = e.at("files").at("absorption");
        x.phase_file = e.at("files").at("phase");
        view_.experiments.push_back(std::move(x));
      }
      sealed_ = j.at("eval_only");
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    if (view_.experiments.empty()) throw FormatError(path.string() + ": no experiments");
    for (const auto& e : view_.experiments) {
      validate_relative_angles(e.relative_angles);
      if (e.relative_angles != view_.experiments[0].relative_angles) {
        throw FormatError(path.string() + ": relative angles differ between experiments");
      }
      if (e.timestamps == 0) throw FormatError(path.string() + ": experiment without timestamps");
    }
  }

  const TrainingView& training() const { return view_; }
  const fs::path& directory() const { return dir_; }

  SealedSection eval_section() const {
    eval_reads().fetch_add(1);
    SealedSection s;
    s.phantom = view_.phantom;
    for (const auto& e : sealed_.at("experiments")) {
      SealedExperiment x;
      x.id = e.at("id");
      x.phi1 = e.at("phi1");
      if (e.contains("droplet")) x.droplet = droplet_from(e.at("droplet"));
      if (e.contains("melt")) x.melt = melt_from(e.at("melt"));
      s.experiments.push_back(x);
    }
    return s;
  }

  static std::atomic<std::size_t>& eval_reads() {
    static std::atomic<std::size_t> n{0};
    return n;
  }

 private:
  fs::path dir_;
  TrainingView view_;
  json sealed_;
};

// Normalised recorded images of one experiment: both channels divided so that
// they equal the line integral of (delta / delta_ref) and (beta / beta_ref).
struct ExperimentImages {
  std::size_t id = 0;
  std::vector<double> relative_angles;
  std::size_t timestamps = 0, views = 0, height = 0, width = 0;
  std::vector<float> data;  // [T][V][2][H][W]

  std::span<const float> timestamp(std::size_t t) const {
    const std::size_t n = views * 2 * height * width;
    return std::span<const float>(data).subspan(t * n, n);
  }
};

inline ExperimentImages load_experiment(const fs::path& dir, const TrainingView& view, const ExperimentEntry& e) {
  const auto a = read_xmpj(dir / e.absorption_file);
  const auto p = read_xmpj(dir / e.phase_file);
  auto check = [&](const ProjectionStack& s, Channel c, const std::string& f) {
    if (s.channel != c) throw FormatError(f + ": unexpected channel tag");
    if (s.t != e.timestamps || s.v != e.relative_angles.size() || s.h != view.acquisition.detector.height ||
        s.w != view.acquisition.detector.width) {
      throw FormatError(f + ": header dims (" + std::to_string(s.t) + "," + std::to_string(s.v) + "," +
                        std::to_string(s.h) + "," + std::to_string(s.w) + ") disagree with the manifest");
    }
  };
  check(a, Channel::Absorption, e.absorption_file);
  check(p, Channel::Phase, e.phase_file);
  ExperimentImages out;
  out.id = e.id;
  out.relative_angles = e.relative_angles;
  out.timestamps = a.t;
  out.views = a.v;
  out.height = a.h;
  out.width = a.w;
  const double sa = 1.0 / (view.acquisition.absorption_factor() * view.reference.beta0);
  const double sp = 1.0 / (view.acquisition.phase_factor() * view.reference.delta0);
  const std::size_t hw = a.frame_size();
  out.data.resize(std::size_t{a.t} * a.v * 2 * hw);
  for (std::size_t t = 0; t < a.t; ++t)
    for (std::size_t v = 0; v < a.v; ++v) {
      float* dst = out.data.data() + ((t * a.v + v) * 2) * hw;
      const auto fa = a.frame(t, v), fp = p.frame(t, v);
      for (std::size_t i = 0; i < hw; ++i) {
        dst[i] = static_cast<float>(fa[i] * sa);
        dst[hw + i] = static_cast<float>(fp[i] * sp);
      }
    }
  return out;
}

inline std::vector<ExperimentImages> load_training_images(const ManifestReader& m) {
  std::vector<ExperimentImages> out;
  for (const auto& e : m.training().experiments) out.push_back(load_experiment(m.directory(), m.training(), e));
  return out;
}

// Binary greyscale image, linearly mapped from [lo, hi] to [0, 255].
inline void write_pgm(const fs::path& p, const Image& img, double lo, double hi) {
  std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  const double span = hi > lo ? hi - lo : 1.0;
  // Row 0 of the image is the bottom of the detector; PGM stores top first.
  for (std::size_t r = img.height; r-- > 0;)
    for (std::size_t c = 0; c < img.width; ++c) {
      const double v = std::clamp((double(img.at(c, r)) - lo) / span, 0.0, 1.0);
      bytes.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
  write_file(p, bytes);
}

}  // namespace onix::io
