#pragma once

// Run configuration: one JSON document with a section per subcommand. User
// documents are merged onto the defaults; unknown keys and type mismatches
// are rejected with the offending path.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "onix4d/experiment.hpp"
#include "onix4d/io.hpp"
#include "onix4d/model.hpp"
#include "onix4d/sart.hpp"
#include "onix4d/training.hpp"

namespace onix {

class ConfigError : public Error {
 public:
  using Error::Error;
};

using io::json;

struct SimulateSection {
  PhantomKind phantom = PhantomKind::Droplet;
  ExperimentSet set;
  std::size_t timestamps = 75;
  Acquisition acquisition;
  DropletScenario droplet;
  MeltScenario melt;
};

struct TrainSection {
  std::string data;    // manifest path
  std::string resume;  // optional checkpoint to start from
  ModelConfig model;
  TrainConfig train;
};

struct RenderSection {
  std::string data;
  std::string checkpoint;
  std::size_t grid = 32;
  std::vector<std::size_t> experiments;  // empty = all
  std::size_t timestamp_stride = 1;
  bool frames = true;                    // side/top PGM frame sequences
};

struct EvaluateSection {
  std::string data;
  std::string checkpoint;  // evaluate a model ...
  std::string volumes;     // ... or a directory of rendered XVOL files
  std::size_t grid = 32;
  std::vector<std::size_t> experiments;
  std::size_t timestamp_stride = 1;
  std::optional<double> data_range = 1.0;
  bool fsc = true;
};

struct SartSection {
  std::string source = "phantom";  // "phantom": dense simulated views; "dataset": recorded views
  std::string data;                // manifest for the dataset source
  PhantomKind phantom = PhantomKind::Droplet;
  std::size_t views = 180;
  double span_deg = 180.0;
  std::size_t grid = 64;
  std::vector<std::size_t> timestamps{0};
  std::size_t timeline = 75;        // timestamps of the phantom timeline
  std::size_t experiments = 1;      // dataset source: experiments reconstructed
  SartConfig sart;
  Acquisition acquisition;
  DropletScenario droplet;
  MeltScenario melt;
};

struct GradcheckSection {
  double step32 = 1e-5;
  double step64 = 1e-6;
  double tol32 = 1e-3;
  double tol64 = 1e-4;
  std::size_t probes = 8;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string out = "onix4d_out";
  SimulateSection simulate;
  TrainSection train;
  RenderSection render;
  EvaluateSection evaluate;
  SartSection sart;
  GradcheckSection gradcheck;
  json resolved;  // the merged document, logged by every run
};

namespace config_detail {

inline json model_json(const ModelConfig& m) {
  return {{"image_channels", m.image_channels},
          {"encoder_channels", m.encoder_channels},
          {"hidden", m.hidden},
          {"view_blocks", m.view_blocks},
          {"joint_blocks", m.joint_blocks},
          {"fourier_encoding", m.fourier_encoding},
          {"xyz_frequencies", m.xyz_frequencies},
          {"t_frequencies", m.t_frequencies},
          {"time_input", m.time_input},
          {"patch", m.patch},
          {"disc_channels", m.disc_channels},
          {"head_bias", m.head_bias}};
}

inline ModelConfig model_from(const json& j) {
  ModelConfig m;
  m.image_channels = j.at("image_channels");
  m.encoder_channels = j.at("encoder_channels").get<std::vector<std::size_t>>();
  m.hidden = j.at("hidden");
  m.view_blocks = j.at("view_blocks");
  m.joint_blocks = j.at("joint_blocks");
  m.fourier_encoding = j.at("fourier_encoding");
  m.xyz_frequencies = j.at("xyz_frequencies");
  m.t_frequencies = j.at("t_frequencies");
  m.time_input = j.at("time_input");
  m.patch = j.at("patch");
  m.disc_channels = j.at("disc_channels");
  m.head_bias = j.at("head_bias");
  m.validate();
  return m;
}

inline json train_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"warmup_epochs", c.warmup_epochs},
          {"lr", c.lr},
          {"lr_decay", c.lr_decay},
          {"decay_every", c.decay_every},
          {"mode", to_string(c.mode)},
          {"dice_gan_probability", c.dice_gan_probability},
          {"mse_weight_after_warmup", c.mse_weight_after_warmup},
          {"adversarial_weight", c.adversarial_weight},
          {"reg_weight", c.reg_weight},
          {"reg_samples", c.reg_samples},
          {"samples_per_ray", c.samples_per_ray},
          {"render_views", c.render_views},
          {"patch", {{"size", c.patch.size}, {"min_scale", c.patch.min_scale}, {"max_scale", c.patch.max_scale}}},
          {"checkpoint_every", c.checkpoint_every},
          {"clamp_eps", c.clamp_eps},
          {"max_nonfinite", c.max_nonfinite},
          {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}}};
}

inline TrainConfig train_from(const json& j, std::uint64_t seed) {
  TrainConfig c;
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  c.warmup_epochs = j.at("warmup_epochs");
  c.lr = j.at("lr");
  c.lr_decay = j.at("lr_decay");
  c.decay_every = j.at("decay_every");
  c.mode = train_mode_from(j.at("mode").get<std::string>());
  c.dice_gan_probability = j.at("dice_gan_probability");
  c.mse_weight_after_warmup = j.at("mse_weight_after_warmup");
  c.adversarial_weight = j.at("adversarial_weight");
  c.reg_weight = j.at("reg_weight");
  c.reg_samples = j.at("reg_samples");
  c.samples_per_ray = j.at("samples_per_ray");
  c.render_views = j.at("render_views");
  c.patch.size = j.at("patch").at("size");
  c.patch.min_scale = j.at("patch").at("min_scale");
  c.patch.max_scale = j.at("patch").at("max_scale");
  c.checkpoint_every = j.at("checkpoint_every");
  c.clamp_eps = j.at("clamp_eps");
  c.max_nonfinite = j.at("max_nonfinite");
  c.adam.beta1 = j.at("adam").at("beta1");
  c.adam.beta2 = j.at("adam").at("beta2");
  c.adam.eps = j.at("adam").at("eps");
  c.adam.lr = c.lr;
  c.seed = seed;
  c.validate();
  return c;
}

inline json azimuths_json(const std::vector<double>& a) {
  if (a.empty()) return "random";
  if (a == reference_azimuths()) return "reference";
  return a;
}

inline std::vector<double> azimuths_from(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "random") return {};
    if (s == "reference") return reference_azimuths();
    throw ConfigError("simulate.azimuths: expected \"random\", \"reference\" or a list, got \"" + s + "\"");
  }
  if (!j.is_array()) throw ConfigError("simulate.azimuths: expected a string or a list");
  return j.get<std::vector<double>>();
}

// Keys whose default is null or whose value may change type.
inline bool is_free(const std::string& path) {
  return path == "simulate.azimuths" || path == "evaluate.data_range";
}

inline const char* type_name(const json& j) {
  if (j.is_number()) return "number";
  return j.type_name();
}

inline bool compatible(const json& def, const json& val) {
  if (def.is_number()) return val.is_number();
  if (def.is_boolean()) return val.is_boolean();
  if (def.is_string()) return val.is_string();
  if (def.is_array()) return val.is_array();
  if (def.is_object()) return val.is_object();
  return true;
}

inline void merge(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError((path.empty() ? std::string("config") : path) + ": expected an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + p + "'");
    json& slot = base[it.key()];
    if (is_free(p)) {
      slot = it.value();
      continue;
    }
    if (!compatible(slot, it.value())) {
      throw ConfigError("config key '" + p + "' expects " + type_name(slot) + ", got " + type_name(it.value()));
    }
    if (slot.is_object()) merge(slot, it.value(), p);
    else if (slot.is_number_unsigned() && it.value().is_number_integer() && it.value().get<long long>() < 0)
      throw ConfigError("config key '" + p + "' must be non-negative");
    else if (slot.is_number_unsigned() && it.value().is_number_float())
      throw ConfigError("config key '" + p + "' must be an integer");
    else slot = it.value();
  }
}

inline std::vector<std::size_t> index_list(const json& j) { return j.get<std::vector<std::size_t>>(); }

}  // namespace config_detail

inline json default_config_json() {
  using namespace config_detail;
  const RunConfig d;
  const auto& s = d.simulate;
  const auto& sa = d.sart;
  json j;
  j["seed"] = d.seed;
  j["threads"] = d.threads;
  j["out"] = d.out;
  j["simulate"] = {{"phantom", to_string(s.phantom)},
                   {"scenario", to_string(s.set.kind)},
                   {"experiments", s.set.n_experiments},
                   {"timestamps", s.timestamps},
                   {"relative_angles", s.set.relative_angles},
                   {"jitter", s.set.jitter},
                   {"azimuths", azimuths_json(s.set.azimuths)},
                   {"acquisition", io::to_json(s.acquisition)},
                   {"droplet", io::to_json(s.droplet)},
                   {"melt", io::to_json(s.melt)}};
  j["simulate"]["acquisition"].erase("relative_angles");
  j["simulate"]["droplet"].erase("timestamps");
  j["simulate"]["melt"].erase("timestamps");
  j["train"] = {{"data", d.train.data},
                {"resume", d.train.resume},
                {"model", model_json(d.train.model)},
                {"optim", train_json(d.train.train)}};
  j["render"] = {{"data", d.render.data},
                 {"checkpoint", d.render.checkpoint},
                 {"grid", d.render.grid},
                 {"experiments", d.render.experiments},
                 {"timestamp_stride", d.render.timestamp_stride},
                 {"frames", d.render.frames}};
  j["evaluate"] = {{"data", d.evaluate.data},
                   {"checkpoint", d.evaluate.checkpoint},
                   {"volumes", d.evaluate.volumes},
                   {"grid", d.evaluate.grid},
                   {"experiments", d.evaluate.experiments},
                   {"timestamp_stride", d.evaluate.timestamp_stride},
                   {"data_range", *d.evaluate.data_range},
                   {"fsc", d.evaluate.fsc}};
  j["sart"] = {{"source", sa.source},
               {"data", sa.data},
               {"phantom", to_string(sa.phantom)},
               {"views", sa.views},
               {"span_deg", sa.span_deg},
               {"grid", sa.grid},
               {"timestamps", sa.timestamps},
               {"timeline", sa.timeline},
               {"experiments", sa.experiments},
               {"iterations", sa.sart.iterations},
               {"relaxation", sa.sart.relaxation},
               {"nonnegative", sa.sart.nonnegative},
               {"samples_per_ray", sa.sart.samples_per_ray},
               {"acquisition", io::to_json(sa.acquisition)},
               {"droplet", io::to_json(sa.droplet)},
               {"melt", io::to_json(sa.melt)}};
  j["sart"]["acquisition"].erase("relative_angles");
  j["sart"]["droplet"].erase("timestamps");
  j["sart"]["melt"].erase("timestamps");
  j["gradcheck"] = {{"step32", d.gradcheck.step32},
                    {"step64", d.gradcheck.step64},
                    {"tol32", d.gradcheck.tol32},
                    {"tol64", d.gradcheck.tol64},
                    {"probes", d.gradcheck.probes}};
  return j;
}

// Builds a RunConfig from a (possibly empty) user document.
inline RunConfig parse_config(const json& user) {
  using namespace config_detail;
  json m = default_config_json();
  if (!user.is_null()) merge(m, user, "");
  RunConfig c;
  try {
    c.seed = m.at("seed");
    c.threads = m.at("threads");
    if (c.threads == 0) throw ConfigError("threads must be >= 1");
    c.out = m.at("out");

    const auto& s = m.at("simulate");
    c.simulate.phantom = phantom_kind_from(s.at("phantom"));
    c.simulate.set.phantom = c.simulate.phantom;
    c.simulate.set.kind = scenario_kind_from(s.at("scenario"));
    c.simulate.set.n_experiments = s.at("experiments");
    c.simulate.set.relative_angles = s.at("relative_angles").get<std::vector<double>>();
    c.simulate.set.jitter = s.at("jitter");
    c.simulate.set.azimuths = azimuths_from(s.at("azimuths"));
    c.simulate.set.seed = c.seed;
    c.simulate.timestamps = s.at("timestamps");
    json acq = s.at("acquisition");
    acq["relative_angles"] = c.simulate.set.relative_angles;
    c.simulate.acquisition = io::acquisition_from(acq);
    json dr = s.at("droplet");
    dr["timestamps"] = c.simulate.timestamps;
    c.simulate.droplet = io::droplet_from(dr);
    json me = s.at("melt");
    me["timestamps"] = c.simulate.timestamps;
    c.simulate.melt = io::melt_from(me);
    if (c.simulate.timestamps == 0) throw ConfigError("simulate.timestamps must be >= 1");
    validate_relative_angles(c.simulate.set.relative_angles);

    const auto& t = m.at("train");
    c.train.data = t.at("data");
    c.train.resume = t.at("resume");
    c.train.model = model_from(t.at("model"));
    c.train.train = train_from(t.at("optim"), c.seed);
    if (c.train.train.patch.size != c.train.model.patch) {
      throw ConfigError("train.optim.patch.size must equal train.model.patch");
    }

    const auto& r = m.at("render");
    c.render.data = r.at("data");
    c.render.checkpoint = r.at("checkpoint");
    c.render.grid = r.at("grid");
    c.render.experiments = index_list(r.at("experiments"));
    c.render.timestamp_stride = r.at("timestamp_stride");
    c.render.frames = r.at("frames");
    if (c.render.grid < 2 || c.render.timestamp_stride == 0) throw ConfigError("render: grid >= 2 and stride >= 1");

    const auto& e = m.at("evaluate");
    c.evaluate.data = e.at("data");
    c.evaluate.checkpoint = e.at("checkpoint");
    c.evaluate.volumes = e.at("volumes");
    c.evaluate.grid = e.at("grid");
    c.evaluate.experiments = index_list(e.at("experiments"));
    c.evaluate.timestamp_stride = e.at("timestamp_stride");
    if (e.at("data_range").is_null()) c.evaluate.data_range.reset();
    else if (e.at("data_range").is_number()) c.evaluate.data_range = e.at("data_range").get<double>();
    else throw ConfigError("evaluate.data_range must be a number or null");
    c.evaluate.fsc = e.at("fsc");
    if (c.evaluate.grid < 2 || c.evaluate.timestamp_stride == 0) throw ConfigError("evaluate: grid >= 2 and stride >= 1");

    const auto& a = m.at("sart");
    c.sart.source = a.at("source");
    if (c.sart.source != "phantom" && c.sart.source != "dataset") {
      throw ConfigError("sart.source must be \"phantom\" or \"dataset\"");
    }
    c.sart.data = a.at("data");
    c.sart.phantom = phantom_kind_from(a.at("phantom"));
    c.sart.views = a.at("views");
    c.sart.span_deg = a.at("span_deg");
    c.sart.grid = a.at("grid");
    c.sart.timestamps = index_list(a.at("timestamps"));
    c.sart.timeline = a.at("timeline");
    c.sart.experiments = a.at("experiments");
    c.sart.sart.iterations = a.at("iterations");
    c.sart.sart.relaxation = a.at("relaxation");
    c.sart.sart.nonnegative = a.at("nonnegative");
    c.sart.sart.samples_per_ray = a.at("samples_per_ray");
    json sacq = a.at("acquisition");
    sacq["relative_angles"] = json::array({0.0});
    c.sart.acquisition = io::acquisition_from(sacq);
    json sdr = a.at("droplet");
    sdr["timestamps"] = c.sart.timeline;
    c.sart.droplet = io::droplet_from(sdr);
    json sme = a.at("melt");
    sme["timestamps"] = c.sart.timeline;
    c.sart.melt = io::melt_from(sme);
    if (c.sart.views == 0 || c.sart.grid < 2 || c.sart.timeline == 0) {
      throw ConfigError("sart: views >= 1, grid >= 2 and timeline >= 1 required");
    }
    for (auto ts : c.sart.timestamps)
      if (ts >= c.sart.timeline) throw ConfigError("sart.timestamps entry outside the timeline");

    const auto& g = m.at("gradcheck");
    c.gradcheck.step32 = g.at("step32");
    c.gradcheck.step64 = g.at("step64");
    c.gradcheck.tol32 = g.at("tol32");
    c.gradcheck.tol64 = g.at("tol64");
    c.gradcheck.probes = g.at("probes");
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  c.resolved = std::move(m);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& p) {
  json j;
  try {
    j = json::parse(io::read_text(p));
  } catch (const json::exception& ex) {
    throw ConfigError(p.string() + ": invalid JSON: " + ex.what());
  }
  return parse_config(j);
}

// Model architecture stored next to a checkpoint.
inline std::filesystem::path model_sidecar(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p.replace_extension(".model.json");
  return p;
}

inline void write_model_sidecar(const std::filesystem::path& checkpoint, const ModelConfig& m) {
  io::write_text(model_sidecar(checkpoint), config_detail::model_json(m).dump(2) + "\n");
}

inline ModelConfig read_model_sidecar(const std::filesystem::path& checkpoint) {
  const auto p = model_sidecar(checkpoint);
  if (!std::filesystem::exists(p)) throw io::FormatError(p.string() + ": model description missing");
  try {
    json j = json::parse(io::read_text(p));
    json base = config_detail::model_json(ModelConfig{});
    config_detail::merge(base, j, "model");
    return config_detail::model_from(base);
  } catch (const json::exception& ex) {
    throw io::FormatError(p.string() + ": " + ex.what());
  }
}

}  // namespace onix
