#pragma once

// Subcommands: simulate, train, render, evaluate, sart, gradcheck. Each reads
// its section of a RunConfig, writes into cfg.out and returns a JSON summary.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "onix4d/config.hpp"
#include "onix4d/evaluation.hpp"
#include "onix4d/gradcheck_suite.hpp"
#include "onix4d/log.hpp"
#include "onix4d/sart.hpp"

namespace onix {

namespace fs = std::filesystem;

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> s{"simulate", "train", "render", "evaluate", "sart", "gradcheck"};
  return s;
}

inline std::string volume_name(std::size_t experiment, std::size_t t) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "exp%03zu_t%03zu.xvol", experiment, t);
  return buf;
}

inline std::string frame_name(const char* kind, std::size_t t) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03zu.pgm", kind, t);
  return buf;
}

inline void set_threads(std::size_t n) {
#ifdef _OPENMP
  omp_set_num_threads(static_cast<int>(n));
#else
  (void)n;
#endif
}

namespace pipeline_detail {

inline void require_path(const std::string& value, const std::string& key) {
  if (value.empty()) throw ConfigError(key + " is required");
}

inline void log_config(const RunConfig& c, const std::string& cmd, const Logger& log) {
  io::write_text(fs::path(c.out) / "config.json", c.resolved.dump(2) + "\n");
  log.info(cmd + ": resolved config " + c.resolved.dump());
}

inline std::vector<std::size_t> selected(const std::vector<io::ExperimentImages>& data,
                                         const std::vector<std::size_t>& ids) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (ids.empty() || std::find(ids.begin(), ids.end(), data[i].id) != ids.end()) out.push_back(i);
  for (auto id : ids) {
    bool found = false;
    for (const auto& d : data) found = found || d.id == id;
    if (!found) throw ConfigError("experiment " + std::to_string(id) + " is not in the dataset");
  }
  return out;
}

inline OnixModel<float> load_model(const std::string& checkpoint, std::uint64_t seed) {
  const ModelConfig mc = read_model_sidecar(checkpoint);
  OnixModel<float> model(mc, seed);
  io::load_checkpoint(checkpoint, model.params());
  return model;
}

}  // namespace pipeline_detail

inline json run_simulate(const RunConfig& c, const Logger& log) {
  const auto& s = c.simulate;
  pipeline_detail::log_config(c, "simulate", log);
  Dataset ds = s.phantom == PhantomKind::Droplet
                   ? build_experiment_set(s.set, s.droplet, s.acquisition, s.timestamps)
                   : build_experiment_set(s.set, s.melt, s.acquisition, s.timestamps);
  io::write_dataset(c.out, ds);
  const json summary = {{"manifest", (fs::path(c.out) / "manifest.json").string()},
                        {"experiments", ds.experiments.size()},
                        {"timestamps", ds.timestamps()},
                        {"views", ds.views()},
                        {"projections", ds.projection_count()}};
  log.info("simulate: " + summary.dump());
  return summary;
}

inline json run_train(const RunConfig& c, const Logger& log) {
  const auto& s = c.train;
  pipeline_detail::require_path(s.data, "train.data");
  pipeline_detail::log_config(c, "train", log);
  io::ManifestReader manifest(s.data);
  const auto data = io::load_training_images(manifest);
  OnixModel<float> model(s.model, c.seed);
  if (!s.resume.empty()) io::load_checkpoint(s.resume, model.params());
  const fs::path out(c.out);
  fs::create_directories(out);
  std::ofstream log_file(out / "train_log.jsonl", std::ios::trunc);
  if (!log_file) throw Error("cannot write " + (out / "train_log.jsonl").string());
  const fs::path final_ckpt = out / "model.onixckpt";
  TrainHooks hooks;
  hooks.on_iteration = [&](const LogRecord& r) {
    log_file << r.to_json().dump() << "\n";
    if (log.enabled(LogLevel::Debug)) log.debug("train: " + r.to_json().dump());
  };
  hooks.on_checkpoint = [&](std::size_t epoch, bool final) {
    char name[64];
    std::snprintf(name, sizeof name, "epoch%04zu.onixckpt", epoch);
    const fs::path p = final ? final_ckpt : out / "checkpoints" / name;
    io::save_checkpoint(p, model.params());
    write_model_sidecar(p, s.model);
    log.info("train: epoch " + std::to_string(epoch) + " checkpoint " + p.string());
  };
  Trainer trainer(model, s.train, manifest.training().acquisition.detector, data);
  const auto res = trainer.run(hooks);
  log_file.flush();
  const json summary = {{"checkpoint", final_ckpt.string()},
                        {"iterations", res.iterations},
                        {"d_steps", res.d_steps},
                        {"skipped", res.skipped},
                        {"parameters", model.params().parameter_count()}};
  log.info("train: " + summary.dump());
  return summary;
}

inline json run_render(const RunConfig& c, const Logger& log) {
  const auto& s = c.render;
  pipeline_detail::require_path(s.data, "render.data");
  pipeline_detail::require_path(s.checkpoint, "render.checkpoint");
  pipeline_detail::log_config(c, "render", log);
  io::ManifestReader manifest(s.data);
  const auto data = io::load_training_images(manifest);
  const auto model = pipeline_detail::load_model(s.checkpoint, c.seed);
  const Detector det = manifest.training().acquisition.detector;
  const fs::path out(c.out);
  json volumes = json::array();
  for (std::size_t i : pipeline_detail::selected(data, s.experiments)) {
    const auto& e = data[i];
    std::vector<std::pair<std::size_t, Volume>> seq;
    for (std::size_t t = 0; t < e.timestamps; t += s.timestamp_stride) {
      ad::NoGradGuard ng;
      Volume v = predict_volume(model, condition_on(model, e, t, det), s.grid);
      const auto name = volume_name(e.id, t);
      io::write_xvol(out / "volumes" / name, v);
      volumes.push_back({{"experiment", e.id}, {"timestamp", t}, {"file", "volumes/" + name}});
      if (s.frames) seq.emplace_back(t, std::move(v));
    }
    if (!s.frames) continue;
    // Shared intensity range so that the frame sequence plays as a movie.
    std::vector<std::pair<std::size_t, std::pair<Image, Image>>> frames;
    double hi = 0;
    for (const auto& [t, v] : seq) {
      Image side = project_volume_x(v), top = project_volume_z(v);
      for (float p : side.px) hi = std::max(hi, double(p));
      for (float p : top.px) hi = std::max(hi, double(p));
      frames.push_back({t, {std::move(side), std::move(top)}});
    }
    char dir[32];
    std::snprintf(dir, sizeof dir, "exp%03zu", e.id);
    for (const auto& [t, st] : frames) {
      io::write_pgm(out / "frames" / dir / frame_name("side", t), st.first, 0.0, hi);
      io::write_pgm(out / "frames" / dir / frame_name("top", t), st.second, 0.0, hi);
    }
  }
  const json index = {{"grid", s.grid}, {"channel", "delta/delta_ref"}, {"volumes", volumes}};
  io::write_text(out / "volumes" / "index.json", index.dump(2) + "\n");
  log.info("render: wrote " + std::to_string(volumes.size()) + " volumes");
  return {{"volumes", volumes.size()}, {"index", (out / "volumes" / "index.json").string()}};
}

inline json run_evaluate(const RunConfig& c, const Logger& log) {
  const auto& s = c.evaluate;
  pipeline_detail::require_path(s.data, "evaluate.data");
  if (s.checkpoint.empty() == s.volumes.empty()) {
    throw ConfigError("evaluate: exactly one of evaluate.checkpoint and evaluate.volumes is required");
  }
  pipeline_detail::log_config(c, "evaluate", log);
  io::ManifestReader manifest(s.data);
  const auto data = io::load_training_images(manifest);
  const auto sealed = manifest.eval_section();
  EvalOptions opt;
  opt.grid = s.grid;
  opt.timestamp_stride = s.timestamp_stride;
  opt.experiments = s.experiments;
  opt.data_range = s.data_range;
  opt.fsc = s.fsc;
  pipeline_detail::selected(data, s.experiments);
  EvalReport rep;
  if (!s.checkpoint.empty()) {
    const auto model = pipeline_detail::load_model(s.checkpoint, c.seed);
    rep = evaluate_model(model, data, sealed, manifest.training().reference, manifest.training().acquisition.detector, opt);
  } else {
    rep = evaluate_volumes(data, sealed, manifest.training().reference, opt,
                           [&](const io::ExperimentImages& e, std::size_t t) {
                             const fs::path p = fs::path(s.volumes) / volume_name(e.id, t);
                             Volume v = io::read_xvol(p);
                             if (v.nx != s.grid || v.ny != s.grid || v.nz != s.grid) {
                               throw io::FormatError(p.string() + ": volume dims " + std::to_string(v.nx) + "x" +
                                                     std::to_string(v.ny) + "x" + std::to_string(v.nz) +
                                                     " differ from evaluate.grid " + std::to_string(s.grid));
                             }
                             return v;
                           });
  }
  json report = rep.to_json();
  report["grid"] = s.grid;
  report["volumes_evaluated"] = rep.entries.size();
  const fs::path out(c.out);
  io::write_text(out / "metrics.json", report.dump(2) + "\n");
  if (s.fsc) io::write_text(out / "fsc_curves.csv", rep.curves_csv());
  log.info("evaluate: " + report.at("aggregate").dump());
  return report;
}

namespace pipeline_detail {

template <class Field>
std::vector<Image> dense_projections(const Field& field, const std::vector<double>& angles, const Detector& det,
                                     std::size_t samples, double beta_ref) {
  std::vector<Image> out;
  for (double a : angles) {
    const auto li = integrate_rays(field, rays_for_pixels(pose_from_azimuth(a, det), all_pixels(det)), samples);
    Image img(det.width, det.height);
    for (std::size_t i = 0; i < li.size(); ++i) img.px[i] = static_cast<float>(li[i].beta / beta_ref);
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace pipeline_detail

inline json run_sart(const RunConfig& c, const Logger& log) {
  const auto& s = c.sart;
  pipeline_detail::log_config(c, "sart", log);
  const fs::path out = fs::path(c.out) / "sart";
  json entries = json::array();
  if (s.source == "phantom") {
    SartConfig sc = s.sart;
    sc.angles.clear();
    for (std::size_t i = 0; i < s.views; ++i) sc.angles.push_back(s.span_deg * double(i) / double(s.views));
    const Detector det = s.acquisition.detector;
    for (std::size_t ts : s.timestamps) {
      const double t = timestamp_time(ts, s.timeline);
      ExperimentRecord rec;
      rec.droplet = s.droplet;
      rec.melt = s.melt;
      const Material m = s.phantom == PhantomKind::Droplet ? s.droplet.material : s.melt.material;
      const auto [proj, gt] = with_field(rec, s.phantom, t, [&](const auto& f) {
        return std::make_pair(pipeline_detail::dense_projections(f, sc.angles, det, s.acquisition.samples_per_ray, m.beta0),
                              voxelize([&](const Vec3& p) { return f(p).beta / m.beta0; }, s.grid));
      });
      const auto start = std::chrono::steady_clock::now();
      const SartResult r = sart_reconstruct(proj, sc, s.grid, det);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      char name[64];
      std::snprintf(name, sizeof name, "t%03zu.xvol", ts);
      io::write_xvol(out / name, r.volume);
      entries.push_back({{"timestamp", ts},
                         {"file", std::string("sart/") + name},
                         {"mse", mse(r.volume, gt)},
                         {"residuals", r.residuals},
                         {"seconds", secs}});
      log.info("sart: t=" + std::to_string(ts) + " mse " + std::to_string(mse(r.volume, gt)));
    }
  } else {
    pipeline_detail::require_path(s.data, "sart.data");
    io::ManifestReader manifest(s.data);
    const auto data = io::load_training_images(manifest);
    const Detector det = manifest.training().acquisition.detector;
    SartConfig sc = s.sart;
    sc.angles = data.at(0).relative_angles;
    const std::size_t hw = det.width * det.height;
    for (std::size_t i = 0; i < std::min(s.experiments, data.size()); ++i) {
      const auto& e = data[i];
      for (std::size_t ts : s.timestamps) {
        if (ts >= e.timestamps) throw ConfigError("sart.timestamps entry outside the dataset timeline");
        std::vector<Image> proj;
        const auto planes = e.timestamp(ts);
        for (std::size_t v = 0; v < e.views; ++v) {
          Image img(det.width, det.height);
          std::copy_n(planes.begin() + v * 2 * hw, hw, img.px.begin());
          proj.push_back(std::move(img));
        }
        const SartResult r = sart_reconstruct(proj, sc, s.grid, det);
        const auto name = volume_name(e.id, ts);
        io::write_xvol(out / name, r.volume);
        entries.push_back({{"experiment", e.id}, {"timestamp", ts}, {"file", "sart/" + name}, {"residuals", r.residuals}});
      }
    }
  }
  const json report = {{"source", s.source}, {"grid", s.grid}, {"volumes", entries}};
  io::write_text(out / "sart_report.json", report.dump(2) + "\n");
  return report;
}

inline json run_gradcheck(const RunConfig& c, const Logger& log) {
  pipeline_detail::log_config(c, "gradcheck", log);
  GradSuiteOptions o;
  o.step32 = c.gradcheck.step32;
  o.step64 = c.gradcheck.step64;
  o.tol32 = c.gradcheck.tol32;
  o.tol64 = c.gradcheck.tol64;
  o.probes = c.gradcheck.probes;
  o.seed = c.seed;
  const auto rep = run_gradcheck_suite(o);
  const json j = rep.to_json();
  io::write_text(fs::path(c.out) / "gradcheck.json", j.dump(2) + "\n");
  for (const auto& e : rep.entries) {
    if (!e.passed()) log.warn("gradcheck: " + e.name + " " + e.dtype + " rel err " + std::to_string(e.result.max_rel_error));
  }
  log.info(std::string("gradcheck: ") + (rep.passed() ? "all checks passed" : "FAILURES"));
  return j;
}

// Dispatches one subcommand; returns the process exit code.
inline int run_subcommand(const std::string& cmd, const RunConfig& c, const Logger& log) {
  set_threads(c.threads);
  fs::create_directories(c.out);
  if (cmd == "simulate") run_simulate(c, log);
  else if (cmd == "train") run_train(c, log);
  else if (cmd == "render") run_render(c, log);
  else if (cmd == "evaluate") run_evaluate(c, log);
  else if (cmd == "sart") run_sart(c, log);
  else if (cmd == "gradcheck") return run_gradcheck(c, log).at("passed").get<bool>() ? 0 : 1;
  else throw ConfigError("unknown subcommand '" + cmd + "'");
  return 0;
}

}  // namespace onix
