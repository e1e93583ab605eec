#pragma once

// Experiment sets: repeated runs of one dynamical process, each observed by a
// fixed set of views whose absolute orientation (phi1) is unknown to the
// reconstruction and kept only for evaluation.

#include <cmath>
#include <string>
#include <vector>

#include "onix4d/physics.hpp"

namespace onix {

enum class ScenarioKind { Reproducible, QuasiReproducible };
enum class PhantomKind { Droplet, Melt };

inline std::string to_string(ScenarioKind k) {
  return k == ScenarioKind::Reproducible ? "reproducible" : "quasi-reproducible";
}
inline std::string to_string(PhantomKind k) { return k == PhantomKind::Droplet ? "droplet" : "melt"; }

inline ScenarioKind scenario_kind_from(const std::string& s) {
  if (s == "reproducible") return ScenarioKind::Reproducible;
  if (s == "quasi-reproducible") return ScenarioKind::QuasiReproducible;
  throw Error("unknown scenario kind '" + s + "'");
}
inline PhantomKind phantom_kind_from(const std::string& s) {
  if (s == "droplet") return PhantomKind::Droplet;
  if (s == "melt") return PhantomKind::Melt;
  throw Error("unknown phantom kind '" + s + "'");
}

// Sixteen first-view azimuths used for the 16-experiment droplet sets.
inline const std::vector<double>& reference_azimuths() {
  static const std::vector<double> a{0, 2, 13, 16, 26, 28, 43, 52, 64, 74, 87, 95, 102, 115, 130, 144};
  return a;
}

struct ExperimentSet {
  PhantomKind phantom = PhantomKind::Droplet;
  ScenarioKind kind = ScenarioKind::Reproducible;
  std::size_t n_experiments = 16;
  std::vector<double> relative_angles{0.0, 23.8};
  double jitter = 0.1;                   // relative, quasi-reproducible only
  std::vector<double> azimuths;          // fixed phi1 per experiment; random in [0, 180) when empty
  std::uint64_t seed = 0;
};

struct ExperimentRecord {
  std::size_t id = 0;
  double phi1 = 0;                       // sealed
  DropletScenario droplet;               // sealed
  MeltScenario melt;                     // sealed
  std::size_t timestamps = 0;
  std::vector<double> relative_angles;
  std::vector<ProjectionImage> frames;   // index t * views + v

  std::size_t views() const { return relative_angles.size(); }
  const ProjectionImage& frame(std::size_t t, std::size_t v) const { return frames.at(t * views() + v); }
};

struct Dataset {
  PhantomKind phantom = PhantomKind::Droplet;
  ScenarioKind kind = ScenarioKind::Reproducible;
  std::uint64_t seed = 0;
  Acquisition acquisition;
  Material reference;                    // normalisation (delta_ref, beta_ref)
  std::vector<ExperimentRecord> experiments;

  std::size_t timestamps() const { return experiments.empty() ? 0 : experiments[0].timestamps; }
  std::size_t views() const { return experiments.empty() ? 0 : experiments[0].views(); }
  std::size_t projection_count() const {
    std::size_t n = 0;
    for (const auto& e : experiments) n += e.frames.size();
    return n;
  }
};

inline double timestamp_time(std::size_t k, std::size_t count) {
  return count > 1 ? static_cast<double>(k) / static_cast<double>(count - 1) : 0.0;
}

// Relative angles must start at 0, increase strictly and stay below 180.
inline void validate_relative_angles(const std::vector<double>& a) {
  if (a.empty()) throw Error("relative angle list is empty");
  if (a[0] != 0.0) throw Error("relative angle list must start at 0");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || a[i] < 0 || a[i] >= 180.0) throw Error("relative angle out of range [0, 180)");
    if (i > 0 && !(a[i] > a[i - 1])) throw Error("relative angles must be strictly increasing");
  }
}

// Field of one experiment in the lab frame at normalised time t.
template <class Fn>
decltype(auto) with_field(const ExperimentRecord& e, PhantomKind phantom, double t, Fn&& fn) {
  if (phantom == PhantomKind::Droplet) return fn(droplet_field(e.droplet, t));
  return fn(melt_phantom(e.melt, t));
}

inline DropletScenario jittered(const DropletScenario& s, double jitter, Rng& rng) {
  DropletScenario out = s;
  out.r1 *= uniform(rng, 1 - jitter, 1 + jitter);
  out.r2 *= uniform(rng, 1 - jitter, 1 + jitter);
  out.v1 *= uniform(rng, 1 - jitter, 1 + jitter);
  out.v2 *= uniform(rng, 1 - jitter, 1 + jitter);
  return out;
}

inline MeltScenario jittered(const MeltScenario& s, double jitter, Rng& rng) {
  MeltScenario out = s;
  out.max_depth *= uniform(rng, 1 - jitter, 1 + jitter);
  out.pool_half_x *= uniform(rng, 1 - jitter, 1 + jitter);
  out.pool_half_y *= uniform(rng, 1 - jitter, 1 + jitter);
  return out;
}

// Converts the noisy intensity back to line integrals. The phase channel is
// derived through the single-material ratio.
inline void apply_noise(ProjectionImage& img, const Acquisition& acq, double delta_over_beta, Rng& rng) {
  if (acq.noise.kind == NoiseModel::Kind::None) return;
  const Image raw = corrupt(img.intensity(), acq.noise, nullptr, rng);
  const double phase_per_abs = delta_over_beta * acq.phase_factor() / acq.absorption_factor();
  for (std::size_t i = 0; i < raw.px.size(); ++i) {
    const double a = -std::log(std::max(double(raw.px[i]), 1e-6));
    img.absorption.px[i] = static_cast<float>(a);
    img.phase.px[i] = static_cast<float>(a * phase_per_abs);
  }
}

template <class Scenario>
Dataset build_experiment_set(const ExperimentSet& spec, const Scenario& base, const Acquisition& acq,
                             std::size_t timestamps) {
  constexpr bool droplet = std::is_same_v<Scenario, DropletScenario>;
  if (spec.n_experiments == 0) throw Error("build_experiment_set: n_experiments must be >= 1");
  if (timestamps == 0) throw Error("build_experiment_set: timestamps must be >= 1");
  if ((spec.phantom == PhantomKind::Droplet) != droplet) throw Error("build_experiment_set: phantom kind mismatch");
  validate_relative_angles(spec.relative_angles);
  if (!spec.azimuths.empty() && spec.azimuths.size() < spec.n_experiments) {
    throw Error("build_experiment_set: fewer fixed azimuths than experiments");
  }
  if (spec.jitter < 0 || spec.jitter >= 1) throw Error("build_experiment_set: jitter must lie in [0, 1)");
  Dataset ds;
  ds.phantom = spec.phantom;
  ds.kind = spec.kind;
  ds.seed = spec.seed;
  ds.acquisition = acq;
  ds.acquisition.relative_angles = spec.relative_angles;
  ds.reference = base.material;
  Rng pose_rng = make_rng(spec.seed, "phi1");
  Rng jitter_rng = make_rng(spec.seed, "jitter");
  Rng noise_rng = make_rng(spec.seed, "noise");
  const double ratio = base.material.beta0 > 0 ? base.material.delta0 / base.material.beta0 : 0.0;
  for (std::size_t e = 0; e < spec.n_experiments; ++e) {
    ExperimentRecord rec;
    rec.id = e;
    rec.timestamps = timestamps;
    rec.relative_angles = spec.relative_angles;
    rec.phi1 = spec.azimuths.empty() ? uniform(pose_rng, 0.0, 180.0) : spec.azimuths[e];
    Scenario s = spec.kind == ScenarioKind::QuasiReproducible ? jittered(base, spec.jitter, jitter_rng) : base;
    s.timestamps = timestamps;
    if constexpr (droplet) rec.droplet = s;
    else rec.melt = s;
    for (std::size_t t = 0; t < timestamps; ++t) {
      const double tt = timestamp_time(t, timestamps);
      for (double rel : spec.relative_angles) {
        const ViewPose pose = pose_from_azimuth(rec.phi1 + rel, acq.detector);
        ProjectionImage img = with_field(rec, spec.phantom, tt, [&](const auto& f) {
          return render_projection(f, pose, acq);
        });
        apply_noise(img, acq, ratio, noise_rng);
        img.azimuth_deg = rel;  // only the relative angle is part of the recorded data
        img.timestamp = t;
        img.experiment = e;
        rec.frames.push_back(std::move(img));
      }
    }
    ds.experiments.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace onix
