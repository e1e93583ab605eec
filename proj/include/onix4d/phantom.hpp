#pragma once

// Closed-form 4D phantoms: a binary droplet collision and a layered block with
// a melt pool. Fields return the refractive decrement and absorption index
// (delta, beta) at a world point for one normalised time t in [0, 1].

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <tuple>
#include <utility>

#include "onix4d/geometry.hpp"
#include "onix4d/grid.hpp"

namespace onix {

struct IoR {
  double delta = 0;
  double beta = 0;
};

struct Material {
  double delta0 = 0;
  double beta0 = 0;
};

inline double wavelength_m(double energy_kev) { return 1.2398419843320026e-9 / energy_kev; }

// Water-like material (delta/beta = 1000) scaled so that a chord of
// `peak_chord` world units gives an absorption line integral of `peak_absorption`.
inline Material water_like(double energy_kev = 10.0, double unit_length_m = 1e-4, double peak_chord = 0.7,
                           double peak_absorption = 0.5, double delta_over_beta = 1000.0) {
  const double lambda = wavelength_m(energy_kev);
  const double beta = peak_absorption * lambda / (4.0 * std::numbers::pi * peak_chord * unit_length_m);
  return {beta * delta_over_beta, beta};
}

namespace detail {

inline double smoothstep01(double x) {
  if (x <= 0) return 0;
  if (x >= 1) return 1;
  return x * x * (3 - 2 * x);
}

// Polynomial smooth minimum of two signed distances.
inline double smooth_min(double a, double b, double k) {
  if (k <= 0) return std::min(a, b);
  const double h = std::clamp(0.5 + 0.5 * (b - a) / k, 0.0, 1.0);
  return b * (1 - h) + a * h - k * h * (1 - h);
}

// Occupancy in [0, 1] with a boundary band of width `band` centred on d = 0.
inline double occupancy(double d, double band) {
  if (band <= 0) return d < 0 ? 1.0 : 0.0;
  return smoothstep01(0.5 - d / band);
}

inline double sphere_sdf(const Vec3& p, const Vec3& c, double r) { return (p - c).norm() - r; }

inline double ellipsoid_sdf(const Vec3& q, const Vec3& a) {
  const double k0 = std::sqrt((q.x / a.x) * (q.x / a.x) + (q.y / a.y) * (q.y / a.y) + (q.z / a.z) * (q.z / a.z));
  const double k1 = std::sqrt((q.x / (a.x * a.x)) * (q.x / (a.x * a.x)) + (q.y / (a.y * a.y)) * (q.y / (a.y * a.y)) +
                              (q.z / (a.z * a.z)) * (q.z / (a.z * a.z)));
  if (k1 < 1e-300) return -std::min({a.x, a.y, a.z});
  return k0 * (k0 - 1.0) / k1;
}

}  // namespace detail

// Uniform sphere; used by the quadrature and reconstruction oracles.
struct SphereField {
  Vec3 center;
  double radius = 0.5;
  Material material{1.0, 1.0};
  double band = 0.0;

  IoR operator()(const Vec3& p) const {
    const double o = detail::occupancy(detail::sphere_sdf(p, center, radius), band);
    return {o * material.delta0, o * material.beta0};
  }
};

struct DropletScenario {
  double r1 = 0.28;
  double r2 = 0.28;
  double v1 = 0.8;             // droplet 1 moves towards +x
  double v2 = 0.8;             // droplet 2 moves towards -x
  double impact = 0.0;         // offset along y between the approach lines
  double start_x = 0.6;        // |x| of both centres at t = 0
  double smoothness = 0.06;    // merge smoothness and boundary band width
  double merge_duration = 0.2;
  double oscillation_period = 0.3;
  double damping = 5.0;
  double oscillation_amplitude = 0.25;
  Material material = water_like();
  std::size_t timestamps = 75;

  double merged_radius() const { return std::cbrt(r1 * r1 * r1 + r2 * r2 * r2); }

  // Time of first contact, +inf if the droplets miss each other.
  double contact_time() const {
    const double reach = r1 + r2;
    const double rel = v1 + v2;
    if (impact >= reach || rel <= 0) return std::numeric_limits<double>::infinity();
    const double dx = std::sqrt(reach * reach - impact * impact);
    return std::max(0.0, (2 * start_x - dx) / rel);
  }

  double timestamp_time(std::size_t k) const {
    return timestamps > 1 ? static_cast<double>(k) / static_cast<double>(timestamps - 1) : 0.0;
  }
};

// Field of one droplet scenario frozen at time t.
class DropletSlice {
 public:
  DropletSlice(const DropletScenario& s, double t) : s_(s) {
    const double tc = s.contact_time();
    const double m1 = s.r1 * s.r1 * s.r1, m2 = s.r2 * s.r2 * s.r2;
    auto centers_at = [&](double tt) {
      return std::pair<Vec3, Vec3>{{-s.start_x + s.v1 * tt, -0.5 * s.impact, 0.0},
                                   {s.start_x - s.v2 * tt, 0.5 * s.impact, 0.0}};
    };
    if (t < tc) {
      phase_ = Phase::Approach;
      std::tie(c1_, c2_) = centers_at(t);
      rad1_ = s.r1;
      rad2_ = s.r2;
      k_ = s.smoothness;
      return;
    }
    const auto [c1c, c2c] = centers_at(tc);
    const Vec3 com_c = (c1c * m1 + c2c * m2) * (1.0 / (m1 + m2));
    const double v_com = (m1 * s.v1 - m2 * s.v2) / (m1 + m2);
    const Vec3 com = com_c + Vec3{v_com * (t - tc), 0.0, 0.0};
    const double R = s.merged_radius();
    const double tm = tc + s.merge_duration;
    if (t < tm) {
      phase_ = Phase::Merge;
      const double se = detail::smoothstep01((t - tc) / s.merge_duration);
      c1_ = com + (c1c - com_c) * (1 - se);
      c2_ = com + (c2c - com_c) * (1 - se);
      rad1_ = s.r1 + se * (R - s.r1);
      rad2_ = s.r2 + se * (R - s.r2);
      k_ = s.smoothness * (1 - se);
      return;
    }
    phase_ = Phase::Relax;
    c1_ = com;
    const double tau = t - tm;
    const double a = s.oscillation_amplitude * std::exp(-s.damping * tau) *
                     std::sin(2 * std::numbers::pi * tau / s.oscillation_period);
    const double ax = R * (1 - a);
    const double ayz = R / std::sqrt(1 - a);
    axes_ = {ax, ayz, ayz};
  }

  double signed_distance(const Vec3& p) const {
    switch (phase_) {
      case Phase::Approach:
      case Phase::Merge:
        return detail::smooth_min(detail::sphere_sdf(p, c1_, rad1_), detail::sphere_sdf(p, c2_, rad2_), k_);
      case Phase::Relax:
        return detail::ellipsoid_sdf(p - c1_, axes_);
    }
    return 0;
  }

  double occupancy(const Vec3& p) const { return detail::occupancy(signed_distance(p), s_.smoothness); }

  IoR operator()(const Vec3& p) const {
    const double o = occupancy(p);
    return {o * s_.material.delta0, o * s_.material.beta0};
  }

  enum class Phase { Approach, Merge, Relax };
  Phase phase() const { return phase_; }

 private:
  DropletScenario s_;
  Phase phase_ = Phase::Approach;
  Vec3 c1_, c2_;
  double rad1_ = 0, rad2_ = 0, k_ = 0;
  Vec3 axes_;
};

inline DropletSlice droplet_field(const DropletScenario& s, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw Error("droplet_field: t must lie in [0, 1]");
  return DropletSlice(s, t);
}

struct MeltScenario {
  double half_x = 0.7;
  double half_y = 0.7;
  double z_bottom = -0.6;
  double z_top = 0.2;
  std::size_t layers = 6;
  double layer_contrast = 0.2;  // alternate layers are this much less dense
  double pool_center_x = 0.0;
  double pool_half_x = 0.35;
  double pool_half_y = 0.25;
  double max_depth = 0.4;
  double pool_density = 0.5;
  Material material = water_like();
  std::size_t timestamps = 60;
};

// Melt-pool depth below the top surface: zero at t = 0, smooth, reaching
// max_depth at t = 1.
inline double melt_pool_depth(const MeltScenario& s, double t) {
  return s.max_depth * 0.5 * (1.0 - std::cos(std::numbers::pi * t));
}

inline bool in_melt_pool(const MeltScenario& s, double t, const Vec3& p) {
  const double depth = melt_pool_depth(s, t);
  if (depth <= 0 || p.z > s.z_top) return false;
  const double qx = (p.x - s.pool_center_x) / s.pool_half_x;
  const double qy = p.y / s.pool_half_y;
  const double qz = (p.z - s.z_top) / depth;
  return qx * qx + qy * qy + qz * qz < 1.0;
}

class MeltSlice {
 public:
  MeltSlice(const MeltScenario& s, double t) : s_(s), t_(t) {}

  double density(const Vec3& p) const {
    if (std::abs(p.x) > s_.half_x || std::abs(p.y) > s_.half_y || p.z < s_.z_bottom || p.z > s_.z_top) return 0.0;
    if (in_melt_pool(s_, t_, p)) return s_.pool_density;
    const double h = (p.z - s_.z_bottom) / (s_.z_top - s_.z_bottom);
    const auto layer = std::min<std::size_t>(s_.layers - 1, static_cast<std::size_t>(h * static_cast<double>(s_.layers)));
    return layer % 2 ? 1.0 - s_.layer_contrast : 1.0;
  }

  IoR operator()(const Vec3& p) const {
    const double d = density(p);
    return {d * s_.material.delta0, d * s_.material.beta0};
  }

 private:
  MeltScenario s_;
  double t_;
};

inline MeltSlice melt_phantom(const MeltScenario& s, double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw Error("melt_phantom: t must lie in [0, 1]");
  return MeltSlice(s, t);
}

// Field in the frame of an experiment whose first view sits at azimuth phi1:
// the sample as seen with that view relabelled to azimuth 0.
template <class Field>
auto in_experiment_frame(Field field, double phi1_deg) {
  return [field = std::move(field), phi1_deg](const Vec3& p) { return field(rotate_z(p, phi1_deg)); };
}

}  // namespace onix
