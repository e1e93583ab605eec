#pragma once

// Projection-approximation forward model and detector-side processing.
//
// A pixel records the straight-line integrals of the refractive index along
// its ray: absorption A = (4 pi / lambda) * int beta ds and phase
// Phi = (2 pi / lambda) * int delta ds. Both are evaluated with an n-point
// midpoint rule over the part of the ray inside the world box.

#include <fftw3.h>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "onix4d/autodiff.hpp"
#include "onix4d/geometry.hpp"
#include "onix4d/grid.hpp"
#include "onix4d/phantom.hpp"

namespace onix {

enum class Channel : std::uint8_t { Absorption = 0, Phase = 1, Intensity = 2 };

struct NoiseModel {
  enum class Kind { None, Gaussian, Poisson };
  Kind kind = Kind::None;
  double sigma = 0.0;     // gaussian, in intensity units
  double photons = 0.0;   // poisson, mean counts per unit intensity
};

struct Acquisition {
  double energy_kev = 10.0;
  double unit_length_m = 1e-4;  // metres per world unit
  Detector detector;
  std::size_t samples_per_ray = 64;
  NoiseModel noise;
  std::vector<double> relative_angles{0.0, 23.8};

  double wavelength() const { return wavelength_m(energy_kev); }
  // Multiplies int beta ds (world units) to give A.
  double absorption_factor() const { return 4.0 * std::numbers::pi / wavelength() * unit_length_m; }
  // Multiplies int delta ds (world units) to give Phi.
  double phase_factor() const { return 2.0 * std::numbers::pi / wavelength() * unit_length_m; }
};

struct ProjectionImage {
  Image absorption;
  Image phase;
  double azimuth_deg = 0;
  std::size_t timestamp = 0;
  std::size_t experiment = 0;

  Image intensity() const {
    Image out(absorption.width, absorption.height);
    for (std::size_t i = 0; i < out.px.size(); ++i) out.px[i] = static_cast<float>(std::exp(-double(absorption.px[i])));
    return out;
  }
};

// Midpoint-rule line integrals of (delta, beta) along each ray, in world units.
template <class Field>
std::vector<IoR> integrate_rays(const Field& field, const std::vector<Ray>& rays, std::size_t n) {
  if (n == 0) throw Error("integrate_rays: samples per ray must be >= 1");
  std::vector<IoR> out(rays.size());
  const std::ptrdiff_t count = static_cast<std::ptrdiff_t>(rays.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < count; ++r) {
    const Ray& ray = rays[static_cast<std::size_t>(r)];
    if (ray.empty()) continue;
    const double ds = ray.length() / static_cast<double>(n);
    double sd = 0, sb = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const IoR v = field(ray.at(ray.t_near + (static_cast<double>(i) + 0.5) * ds));
      sd += v.delta;
      sb += v.beta;
    }
    out[static_cast<std::size_t>(r)] = {sd * ds, sb * ds};
  }
  return out;
}

template <class Field>
ProjectionImage render_projection(const Field& field, const ViewPose& pose, const Acquisition& acq) {
  if (acq.samples_per_ray == 0) throw Error("render_projection: samples per ray must be >= 1");
  const auto rays = rays_for_pixels(pose, all_pixels(pose.detector));
  const auto li = integrate_rays(field, rays, acq.samples_per_ray);
  ProjectionImage img;
  img.absorption = Image(pose.detector.width, pose.detector.height);
  img.phase = Image(pose.detector.width, pose.detector.height);
  img.azimuth_deg = pose.azimuth_deg;
  const double fa = acq.absorption_factor(), fp = acq.phase_factor();
  for (std::size_t i = 0; i < li.size(); ++i) {
    img.absorption.px[i] = static_cast<float>(fa * li[i].beta);
    img.phase.px[i] = static_cast<float>(fp * li[i].delta);
  }
  return img;
}

// Differentiable counterpart for a learned field. `query` maps a list of world
// points to a [P, C] variable; the result is [rays, C] holding sum(field * ds).
template <class T, class Query>
ad::Var<T> render_rays(Query&& query, const std::vector<Ray>& rays, std::size_t n, SampleMode mode,
                       Rng* rng = nullptr) {
  if (n == 0) throw Error("render_rays: samples per ray must be >= 1");
  std::vector<Vec3> points;
  points.reserve(rays.size() * n);
  std::vector<T> weights(rays.size(), T{0});
  for (std::size_t r = 0; r < rays.size(); ++r) {
    const Ray& ray = rays[r];
    if (ray.empty()) {
      for (std::size_t i = 0; i < n; ++i) points.push_back(ray.origin);
      continue;
    }
    const RaySamples s = sample_points(ray, n, mode, rng);
    for (double t : s.t) points.push_back(ray.at(t));
    weights[r] = static_cast<T>(s.ds);
  }
  ad::Var<T> values = query(std::span<const Vec3>(points));
  return ad::weighted_segment_sum(values, n, std::span<const T>(weights));
}

// Multiplies the clean intensity by the flat profile, then applies noise.
inline Image corrupt(const Image& intensity, const NoiseModel& noise, const Image* flat, Rng& rng) {
  if (flat && !flat->same_dims(intensity)) throw Error("corrupt: flat profile dimensions differ");
  if (noise.kind == NoiseModel::Kind::Poisson && !(noise.photons > 0)) {
    throw Error("corrupt: poisson noise requires a positive photon flux");
  }
  Image raw = intensity;
  for (std::size_t i = 0; i < raw.px.size(); ++i) {
    double v = raw.px[i];
    if (flat) v *= flat->px[i];
    switch (noise.kind) {
      case NoiseModel::Kind::None: break;
      case NoiseModel::Kind::Gaussian: {
        std::normal_distribution<double> nd(0.0, noise.sigma);
        v += nd(rng);
        break;
      }
      case NoiseModel::Kind::Poisson: {
        std::poisson_distribution<long long> pd(std::max(v, 0.0) * noise.photons);
        v = static_cast<double>(pd(rng)) / noise.photons;
        break;
      }
    }
    raw.px[i] = static_cast<float>(v);
  }
  return raw;
}

struct FlatFieldResult {
  Image intensity;
  std::vector<std::uint8_t> bad_pixels;  // 1 where flat - dark <= 0
  std::size_t bad_count = 0;
};

// (raw - dark) / (flat - dark), clipped below at `floor`. Pixels with a
// non-positive denominator are flagged and set to 1.
inline FlatFieldResult flat_field_correct(const Image& raw, const Image& flat, const Image& dark,
                                          double floor = 1e-6) {
  if (!raw.same_dims(flat) || !raw.same_dims(dark)) throw Error("flat_field_correct: dimension mismatch");
  FlatFieldResult r{Image(raw.width, raw.height), std::vector<std::uint8_t>(raw.px.size(), 0), 0};
  for (std::size_t i = 0; i < raw.px.size(); ++i) {
    const double den = double(flat.px[i]) - double(dark.px[i]);
    if (!(den > 0)) {
      r.bad_pixels[i] = 1;
      ++r.bad_count;
      r.intensity.px[i] = 1.0f;
      continue;
    }
    r.intensity.px[i] = static_cast<float>(std::max((double(raw.px[i]) - double(dark.px[i])) / den, floor));
  }
  return r;
}

// Single-material, single-distance phase retrieval followed by -log.
// With z = 0 the filter is the identity and the result is -log(I).
inline Image paganin_filter(const Image& intensity, double delta_over_beta, double distance_m,
                            double wavelength, double pitch_m) {
  for (float v : intensity.px)
    if (!(v > 0.0f)) throw Error("paganin_filter: intensity must be positive");
  if (distance_m < 0) throw Error("paganin_filter: propagation distance must be >= 0");
  Image out(intensity.width, intensity.height);
  if (distance_m == 0.0) {
    for (std::size_t i = 0; i < out.px.size(); ++i) out.px[i] = static_cast<float>(-std::log(double(intensity.px[i])));
    return out;
  }
  const std::size_t W = intensity.width, H = intensity.height;
  fftw_complex* buf = fftw_alloc_complex(W * H);
  fftw_plan fwd = fftw_plan_dft_2d(static_cast<int>(H), static_cast<int>(W), buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
  fftw_plan inv = fftw_plan_dft_2d(static_cast<int>(H), static_cast<int>(W), buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
  for (std::size_t i = 0; i < W * H; ++i) {
    buf[i][0] = intensity.px[i];
    buf[i][1] = 0.0;
  }
  fftw_execute(fwd);
  const double c = wavelength * distance_m * delta_over_beta / (4.0 * std::numbers::pi);
  auto freq = [](std::size_t idx, std::size_t n) {
    const long i = static_cast<long>(idx);
    const long nn = static_cast<long>(n);
    return static_cast<double>(i < (nn + 1) / 2 ? i : i - nn) / static_cast<double>(n);
  };
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t q = 0; q < W; ++q) {
      const double kx = 2.0 * std::numbers::pi * freq(q, W) / pitch_m;
      const double ky = 2.0 * std::numbers::pi * freq(r, H) / pitch_m;
      const double f = 1.0 / (1.0 + c * (kx * kx + ky * ky)) / static_cast<double>(W * H);
      buf[r * W + q][0] *= f;
      buf[r * W + q][1] *= f;
    }
  fftw_execute(inv);
  for (std::size_t i = 0; i < W * H; ++i) out.px[i] = static_cast<float>(-std::log(std::max(buf[i][0], 1e-30)));
  fftw_destroy_plan(fwd);
  fftw_destroy_plan(inv);
  fftw_free(buf);
  return out;
}

}  // namespace onix
