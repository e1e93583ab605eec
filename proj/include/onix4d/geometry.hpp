#pragma once

// Parallel-beam acquisition geometry. Views lie in the x-y plane; the
// detector v axis is world z. The reconstruction volume is [-1, 1]^3.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "onix4d/rng.hpp"
#include "onix4d/tensor.hpp"

namespace onix {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const { return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x}; }
  double norm() const { return std::sqrt(dot(*this)); }
};

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

// Rotation about world z by `deg` degrees.
inline Vec3 rotate_z(const Vec3& p, double deg) {
  const double c = std::cos(deg2rad(deg)), s = std::sin(deg2rad(deg));
  return {c * p.x - s * p.y, s * p.x + c * p.y, p.z};
}

struct Detector {
  std::size_t width = 64;
  std::size_t height = 64;
  double pitch = 2.0 / 64.0;  // world units per pixel
};

struct ViewPose {
  double azimuth_deg = 0;
  Vec3 axis;  // beam direction
  Vec3 u;     // detector columns
  Vec3 v;     // detector rows (world z)
  Detector detector;

  // Continuous pixel coordinates: integer values are pixel centers.
  double column_of(double u_world) const {
    return u_world / detector.pitch + 0.5 * static_cast<double>(detector.width) - 0.5;
  }
  double row_of(double v_world) const {
    return v_world / detector.pitch + 0.5 * static_cast<double>(detector.height) - 0.5;
  }
  double u_of(double column) const {
    return (column + 0.5 - 0.5 * static_cast<double>(detector.width)) * detector.pitch;
  }
  double v_of(double row) const {
    return (row + 0.5 - 0.5 * static_cast<double>(detector.height)) * detector.pitch;
  }
};

inline ViewPose pose_from_azimuth(double azimuth_deg, const Detector& detector) {
  if (!std::isfinite(azimuth_deg)) throw Error("pose_from_azimuth: non-finite azimuth");
  double phi = std::fmod(azimuth_deg, 360.0);
  if (phi < 0) phi += 360.0;
  ViewPose pose;
  pose.azimuth_deg = phi;
  pose.axis = {std::cos(deg2rad(phi)), std::sin(deg2rad(phi)), 0.0};
  pose.v = {0.0, 0.0, 1.0};
  pose.u = pose.axis.cross(pose.v);
  pose.detector = detector;
  return pose;
}

// Orthographic camera coordinates: (u, v) on the detector plane through the
// origin, depth along the beam.
struct CameraPoint {
  double u = 0, v = 0, depth = 0;
};

inline CameraPoint world_to_camera(const Vec3& p, const ViewPose& pose) {
  return {p.dot(pose.u), p.dot(pose.v), p.dot(pose.axis)};
}

inline Vec3 camera_to_world(const CameraPoint& c, const ViewPose& pose) {
  return pose.u * c.u + pose.v * c.v + pose.axis * c.depth;
}

struct Box {
  Vec3 lo{-1, -1, -1};
  Vec3 hi{1, 1, 1};

  bool degenerate() const {
    return !(lo.x < hi.x && lo.y < hi.y && lo.z < hi.z) || !std::isfinite(lo.x + lo.y + lo.z + hi.x + hi.y + hi.z);
  }
};

struct Ray {
  Vec3 origin;
  Vec3 direction;
  double t_near = 0;
  double t_far = 0;

  bool empty() const { return !(t_near < t_far); }
  double length() const { return empty() ? 0.0 : t_far - t_near; }
  Vec3 at(double t) const { return origin + direction * t; }
};

// Slab intersection; returns an empty range when the ray misses.
inline Ray clip_to_box(Vec3 origin, Vec3 direction, const Box& box) {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  const double o[3] = {origin.x, origin.y, origin.z};
  const double d[3] = {direction.x, direction.y, direction.z};
  const double lo[3] = {box.lo.x, box.lo.y, box.lo.z};
  const double hi[3] = {box.hi.x, box.hi.y, box.hi.z};
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d[k]) < 1e-15) {
      if (o[k] < lo[k] || o[k] > hi[k]) return {origin, direction, 0.0, 0.0};
      continue;
    }
    double a = (lo[k] - o[k]) / d[k];
    double b = (hi[k] - o[k]) / d[k];
    if (a > b) std::swap(a, b);
    t0 = std::max(t0, a);
    t1 = std::min(t1, b);
  }
  if (!(t0 < t1)) return {origin, direction, 0.0, 0.0};
  return {origin, direction, t0, t1};
}

struct PixelCoord {
  double column = 0;
  double row = 0;
};

// One parallel ray per (possibly fractional) pixel, originating on the
// detector plane through the origin.
inline std::vector<Ray> rays_for_pixels(const ViewPose& pose, const std::vector<PixelCoord>& pixels,
                                        const Box& bounds = {}) {
  if (bounds.degenerate()) throw Error("rays_for_pixels: degenerate bounding box");
  const double w = static_cast<double>(pose.detector.width), h = static_cast<double>(pose.detector.height);
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const auto& px : pixels) {
    if (px.column < -0.5 || px.row < -0.5 || px.column > w - 0.5 || px.row > h - 0.5) {
      throw Error("rays_for_pixels: pixel outside detector");
    }
    const Vec3 origin = pose.u * pose.u_of(px.column) + pose.v * pose.v_of(px.row);
    rays.push_back(clip_to_box(origin, pose.axis, bounds));
  }
  return rays;
}

inline std::vector<PixelCoord> all_pixels(const Detector& d) {
  std::vector<PixelCoord> px;
  px.reserve(d.width * d.height);
  for (std::size_t r = 0; r < d.height; ++r)
    for (std::size_t c = 0; c < d.width; ++c) px.push_back({static_cast<double>(c), static_cast<double>(r)});
  return px;
}

enum class SampleMode { Uniform, Stratified };

struct RaySamples {
  std::vector<double> t;  // ray parameters, ascending
  double ds = 0;          // segment length per sample
};

// Midpoints of n equal bins over the ray's range (uniform) or one uniform
// draw inside each bin (stratified).
inline RaySamples sample_points(const Ray& ray, std::size_t n, SampleMode mode, Rng* rng = nullptr) {
  if (n == 0) throw Error("sample_points: n must be >= 1");
  RaySamples out;
  if (ray.empty()) return out;
  const double len = ray.t_far - ray.t_near;
  out.ds = len / static_cast<double>(n);
  out.t.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double frac = 0.5;
    if (mode == SampleMode::Stratified) {
      if (!rng) throw Error("sample_points: stratified mode requires an rng");
      // Keep samples strictly inside the bin.
      frac = std::clamp(uniform(*rng), 1e-9, 1.0 - 1e-9);
    }
    out.t[i] = ray.t_near + (static_cast<double>(i) + frac) * out.ds;
  }
  return out;
}

}  // namespace onix
