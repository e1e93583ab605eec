#pragma once

// Simultaneous algebraic reconstruction from many parallel-beam views about
// the z axis. The system matrix is the ray-driven midpoint quadrature of the
// physics module with trilinear interpolation of a cell-centred volume.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "onix4d/grid.hpp"

namespace onix {

struct SartConfig {
  std::size_t iterations = 20;
  double relaxation = 0.5;
  bool nonnegative = true;
  std::size_t samples_per_ray = 0;  // 0 selects 2 * grid
  std::vector<double> angles;       // absolute azimuths in degrees, one per projection

  void validate() const {
    if (iterations < 1) throw Error("sart: iterations must be >= 1");
    if (!(relaxation > 0 && relaxation < 2)) throw Error("sart: relaxation must lie in (0, 2)");
    if (angles.empty()) throw Error("sart: angle list is empty");
    for (double a : angles)
      if (!std::isfinite(a)) throw Error("sart: non-finite angle");
  }
};

struct SartResult {
  Volume volume;
  std::vector<double> residuals;  // relative projection residual after each sweep
};

namespace detail {

struct SartTap {
  std::size_t index;  // x + nx * y
  double weight;      // interpolation weight times segment length
};

// Per-column taps in the xy plane for one view; rays are horizontal.
struct SartViewTaps {
  std::vector<std::vector<SartTap>> columns;
};

inline void axis_taps(double p, std::size_t n, std::size_t& i0, double& w0, bool& ok0, bool& ok1) {
  const double f = (p + 1.0) * 0.5 * static_cast<double>(n) - 0.5;
  const double fl = std::floor(f);
  const long i = static_cast<long>(fl);
  w0 = 1.0 - (f - fl);
  ok0 = i >= 0 && i < static_cast<long>(n);
  ok1 = i + 1 >= 0 && i + 1 < static_cast<long>(n);
  i0 = static_cast<std::size_t>(std::max(i, 0L));
}

inline SartViewTaps view_taps(const ViewPose& pose, std::size_t n, std::size_t samples) {
  SartViewTaps vt;
  const Detector& d = pose.detector;
  vt.columns.resize(d.width);
  const double mid_row = 0.5 * static_cast<double>(d.height) - 0.5;
  for (std::size_t c = 0; c < d.width; ++c) {
    // The xy footprint is identical for every detector row.
    const auto rays = rays_for_pixels(pose, {{static_cast<double>(c), mid_row}});
    const Ray& ray = rays[0];
    if (ray.empty()) continue;
    const RaySamples s = sample_points(ray, samples, SampleMode::Uniform);
    auto& taps = vt.columns[c];
    for (double t : s.t) {
      const Vec3 p = ray.at(t);
      std::size_t ix, iy;
      double wx, wy;
      bool x0, x1, y0, y1;
      axis_taps(p.x, n, ix, wx, x0, x1);
      axis_taps(p.y, n, iy, wy, y0, y1);
      const std::size_t ix1 = x0 ? ix + 1 : ix, iy1 = y0 ? iy + 1 : iy;
      if (x0 && y0) taps.push_back({iy * n + ix, wx * wy * s.ds});
      if (x1 && y0) taps.push_back({iy * n + ix1, (1 - wx) * wy * s.ds});
      if (x0 && y1) taps.push_back({iy1 * n + ix, wx * (1 - wy) * s.ds});
      if (x1 && y1) taps.push_back({iy1 * n + ix1, (1 - wx) * (1 - wy) * s.ds});
    }
    std::sort(taps.begin(), taps.end(), [](const SartTap& a, const SartTap& b) { return a.index < b.index; });
    std::size_t m = 0;
    for (std::size_t i = 0; i < taps.size(); ++i) {
      if (m > 0 && taps[m - 1].index == taps[i].index) taps[m - 1].weight += taps[i].weight;
      else taps[m++] = taps[i];
    }
    taps.resize(m);
  }
  return vt;
}

struct SartRowTaps {
  std::size_t k[2];
  double w[2];
};

inline std::vector<SartRowTaps> row_taps(const ViewPose& pose, std::size_t n) {
  std::vector<SartRowTaps> rows(pose.detector.height);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::size_t k;
    double w;
    bool ok0, ok1;
    axis_taps(pose.v_of(static_cast<double>(r)), n, k, w, ok0, ok1);
    rows[r].k[0] = k;
    rows[r].w[0] = ok0 ? w : 0.0;
    rows[r].k[1] = ok0 ? k + 1 : k;
    rows[r].w[1] = ok1 ? 1.0 - w : 0.0;
  }
  return rows;
}

// Column sums per slice: out[c * n + k] = sum over taps of weight * vol[k][tap].
inline void column_slices(const std::vector<float>& vol, std::size_t n, const SartViewTaps& vt, std::vector<double>& out) {
  const std::size_t slice = n * n, width = vt.columns.size();
  out.assign(width * n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const float* s = vol.data() + k * slice;
    for (std::size_t c = 0; c < width; ++c) {
      double a = 0;
      for (const auto& t : vt.columns[c]) a += t.weight * s[t.index];
      out[c * n + k] = a;
    }
  }
}

inline Image apply_forward(const std::vector<float>& vol, std::size_t n, const SartViewTaps& vt,
                           const std::vector<SartRowTaps>& rows, std::size_t width) {
  std::vector<double> cs;
  column_slices(vol, n, vt, cs);
  Image img(width, rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < width; ++c) {
      const double* p = cs.data() + c * n;
      img.at(c, r) = static_cast<float>(rows[r].w[0] * p[rows[r].k[0]] + rows[r].w[1] * p[rows[r].k[1]]);
    }
  return img;
}

}  // namespace detail

// Ray-driven projection of a cubic volume over [-1, 1]^3 at one pose.
inline Image forward_project(const Volume& vol, const ViewPose& pose, std::size_t samples_per_ray = 0) {
  if (vol.nx != vol.ny || vol.nx != vol.nz || vol.nx < 2) throw Error("forward_project: volume must be cubic, n >= 2");
  const std::size_t n = vol.nx;
  const std::size_t s = samples_per_ray ? samples_per_ray : 2 * n;
  return detail::apply_forward(vol.data, n, detail::view_taps(pose, n, s), detail::row_taps(pose, n),
                               pose.detector.width);
}

// Relative L2 mismatch between forward projections of `vol` and `projections`.
inline double projection_residual(const Volume& vol, const std::vector<Image>& projections,
                                  const std::vector<double>& angles, const Detector& detector,
                                  std::size_t samples_per_ray = 0) {
  if (projections.size() != angles.size()) throw Error("projection_residual: projection/angle count mismatch");
  double num = 0, den = 0;
  for (std::size_t v = 0; v < angles.size(); ++v) {
    const Image f = forward_project(vol, pose_from_azimuth(angles[v], detector), samples_per_ray);
    for (std::size_t i = 0; i < f.px.size(); ++i) {
      const double d = double(f.px[i]) - projections[v].px[i];
      num += d * d;
      den += double(projections[v].px[i]) * projections[v].px[i];
    }
  }
  return den > 0 ? std::sqrt(num / den) : std::sqrt(num);
}

// Line-integral images in world units, one per entry of cfg.angles.
inline SartResult sart_reconstruct(const std::vector<Image>& projections, const SartConfig& cfg, std::size_t grid,
                                   const Detector& detector) {
  cfg.validate();
  if (grid < 2) throw Error("sart: grid must be >= 2");
  if (projections.size() != cfg.angles.size()) throw Error("sart: projection/angle count mismatch");
  for (const auto& p : projections)
    if (p.width != detector.width || p.height != detector.height) throw Error("sart: projection dims differ from detector");
  const std::size_t n = grid, slice = n * n, samples = cfg.samples_per_ray ? cfg.samples_per_ray : 2 * n;
  std::vector<detail::SartViewTaps> taps;
  std::vector<std::vector<detail::SartRowTaps>> rows;
  for (double a : cfg.angles) {
    const ViewPose pose = pose_from_azimuth(a, detector);
    taps.push_back(detail::view_taps(pose, n, samples));
    rows.push_back(detail::row_taps(pose, n));
  }
  SartResult res;
  res.volume = Volume(n, n, n);
  auto& x = res.volume.data;
  std::vector<double> num(slice), g(detector.width * n), zsum(n), colsum(slice);
  double total = 0;
  for (const auto& p : projections)
    for (float v : p.px) total += double(v) * v;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    for (std::size_t v = 0; v < cfg.angles.size(); ++v) {
      const auto& vt = taps[v];
      const auto& rt = rows[v];
      const Image fwd = detail::apply_forward(x, n, vt, rt, detector.width);
      // Backprojection is separable: g[c][k] gathers z-weighted corrections,
      // and the normaliser is (row weight at k) * (column weight at xy).
      std::fill(g.begin(), g.end(), 0.0);
      std::fill(zsum.begin(), zsum.end(), 0.0);
      std::fill(colsum.begin(), colsum.end(), 0.0);
      for (std::size_t c = 0; c < detector.width; ++c) {
        double len_xy = 0;
        for (const auto& t : vt.columns[c]) len_xy += t.weight;
        if (len_xy <= 0) continue;
        for (const auto& t : vt.columns[c]) colsum[t.index] += t.weight;
        for (std::size_t r = 0; r < detector.height; ++r) {
          const double len = len_xy * (rt[r].w[0] + rt[r].w[1]);
          if (len <= 0) continue;
          const double corr = (double(projections[v].at(c, r)) - fwd.at(c, r)) / len;
          for (int q = 0; q < 2; ++q) g[c * n + rt[r].k[q]] += rt[r].w[q] * corr;
        }
      }
      for (std::size_t r = 0; r < detector.height; ++r)
        for (int q = 0; q < 2; ++q) zsum[rt[r].k[q]] += rt[r].w[q];
      for (std::size_t k = 0; k < n; ++k) {
        if (zsum[k] <= 0) continue;
        double* ns = num.data();
        std::fill(ns, ns + slice, 0.0);
        for (std::size_t c = 0; c < detector.width; ++c) {
          const double gc = g[c * n + k];
          if (gc == 0.0) continue;
          for (const auto& t : vt.columns[c]) ns[t.index] += t.weight * gc;
        }
        float* xs = x.data() + k * slice;
        for (std::size_t i = 0; i < slice; ++i) {
          const double d = zsum[k] * colsum[i];
          if (d <= 0) continue;
          double nv = xs[i] + cfg.relaxation * ns[i] / d;
          if (cfg.nonnegative && nv < 0) nv = 0;
          xs[i] = static_cast<float>(nv);
        }
      }
    }
    double r2 = 0;
    for (std::size_t v = 0; v < cfg.angles.size(); ++v) {
      const Image f = detail::apply_forward(x, n, taps[v], rows[v], detector.width);
      for (std::size_t i = 0; i < f.px.size(); ++i) {
        const double d = double(f.px[i]) - projections[v].px[i];
        r2 += d * d;
      }
    }
    res.residuals.push_back(total > 0 ? std::sqrt(r2 / total) : std::sqrt(r2));
  }
  return res;
}

}  // namespace onix
