#pragma once

// Fidelity and resolution metrics: MSE, DSSIM, Fourier shell / ring
// correlation and the half-bit resolution criterion.

#include <fftw3.h>

#include <cmath>
#include <algorithm>
#include <complex>
#include <span>
#include <optional>
#include <vector>

#include "onix4d/grid.hpp"
#include "onix4d/tensor.hpp"

namespace onix {

inline double mse(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw ShapeError("mse: sizes " + std::to_string(a.size()) + " and " + std::to_string(b.size()) + " differ");
  }
  if (a.empty()) throw ShapeError("mse: empty input");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

inline double mse(const Image& a, const Image& b) {
  if (!a.same_dims(b)) throw ShapeError("mse: image dims differ");
  return mse(std::span<const float>(a.px), std::span<const float>(b.px));
}

inline double mse(const Volume& a, const Volume& b) {
  if (!a.same_dims(b)) throw ShapeError("mse: volume dims differ");
  return mse(std::span<const float>(a.data), std::span<const float>(b.data));
}

// Mean over every voxel of a time series of volumes.
inline double mse(const std::vector<Volume>& a, const std::vector<Volume>& b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("mse: timestamp counts differ");
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < a.size(); ++t) {
    acc += mse(a[t], b[t]) * static_cast<double>(a[t].data.size());
    n += a[t].data.size();
  }
  return acc / static_cast<double>(n);
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  std::optional<double> data_range;  // inferred from both inputs when absent
};

namespace detail {

inline std::vector<double> gaussian_window(std::size_t n, double sigma) {
  std::vector<double> w(n);
  const double c = 0.5 * static_cast<double>(n - 1);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(i) - c;
    w[i] = std::exp(-x * x / (2 * sigma * sigma));
    s += w[i];
  }
  for (auto& v : w) v /= s;
  return w;
}

inline double inferred_range(std::span<const float> a, std::span<const float> b) {
  double lo = INFINITY, hi = -INFINITY;
  for (float v : a) lo = std::min(lo, double(v)), hi = std::max(hi, double(v));
  for (float v : b) lo = std::min(lo, double(v)), hi = std::max(hi, double(v));
  return hi - lo;
}

// Mean SSIM over the valid window positions of a w x h slice.
inline double ssim_slice(const std::vector<double>& a, const std::vector<double>& b, std::size_t w, std::size_t h,
                         const SsimOptions& o, double range) {
  const std::size_t n = o.window;
  const auto g = gaussian_window(n, o.sigma);
  const double c1 = (o.k1 * range) * (o.k1 * range), c2 = (o.k2 * range) * (o.k2 * range);
  // Separable filtering of a, b, a^2, b^2, ab: rows first, then columns.
  const std::size_t ow = w - n + 1, oh = h - n + 1;
  std::vector<double> rows(5 * ow * h, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s[5] = {0, 0, 0, 0, 0};
      for (std::size_t k = 0; k < n; ++k) {
        const double va = a[y * w + x + k], vb = b[y * w + x + k];
        s[0] += g[k] * va;
        s[1] += g[k] * vb;
        s[2] += g[k] * va * va;
        s[3] += g[k] * vb * vb;
        s[4] += g[k] * va * vb;
      }
      for (int q = 0; q < 5; ++q) rows[(q * h + y) * ow + x] = s[q];
    }
  double total = 0;
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double s[5] = {0, 0, 0, 0, 0};
      for (std::size_t k = 0; k < n; ++k)
        for (int q = 0; q < 5; ++q) s[q] += g[k] * rows[(q * h + y + k) * ow + x];
      const double mu_a = s[0], mu_b = s[1];
      const double va = s[2] - mu_a * mu_a, vb = s[3] - mu_b * mu_b, cov = s[4] - mu_a * mu_b;
      total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
    }
  return total / static_cast<double>(ow * oh);
}

}  // namespace detail

inline double ssim(const Image& a, const Image& b, const SsimOptions& o = {}) {
  if (!a.same_dims(b)) throw ShapeError("ssim: image dims differ");
  if (a.width < o.window || a.height < o.window) throw ShapeError("ssim: image smaller than the window");
  const double range = o.data_range.value_or(detail::inferred_range(a.px, b.px));
  std::vector<double> da(a.px.begin(), a.px.end()), db(b.px.begin(), b.px.end());
  return detail::ssim_slice(da, db, a.width, a.height, o, range);
}

inline double dssim(const Image& a, const Image& b, const SsimOptions& o = {}) { return (1.0 - ssim(a, b, o)) / 2.0; }

// Mean SSIM over all axis-aligned slices (along x, y and z) whose in-plane
// dims fit the window. A depth-1 volume reduces to the 2D definition.
inline double ssim(const Volume& a, const Volume& b, const SsimOptions& o = {}) {
  if (!a.same_dims(b)) throw ShapeError("ssim: volume dims differ");
  const double range = o.data_range.value_or(detail::inferred_range(a.data, b.data));
  double total = 0;
  std::size_t count = 0;
  const std::size_t n = o.window;
  auto run = [&](std::size_t slices, std::size_t w, std::size_t h, auto index) {
    if (w < n || h < n) return;
    std::vector<double> sa(w * h), sb(w * h);
    for (std::size_t s = 0; s < slices; ++s) {
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t i = index(s, x, y);
          sa[y * w + x] = a.data[i];
          sb[y * w + x] = b.data[i];
        }
      total += detail::ssim_slice(sa, sb, w, h, o, range);
      ++count;
    }
  };
  run(a.nz, a.nx, a.ny, [&](std::size_t s, std::size_t x, std::size_t y) { return a.index(x, y, s); });
  run(a.ny, a.nx, a.nz, [&](std::size_t s, std::size_t x, std::size_t y) { return a.index(x, s, y); });
  run(a.nx, a.ny, a.nz, [&](std::size_t s, std::size_t x, std::size_t y) { return a.index(s, x, y); });
  if (count == 0) throw ShapeError("ssim: no slice fits the window");
  return total / static_cast<double>(count);
}

inline double dssim(const Volume& a, const Volume& b, const SsimOptions& o = {}) { return (1.0 - ssim(a, b, o)) / 2.0; }

// Mean DSSIM over timestamps.
inline double dssim(const std::vector<Volume>& a, const std::vector<Volume>& b, const SsimOptions& o = {}) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("dssim: timestamp counts differ");
  double acc = 0;
  for (std::size_t t = 0; t < a.size(); ++t) acc += dssim(a[t], b[t], o);
  return acc / static_cast<double>(a.size());
}

struct CorrelationCurve {
  std::vector<double> frequency;  // shell radius in cycles per N samples
  std::vector<double> correlation;
  std::vector<std::size_t> count;
  std::vector<double> threshold;
  std::size_t size = 0;  // N
};

inline double half_bit_threshold(std::size_t n) {
  const double s = std::sqrt(static_cast<double>(std::max<std::size_t>(n, 1)));
  return (0.2071 + 1.9102 / s) / (1.2071 + 0.9102 / s);
}

namespace detail {

inline std::vector<std::complex<double>> dft(const std::vector<double>& x, const std::vector<int>& dims) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> buf(n);
  for (std::size_t i = 0; i < n; ++i) buf[i] = x[i];
  auto* p = reinterpret_cast<fftw_complex*>(buf.data());
  fftw_plan plan = fftw_plan_dft(static_cast<int>(dims.size()), dims.data(), p, p, FFTW_FORWARD, FFTW_ESTIMATE);
  fftw_execute(plan);
  fftw_destroy_plan(plan);
  return buf;
}

inline int signed_freq(std::size_t i, std::size_t n) {
  const long ii = static_cast<long>(i), nn = static_cast<long>(n);
  return static_cast<int>(ii < (nn + 1) / 2 ? ii : ii - nn);
}

// dims slowest-first; every dim equals N.
inline CorrelationCurve correlate(const std::vector<double>& a, const std::vector<double>& b, std::size_t N,
                                  std::size_t rank) {
  std::vector<int> dims(rank, static_cast<int>(N));
  const auto fa = dft(a, dims), fb = dft(b, dims);
  const std::size_t shells = N / 2 + 1;
  std::vector<double> num(shells, 0), pa(shells, 0), pb(shells, 0);
  std::vector<std::size_t> cnt(shells, 0);
  for (std::size_t i = 0; i < fa.size(); ++i) {
    double r2 = 0;
    std::size_t rem = i;
    for (std::size_t d = 0; d < rank; ++d) {
      const int k = signed_freq(rem % N, N);
      rem /= N;
      r2 += double(k) * k;
    }
    const auto shell = static_cast<std::size_t>(std::lround(std::sqrt(r2)));
    if (shell >= shells) continue;
    num[shell] += (fa[i] * std::conj(fb[i])).real();
    pa[shell] += std::norm(fa[i]);
    pb[shell] += std::norm(fb[i]);
    ++cnt[shell];
  }
  CorrelationCurve c;
  c.size = N;
  for (std::size_t s = 0; s < shells; ++s) {
    const double den = std::sqrt(pa[s] * pb[s]);
    c.frequency.push_back(static_cast<double>(s));
    c.correlation.push_back(den > 0 ? num[s] / den : 0.0);
    c.count.push_back(cnt[s]);
    c.threshold.push_back(half_bit_threshold(cnt[s]));
  }
  return c;
}

}  // namespace detail

inline CorrelationCurve fsc(const Volume& a, const Volume& b) {
  if (!a.same_dims(b) || a.nx != a.ny || a.nx != a.nz) {
    throw ShapeError("fsc: volumes must be equal and cubic");
  }
  return detail::correlate(std::vector<double>(a.data.begin(), a.data.end()),
                           std::vector<double>(b.data.begin(), b.data.end()), a.nx, 3);
}

inline CorrelationCurve frc(const Image& a, const Image& b) {
  if (!a.same_dims(b) || a.width != a.height) throw ShapeError("frc: images must be equal and square");
  return detail::correlate(std::vector<double>(a.px.begin(), a.px.end()),
                           std::vector<double>(b.px.begin(), b.px.end()), a.width, 2);
}

struct Resolution {
  double voxels = 2.0;
  double crossing = 0.0;  // shell index of the crossing
  bool at_limit = true;
};

// First shell (beyond DC) where the curve falls below the half-bit threshold,
// located by linear interpolation of C - T between neighbouring shells.
inline Resolution resolution_half_bit(const CorrelationCurve& c) {
  if (c.correlation.empty()) throw Error("resolution_half_bit: empty curve");
  Resolution r;
  for (std::size_t s = 1; s < c.correlation.size(); ++s) {
    const double d1 = c.correlation[s] - c.threshold[s];
    if (d1 >= 0) continue;
    const double d0 = c.correlation[s - 1] - c.threshold[s - 1];
    const double f0 = c.frequency[s - 1], f1 = c.frequency[s];
    const double x = d0 > 0 ? f0 + (f1 - f0) * d0 / (d0 - d1) : f0;
    if (x <= 0) return {static_cast<double>(c.size), 0.0, false};
    r.crossing = x;
    r.voxels = std::clamp(static_cast<double>(c.size) / x, 2.0, static_cast<double>(c.size));
    r.at_limit = false;
    return r;
  }
  return r;
}

}  // namespace onix
