#include <gtest/gtest.h>

#include <cmath>
#include <complex>

#include <fftw3.h>

#include "onix4d/metrics.hpp"

using namespace onix;

namespace {

Volume random_volume(std::size_t n, std::uint64_t seed, std::size_t nz = 0) {
  Volume v(n, n, nz ? nz : n);
  Rng rng = make_rng(seed, "vol");
  for (auto& x : v.data) x = static_cast<float>(uniform(rng));
  return v;
}

Image random_image(std::size_t w, std::size_t h, std::uint64_t seed) {
  Image img(w, h);
  Rng rng = make_rng(seed, "img");
  for (auto& x : img.px) x = static_cast<float>(uniform(rng));
  return img;
}

// Direct SSIM: 2D Gaussian weights, two-pass weighted moments at every valid window.
double reference_ssim(const Image& a, const Image& b, double range) {
  const std::size_t n = 11;
  const double sigma = 1.5, c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
  std::vector<double> g(n);
  double gs = 0;
  for (std::size_t i = 0; i < n; ++i) gs += g[i] = std::exp(-std::pow(double(i) - 5.0, 2) / (2 * sigma * sigma));
  double total = 0;
  std::size_t count = 0;
  for (std::size_t y0 = 0; y0 + n <= a.height; ++y0)
    for (std::size_t x0 = 0; x0 + n <= a.width; ++x0) {
      double ma = 0, mb = 0;
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < n; ++i) {
          const double w = g[i] * g[j] / (gs * gs);
          ma += w * a.at(x0 + i, y0 + j);
          mb += w * b.at(x0 + i, y0 + j);
        }
      double va = 0, vb = 0, cov = 0;
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < n; ++i) {
          const double w = g[i] * g[j] / (gs * gs);
          const double da = a.at(x0 + i, y0 + j) - ma, db = b.at(x0 + i, y0 + j) - mb;
          va += w * da * da;
          vb += w * db * db;
          cov += w * da * db;
        }
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / double(count);
}

// Keeps Fourier modes whose rounded radius is <= cutoff.
Volume low_pass(const Volume& v, std::size_t cutoff) {
  const std::size_t N = v.nx, total = v.data.size();
  std::vector<std::complex<double>> buf(v.data.begin(), v.data.end());
  auto* p = reinterpret_cast<fftw_complex*>(buf.data());
  const int n = static_cast<int>(N);
  fftw_plan fwd = fftw_plan_dft_3d(n, n, n, p, p, FFTW_FORWARD, FFTW_ESTIMATE);
  fftw_execute(fwd);
  fftw_destroy_plan(fwd);
  auto sf = [&](std::size_t i) { return i < (N + 1) / 2 ? double(i) : double(i) - double(N); };
  for (std::size_t k = 0; k < N; ++k)
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t i = 0; i < N; ++i) {
        const double r = std::sqrt(sf(i) * sf(i) + sf(j) * sf(j) + sf(k) * sf(k));
        if (std::lround(r) > static_cast<long>(cutoff)) buf[(k * N + j) * N + i] = 0;
      }
  fftw_plan inv = fftw_plan_dft_3d(n, n, n, p, p, FFTW_BACKWARD, FFTW_ESTIMATE);
  fftw_execute(inv);
  fftw_destroy_plan(inv);
  Volume out(N, N, N);
  for (std::size_t i = 0; i < total; ++i) out.data[i] = static_cast<float>(buf[i].real() / double(total));
  return out;
}

}  // namespace

TEST(Mse, Identities) {
  const Volume a = random_volume(8, 1);
  EXPECT_EQ(mse(a, a), 0.0);
  Volume b = a;
  for (auto& x : b.data) x += 0.25f;
  EXPECT_NEAR(mse(a, b), 0.0625, 1e-7);
  const Volume c = random_volume(8, 2);
  EXPECT_EQ(mse(a, c), mse(c, a));
  EXPECT_THROW(mse(a, random_volume(4, 1)), ShapeError);
  EXPECT_THROW(mse(std::span<const float>(), std::span<const float>()), ShapeError);
}

TEST(Mse, TimestampAverageAndPermutationInvariance) {
  const std::vector<Volume> a{random_volume(12, 1), random_volume(12, 2), random_volume(12, 3)};
  const std::vector<Volume> b{random_volume(12, 4), random_volume(12, 5), random_volume(12, 6)};
  const double expect = (mse(a[0], b[0]) + mse(a[1], b[1]) + mse(a[2], b[2])) / 3;
  EXPECT_NEAR(mse(a, b), expect, 1e-12);
  const std::vector<Volume> ap{a[2], a[0], a[1]}, bp{b[2], b[0], b[1]};
  EXPECT_NEAR(mse(ap, bp), mse(a, b), 1e-12);
  EXPECT_NEAR(dssim(ap, bp), dssim(a, b), 1e-12);
  EXPECT_THROW(mse(a, std::vector<Volume>{b[0]}), ShapeError);
}

TEST(Ssim, IdentityAndSymmetry) {
  const Image a = random_image(24, 20, 1), b = random_image(24, 20, 2);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_NEAR(dssim(a, a), 0.0, 1e-12);
  EXPECT_NEAR(dssim(a, b), dssim(b, a), 1e-12);
  EXPECT_GT(dssim(a, b), 0.0);
  EXPECT_LE(dssim(a, b), 1.0);
  EXPECT_THROW(ssim(Image(8, 8), Image(8, 8)), ShapeError);
  EXPECT_THROW(ssim(a, random_image(20, 24, 3)), ShapeError);
}

TEST(Ssim, MatchesDirectReference) {
  const Image a = random_image(24, 20, 4), b = random_image(24, 20, 5);
  EXPECT_NEAR(ssim(a, b), reference_ssim(a, b, detail::inferred_range(a.px, b.px)), 1e-10);
  Image c(16, 16), d(16, 16);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      c.at(x, y) = float((x + y) % 2);
      d.at(x, y) = 1.0f - c.at(x, y);
    }
  const double s = ssim(c, d);
  EXPECT_NEAR(s, reference_ssim(c, d, 1.0), 1e-10);
  EXPECT_LT(s, -0.9);
  SsimOptions o;
  o.data_range = 2.0;
  EXPECT_NEAR(ssim(c, d, o), reference_ssim(c, d, 2.0), 1e-10);
}

TEST(Ssim, DepthOneVolumeReducesToImage) {
  const Image a = random_image(16, 16, 6), b = random_image(16, 16, 7);
  Volume va(16, 16, 1), vb(16, 16, 1);
  va.data = a.px;
  vb.data = b.px;
  EXPECT_NEAR(ssim(va, vb), ssim(a, b), 1e-12);
  EXPECT_THROW(ssim(random_volume(8, 1), random_volume(8, 2)), ShapeError);
}

TEST(Ssim, VolumeAveragesAllThreeSliceAxes) {
  const Volume a = random_volume(12, 8), b = random_volume(12, 9);
  double total = 0;
  for (int axis = 0; axis < 3; ++axis)
    for (std::size_t s = 0; s < 12; ++s) {
      Image ia(12, 12), ib(12, 12);
      for (std::size_t y = 0; y < 12; ++y)
        for (std::size_t x = 0; x < 12; ++x) {
          const std::size_t i = axis == 0 ? a.index(x, y, s) : axis == 1 ? a.index(x, s, y) : a.index(s, x, y);
          ia.at(x, y) = a.data[i];
          ib.at(x, y) = b.data[i];
        }
      SsimOptions o;
      o.data_range = detail::inferred_range(a.data, b.data);
      total += ssim(ia, ib, o);
    }
  EXPECT_NEAR(ssim(a, b), total / 36, 1e-12);
}

TEST(Fsc, IdenticalVolumesCorrelatePerfectly) {
  const Volume a = random_volume(16, 10);
  const auto c = fsc(a, a);
  ASSERT_EQ(c.correlation.size(), 9u);
  for (double v : c.correlation) EXPECT_NEAR(v, 1.0, 1e-12);
  const auto r = resolution_half_bit(c);
  EXPECT_TRUE(r.at_limit);
  EXPECT_EQ(r.voxels, 2.0);
  const Image img = random_image(16, 16, 11);
  for (double v : frc(img, img).correlation) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(Fsc, IndependentNoiseStaysWithinThreeSigma) {
  const Volume a = random_volume(32, 12), b = random_volume(32, 13);
  const auto c = fsc(a, b);
  for (std::size_t s = 1; s < c.correlation.size(); ++s)
    EXPECT_LT(std::abs(c.correlation[s]), 3.0 / std::sqrt(double(c.count[s]))) << "shell " << s;
}

TEST(Fsc, ScaleInvariantAndSymmetric) {
  const Volume a = random_volume(16, 14), b = random_volume(16, 15);
  Volume b4 = b;
  for (auto& x : b4.data) x *= 4.0f;
  const auto c1 = fsc(a, b), c2 = fsc(a, b4), c3 = fsc(b, a);
  for (std::size_t s = 0; s < c1.correlation.size(); ++s) {
    EXPECT_NEAR(c1.correlation[s], c2.correlation[s], 1e-12);
    EXPECT_NEAR(c1.correlation[s], c3.correlation[s], 1e-12);
  }
  EXPECT_THROW(fsc(random_volume(8, 1, 4), random_volume(8, 1, 4)), ShapeError);
}

TEST(Fsc, LowPassCutoffLocatesCrossing) {
  const std::size_t N = 32, cutoff = 6;
  const Volume a = random_volume(N, 16);
  const Volume b = low_pass(a, cutoff);
  const auto c = fsc(a, b);
  for (std::size_t s = 0; s <= cutoff; ++s) EXPECT_NEAR(c.correlation[s], 1.0, 1e-5) << "shell " << s;
  // Above the cutoff only float rounding of the filtered volume remains: noise-level correlation.
  for (std::size_t s = cutoff + 1; s < c.correlation.size(); ++s)
    EXPECT_LT(std::abs(c.correlation[s]), std::min(c.threshold[s], 4.0 / std::sqrt(double(c.count[s]))));
  const auto r = resolution_half_bit(c);
  EXPECT_FALSE(r.at_limit);
  EXPECT_GT(r.crossing, double(cutoff));
  EXPECT_LT(r.crossing, double(cutoff + 1));
  EXPECT_NEAR(r.voxels, double(N) / r.crossing, 1e-12);
}

TEST(Fsc, HalfBitThreshold) {
  EXPECT_NEAR(half_bit_threshold(1), 1.0, 1e-12);
  EXPECT_NEAR(half_bit_threshold(100000000), 0.2071 / 1.2071, 1e-3);
  EXPECT_GT(half_bit_threshold(10), half_bit_threshold(100));
}

TEST(Fsc, CrossingInterpolation) {
  CorrelationCurve c;
  c.size = 16;
  c.frequency = {0, 1, 2, 3};
  c.correlation = {1.0, 0.9, 0.5, 0.1};
  c.threshold = {0.3, 0.3, 0.3, 0.3};
  const auto r = resolution_half_bit(c);
  EXPECT_NEAR(r.crossing, 2.5, 1e-12);
  EXPECT_NEAR(r.voxels, 16 / 2.5, 1e-12);
  // Immediately below threshold beyond DC: the coarsest resolution.
  c.correlation = {1.0, 0.1, 0.1, 0.1};
  c.threshold = {0.3, 0.3, 0.3, 0.3};
  const auto coarse = resolution_half_bit(c);
  EXPECT_LE(coarse.voxels, 16.0);
  EXPECT_GE(coarse.voxels, 2.0);
  EXPECT_FALSE(coarse.at_limit);
  EXPECT_THROW(resolution_half_bit(CorrelationCurve{}), Error);
}
