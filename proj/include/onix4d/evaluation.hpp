#pragma once

// Volumes from a trained model and from the sealed ground truth, and the
// 4D comparison between them.

#include <algorithm>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "onix4d/metrics.hpp"
#include "onix4d/training.hpp"

namespace onix {

// Normalised delta (channel 0) or beta (channel 1) on an n^3 cell-centred grid.
template <class T>
Volume predict_volume(const OnixModel<T>& model, const Conditioning<T>& cond, std::size_t n, std::size_t channel = 0,
                      std::size_t chunk = 8192) {
  if (channel > 1) throw Error("predict_volume: channel must be 0 or 1");
  ad::NoGradGuard ng;
  Volume vol(n, n, n);
  std::vector<Vec3> pts;
  pts.reserve(vol.data.size());
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < n; ++i) pts.push_back(vol.cell_center(i, j, k));
  for (std::size_t s = 0; s < pts.size(); s += chunk) {
    const std::size_t m = std::min(chunk, pts.size() - s);
    const auto out = model.query(cond, std::span<const Vec3>(pts).subspan(s, m));
    for (std::size_t i = 0; i < m; ++i) vol.data[s + i] = static_cast<float>(out.value()[2 * i + channel]);
  }
  return vol;
}

// Ground truth of one sealed experiment in its model frame (first view at
// azimuth 0), as delta / delta_ref.
inline Volume ground_truth_volume(const io::SealedExperiment& e, PhantomKind phantom, double t, std::size_t n,
                                  const Material& reference) {
  ExperimentRecord rec;
  rec.droplet = e.droplet;
  rec.melt = e.melt;
  return with_field(rec, phantom, t, [&](const auto& f) {
    const auto g = in_experiment_frame(f, e.phi1);
    return voxelize([&](const Vec3& p) { return g(p).delta / reference.delta0; }, n);
  });
}

struct TimestampMetrics {
  std::size_t experiment = 0;
  std::size_t timestamp = 0;
  double mse = 0;
  double dssim = 0;
  double top_dssim = 0;
  double fsc_resolution = 0;
  bool fsc_at_limit = false;
  CorrelationCurve curve;
};

struct EvalReport {
  std::vector<TimestampMetrics> entries;
  double mse = 0;        // over every voxel of every evaluated volume
  double dssim = 0;      // mean over volumes
  double top_dssim = 0;  // z-projection (never a recorded view)
  double fsc_resolution = 0;

  io::json to_json() const {
    io::json per = io::json::array();
    for (const auto& e : entries) {
      per.push_back({{"experiment", e.experiment},
                     {"timestamp", e.timestamp},
                     {"mse", e.mse},
                     {"dssim", e.dssim},
                     {"top_dssim", e.top_dssim},
                     {"fsc_resolution", e.fsc_resolution},
                     {"fsc_at_limit", e.fsc_at_limit}});
    }
    return {{"aggregate", {{"mse", mse}, {"dssim", dssim}, {"top_dssim", top_dssim}, {"fsc_resolution", fsc_resolution}}},
            {"per_timestamp", per}};
  }

  // One row per shell: experiment, timestamp, freq, corr, threshold, n.
  std::string curves_csv() const {
    std::string s = "experiment,timestamp,freq,corr,threshold,n\n";
    char buf[160];
    for (const auto& e : entries)
      for (std::size_t i = 0; i < e.curve.frequency.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.6g,%.9g,%.9g,%zu\n", e.experiment, e.timestamp, e.curve.frequency[i],
                      e.curve.correlation[i], e.curve.threshold[i], e.curve.count[i]);
        s += buf;
      }
    return s;
  }
};

struct EvalOptions {
  std::size_t grid = 32;
  std::size_t timestamp_stride = 1;
  std::vector<std::size_t> experiments;  // ids; all when empty
  std::optional<double> data_range = 1.0;  // inferred per slice when empty
  bool fsc = true;
};

// Compares predicted against sealed volumes with a caller-supplied predictor
// (experiment index, timestamp) -> Volume.
template <class Predict>
EvalReport evaluate_volumes(const std::vector<io::ExperimentImages>& data, const io::SealedSection& sealed,
                            const Material& reference, const EvalOptions& opt, Predict&& predict) {
  EvalReport r;
  SsimOptions so;
  so.data_range = opt.data_range;
  double sq = 0, ds = 0, top = 0, res = 0;
  std::size_t voxels = 0;
  for (const auto& e : data) {
    if (!opt.experiments.empty() &&
        std::find(opt.experiments.begin(), opt.experiments.end(), e.id) == opt.experiments.end()) {
      continue;
    }
    const auto& se = sealed.find(e.id);
    for (std::size_t t = 0; t < e.timestamps; t += std::max<std::size_t>(opt.timestamp_stride, 1)) {
      const Volume gt = ground_truth_volume(se, sealed.phantom, timestamp_time(t, e.timestamps), opt.grid, reference);
      const Volume pv = predict(e, t);
      TimestampMetrics m;
      m.experiment = e.id;
      m.timestamp = t;
      m.mse = mse(pv, gt);
      m.dssim = dssim(pv, gt, so);
      m.top_dssim = dssim(project_volume_z(pv), project_volume_z(gt), so);
      if (opt.fsc) {
        m.curve = fsc(pv, gt);
        const auto rr = resolution_half_bit(m.curve);
        m.fsc_resolution = rr.voxels;
        m.fsc_at_limit = rr.at_limit;
      }
      sq += m.mse * static_cast<double>(gt.data.size());
      voxels += gt.data.size();
      ds += m.dssim;
      top += m.top_dssim;
      res += m.fsc_resolution;
      r.entries.push_back(m);
    }
  }
  if (r.entries.empty()) throw Error("evaluate: nothing to evaluate");
  const double n = static_cast<double>(r.entries.size());
  r.mse = sq / static_cast<double>(voxels);
  r.dssim = ds / n;
  r.top_dssim = top / n;
  r.fsc_resolution = res / n;
  return r;
}

template <class T>
EvalReport evaluate_model(const OnixModel<T>& model, const std::vector<io::ExperimentImages>& data,
                          const io::SealedSection& sealed, const Material& reference, const Detector& detector,
                          const EvalOptions& opt = {}) {
  return evaluate_volumes(data, sealed, reference, opt, [&](const io::ExperimentImages& e, std::size_t t) {
    ad::NoGradGuard ng;
    return predict_volume(model, condition_on(model, e, t, detector), opt.grid);
  });
}

}  // namespace onix
