#pragma once

// Patch sampling, losses, schedules and the optimisation loop.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "onix4d/io.hpp"
#include "onix4d/model.hpp"
#include "onix4d/physics.hpp"

namespace onix {

// ---------------------------------------------------------------------------
// Patches

struct PatchSampling {
  std::size_t size = 32;
  double min_scale = 1.0;
  double max_scale = 2.0;  // capped so that the grid fits the image
};

// size x size grid at (col0 + i * scale, row0 + j * scale).
struct PatchSpec {
  std::size_t size = 32;
  double scale = 1.0;
  double col0 = 0.0;
  double row0 = 0.0;

  double stride() const { return scale; }
  double center_col() const { return col0 + 0.5 * scale * static_cast<double>(size - 1); }
  double center_row() const { return row0 + 0.5 * scale * static_cast<double>(size - 1); }

  // Row-major: index j * size + i holds column i, row j.
  std::vector<PixelCoord> pixels() const {
    std::vector<PixelCoord> px;
    px.reserve(size * size);
    for (std::size_t j = 0; j < size; ++j)
      for (std::size_t i = 0; i < size; ++i)
        px.push_back({col0 + static_cast<double>(i) * scale, row0 + static_cast<double>(j) * scale});
    return px;
  }
};

inline PatchSpec sample_patch(std::size_t width, std::size_t height, const PatchSampling& cfg, Rng& rng) {
  if (cfg.size < 2) throw Error("sample_patch: patch size must be >= 2");
  if (width < cfg.size || height < cfg.size) {
    throw Error("sample_patch: image " + std::to_string(width) + "x" + std::to_string(height) +
                " smaller than the " + std::to_string(cfg.size) + "x" + std::to_string(cfg.size) + " patch");
  }
  if (!(cfg.min_scale >= 1.0) || cfg.max_scale < cfg.min_scale) throw Error("sample_patch: invalid scale range");
  const double span = static_cast<double>(cfg.size - 1);
  const double cap = static_cast<double>(std::min(width, height) - 1) / span;
  const double hi = std::min(cfg.max_scale, cap);
  const double lo = std::min(cfg.min_scale, hi);
  PatchSpec p;
  p.size = cfg.size;
  p.scale = hi > lo ? uniform(rng, lo, hi) : lo;
  const double ext = p.scale * span;
  const double free_c = static_cast<double>(width - 1) - ext, free_r = static_cast<double>(height - 1) - ext;
  if (p.scale == 1.0) {
    // Unit scale: integer offsets, i.e. a contiguous crop.
    p.col0 = std::floor(uniform(rng, 0.0, free_c + 1.0));
    p.row0 = std::floor(uniform(rng, 0.0, free_r + 1.0));
  } else {
    p.col0 = uniform(rng, 0.0, std::max(free_c, 0.0));
    p.row0 = uniform(rng, 0.0, std::max(free_r, 0.0));
  }
  return p;
}

// Bilinear sample of a channel-planar image [C][H][W] at the given pixels:
// returns [pixels, C] row-major.
inline std::vector<float> gather_patch(std::span<const float> planes, std::size_t channels, std::size_t height,
                                       std::size_t width, const std::vector<PixelCoord>& px) {
  if (planes.size() != channels * height * width) throw ShapeError("gather_patch: plane size mismatch");
  std::vector<float> out(px.size() * channels);
  for (std::size_t n = 0; n < px.size(); ++n) {
    const auto tap = ad::bilinear_tap<double>(px[n].column, px[n].row, height, width);
    for (std::size_t c = 0; c < channels; ++c) {
      double acc = 0;
      for (int k = 0; k < 4; ++k)
        if (tap.weight[k] != 0) acc += tap.weight[k] * planes[c * height * width + tap.index[k]];
      out[n * channels + c] = static_cast<float>(acc);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

// Sum of squared differences.
template <class T>
ad::Var<T> mse_loss(const ad::Var<T>& real, const ad::Var<T>& pred) {
  if (real.shape() != pred.shape()) {
    throw ShapeError("mse_loss: shapes " + to_string(real.shape()) + " and " + to_string(pred.shape()) + " differ");
  }
  return ad::sum(ad::square(ad::sub(real, pred)));
}

template <class T>
struct GanLosses {
  ad::Var<T> d_loss;
  ad::Var<T> g_loss;
  std::size_t clamped = 0;  // scores moved onto [eps, 1 - eps]
};

template <class T>
std::size_t count_outside(const ad::Var<T>& s, double eps) {
  std::size_t n = 0;
  for (T v : s.value())
    if (double(v) < eps || double(v) > 1.0 - eps) ++n;
  return n;
}

// L_D = -[E log D(s) + E log(1 - D(s_hat))], L_G = -E log D(s_hat).
template <class T>
GanLosses<T> gan_losses(const ad::Var<T>& real_scores, const ad::Var<T>& fake_scores, double eps = 1e-7) {
  const T lo = static_cast<T>(eps), hi = static_cast<T>(1.0 - eps);
  GanLosses<T> out;
  out.clamped = count_outside(real_scores, eps) + count_outside(fake_scores, eps);
  const auto r = ad::clamp(real_scores, lo, hi);
  const auto f = ad::clamp(fake_scores, lo, hi);
  out.d_loss = ad::negate(ad::add(ad::mean(ad::log(r)), ad::mean(ad::log(ad::add_scalar(ad::negate(f), T{1})))));
  out.g_loss = ad::negate(ad::mean(ad::log(f)));
  return out;
}

// Non-saturating generator loss alone.
template <class T>
ad::Var<T> generator_loss(const ad::Var<T>& fake_scores, double eps = 1e-7) {
  return ad::negate(ad::mean(ad::log(ad::clamp(fake_scores, static_cast<T>(eps), static_cast<T>(1.0 - eps)))));
}

// Mean squared difference of two fields sampled at the same points.
template <class T>
ad::Var<T> frame_variation(const ad::Var<T>& a, const ad::Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("frame_variation: shapes differ");
  return ad::mean(ad::square(ad::sub(a, b)));
}

// ---------------------------------------------------------------------------
// Item-level helpers shared by training, rendering and evaluation.

inline std::vector<ViewPose> recorded_poses(const std::vector<double>& relative_angles, const Detector& d) {
  std::vector<ViewPose> poses;
  for (double a : relative_angles) poses.push_back(pose_from_azimuth(a, d));
  return poses;
}

template <class T>
ad::Var<T> conditioning_images(const io::ExperimentImages& e, std::size_t t) {
  if (t >= e.timestamps) throw Error("timestamp " + std::to_string(t) + " outside the timeline");
  const auto s = e.timestamp(t);
  Tensor<T> img(Shape{e.views, 2, e.height, e.width});
  for (std::size_t i = 0; i < s.size(); ++i) img[i] = static_cast<T>(s[i]);
  return ad::Var<T>::constant(std::move(img));
}

template <class T>
Conditioning<T> condition_on(const OnixModel<T>& model, const io::ExperimentImages& e, std::size_t t,
                             const Detector& d) {
  return model.condition(conditioning_images<T>(e, t), recorded_poses(e.relative_angles, d),
                         timestamp_time(t, e.timestamps));
}

// Predicted (delta, beta) line integrals on a patch: [size * size, 2].
template <class T>
ad::Var<T> render_patch(const OnixModel<T>& model, const Conditioning<T>& cond, const ViewPose& pose,
                        const PatchSpec& spec, std::size_t samples, SampleMode mode, Rng* rng) {
  const auto rays = rays_for_pixels(pose, spec.pixels());
  return render_rays<T>([&](std::span<const Vec3> pts) { return model.query(cond, pts); }, rays, samples, mode, rng);
}

// [R, C] -> [1, C, K, K] for the discriminator.
template <class T>
ad::Var<T> as_patch_image(const ad::Var<T>& rows, std::size_t size) {
  const std::size_t c = rows.dim(1);
  return ad::reshape(ad::transpose2d(rows), {1, c, size, size});
}

// frame_variation between timestamps t and t + dt of one experiment at the
// given points.
template <class T>
ad::Var<T> frame_variation_reg(const OnixModel<T>& model, const io::ExperimentImages& e, std::size_t t,
                               std::size_t dt, std::span<const Vec3> points, const Detector& d) {
  if (dt == 0 || t + dt >= e.timestamps) throw Error("frame_variation_reg: t + dt outside the timeline");
  const auto a = model.query(condition_on(model, e, t, d), points);
  const auto b = model.query(condition_on(model, e, t + dt, d), points);
  return frame_variation(a, b);
}

// ---------------------------------------------------------------------------
// Schedule

enum class TrainMode { TwoPhase, RandomDice };
enum class IterationKind { Mse, Gan };

inline std::string to_string(TrainMode m) { return m == TrainMode::TwoPhase ? "two-phase" : "random-dice"; }
inline TrainMode train_mode_from(const std::string& s) {
  if (s == "two-phase") return TrainMode::TwoPhase;
  if (s == "random-dice") return TrainMode::RandomDice;
  throw Error("unknown training mode '" + s + "'");
}

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 8;
  std::size_t warmup_epochs = 5;
  double lr = 1e-4;
  double lr_decay = 0.1;
  std::size_t decay_every = 100;  // epochs; 0 disables decay
  TrainMode mode = TrainMode::TwoPhase;
  double dice_gan_probability = 0.5;
  double mse_weight_after_warmup = 0.0;  // MSE weight inside adversarial iterations
  double adversarial_weight = 1.0;
  double reg_weight = 0.0;               // frame-variation regulariser
  std::size_t reg_samples = 256;
  std::size_t samples_per_ray = 16;
  std::size_t render_views = 0;          // recorded views rendered per item, 0 = all
  PatchSampling patch;
  std::size_t checkpoint_every = 0;      // epochs; 0 = final checkpoint only
  double clamp_eps = 1e-7;
  std::size_t max_nonfinite = 3;
  std::uint64_t seed = 0;
  AdamConfig adam;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw Error("train: epochs and batch_size must be >= 1");
    if (warmup_epochs > epochs) throw Error("train: warmup_epochs exceeds epochs");
    if (!(dice_gan_probability >= 0 && dice_gan_probability <= 1)) throw Error("train: probability outside [0, 1]");
    if (!(lr > 0)) throw Error("train: lr must be positive");
    if (samples_per_ray == 0) throw Error("train: samples_per_ray must be >= 1");
    if (mse_weight_after_warmup < 0 || adversarial_weight < 0 || reg_weight < 0) {
      throw Error("train: loss weights must be non-negative");
    }
  }
};

// lr0 * decay^floor((epoch - 1) / every), epochs counted from 1.
inline double learning_rate(const TrainConfig& c, std::size_t epoch) {
  if (epoch == 0) throw Error("learning_rate: epochs are counted from 1");
  if (c.decay_every == 0) return c.lr;
  return c.lr * std::pow(c.lr_decay, static_cast<double>((epoch - 1) / c.decay_every));
}

class Schedule {
 public:
  Schedule(const TrainConfig& c, std::uint64_t seed) : cfg_(c), rng_(make_rng(seed, "dice")) {}

  IterationKind next(std::size_t epoch) {
    if (cfg_.mode == TrainMode::TwoPhase) return epoch <= cfg_.warmup_epochs ? IterationKind::Mse : IterationKind::Gan;
    return uniform(rng_) < cfg_.dice_gan_probability ? IterationKind::Gan : IterationKind::Mse;
  }

 private:
  TrainConfig cfg_;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// Training loop

struct LogRecord {
  std::size_t iter = 0;
  std::size_t epoch = 0;
  IterationKind phase = IterationKind::Mse;
  std::optional<double> l_mse, l_g, l_d;
  double lr = 0;
  double wallclock = 0;
  bool d_step = false;
  bool skipped = false;
  std::size_t clamped = 0;

  io::json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? io::json(*v) : io::json(nullptr); };
    return {{"iter", iter},       {"epoch", epoch},         {"phase", phase == IterationKind::Gan ? "gan" : "mse"},
            {"L_mse", opt(l_mse)}, {"L_G", opt(l_g)},        {"L_D", opt(l_d)},
            {"lr", lr},           {"wallclock", wallclock}, {"d_step", d_step},
            {"skipped", skipped}, {"clamped", clamped}};
  }
};

struct TrainResult {
  std::size_t iterations = 0;
  std::size_t d_steps = 0;
  std::size_t skipped = 0;
  std::vector<LogRecord> log;
};

class TrainingAborted : public Error {
 public:
  using Error::Error;
};

struct TrainHooks {
  std::function<void(const LogRecord&)> on_iteration;
  std::function<void(std::size_t epoch, bool final)> on_checkpoint;
};

class Trainer {
 public:
  Trainer(OnixModel<float>& model, TrainConfig cfg, Detector detector, const std::vector<io::ExperimentImages>& data)
      : model_(model),
        cfg_(std::move(cfg)),
        detector_(detector),
        data_(data),
        eg_opt_(cfg_.adam, {"encoder.", "generator."}),
        d_opt_(cfg_.adam, {"discriminator."}),
        schedule_(cfg_, cfg_.seed),
        batch_rng_(make_rng(cfg_.seed, "batch")),
        patch_rng_(make_rng(cfg_.seed, "patch")),
        pose_rng_(make_rng(cfg_.seed, "pose")),
        ray_rng_(make_rng(cfg_.seed, "ray")) {
    cfg_.validate();
    if (data_.empty()) throw Error("train: no experiments");
    for (const auto& e : data_) {
      if (e.width != detector.width || e.height != detector.height) throw Error("train: image dims differ from detector");
      if (e.relative_angles != data_[0].relative_angles) throw Error("train: relative angles differ between experiments");
      for (std::size_t t = 0; t < e.timestamps; ++t) items_.push_back({&e, t});
    }
    if (model_.config().patch != cfg_.patch.size) throw Error("train: patch size differs from the discriminator's");
  }

  TrainResult run(const TrainHooks& hooks = {}) {
    TrainResult res;
    const auto start = std::chrono::steady_clock::now();
    std::size_t bad_run = 0;
    for (std::size_t epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      const double lr = learning_rate(cfg_, epoch);
      std::vector<std::size_t> order(items_.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[batch_rng_() % i]);
      for (std::size_t b = 0; b < order.size(); b += cfg_.batch_size) {
        std::vector<const Item*> batch;
        for (std::size_t k = b; k < std::min(order.size(), b + cfg_.batch_size); ++k) batch.push_back(&items_[order[k]]);
        LogRecord rec;
        rec.iter = ++res.iterations;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.phase = schedule_.next(epoch);
        if (rec.phase == IterationKind::Mse) mse_iteration(batch, lr, rec);
        else gan_iteration(batch, lr, rec);
        rec.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (rec.d_step) ++res.d_steps;
        if (rec.skipped) {
          ++res.skipped;
          if (++bad_run >= cfg_.max_nonfinite) {
            res.log.push_back(rec);
            if (hooks.on_iteration) hooks.on_iteration(rec);
            throw TrainingAborted("train: " + std::to_string(bad_run) +
                                  " consecutive non-finite losses, aborting at iteration " + std::to_string(rec.iter) +
                                  " (epoch " + std::to_string(epoch) + ", lr " + std::to_string(lr) + ")");
          }
        } else {
          bad_run = 0;
        }
        res.log.push_back(rec);
        if (hooks.on_iteration) hooks.on_iteration(rec);
      }
      const bool last = epoch == cfg_.epochs;
      if (hooks.on_checkpoint && (last || (cfg_.checkpoint_every && epoch % cfg_.checkpoint_every == 0))) {
        hooks.on_checkpoint(epoch, last);
      }
    }
    return res;
  }

  const Adam<float>& generator_optimizer() const { return eg_opt_; }
  const Adam<float>& discriminator_optimizer() const { return d_opt_; }
  std::size_t items() const { return items_.size(); }

 private:
  struct Item {
    const io::ExperimentImages* exp;
    std::size_t t;
  };

  using V = ad::Var<float>;

  V real_patch(const Item& it, std::size_t view, const PatchSpec& spec) const {
    const std::size_t hw = it.exp->height * it.exp->width;
    const auto planes = it.exp->timestamp(it.t).subspan(view * 2 * hw, 2 * hw);
    auto vals = gather_patch(planes, 2, it.exp->height, it.exp->width, spec.pixels());
    return V::constant(Tensor<float>(Shape{spec.size * spec.size, 2}, std::move(vals)));
  }

  std::vector<std::size_t> mse_views(const Item& it) {
    std::vector<std::size_t> v(it.exp->views);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
    if (cfg_.render_views == 0 || cfg_.render_views >= v.size()) return v;
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[patch_rng_() % i]);
    v.resize(cfg_.render_views);
    return v;
  }

  // Sum of squared patch errors over the recorded views of one item.
  V item_mse(const Item& it, const Conditioning<float>& cond) {
    V loss;
    for (std::size_t v : mse_views(it)) {
      const PatchSpec spec = sample_patch(it.exp->width, it.exp->height, cfg_.patch, patch_rng_);
      const V pred = render_patch(model_, cond, cond.poses[v], spec, cfg_.samples_per_ray, SampleMode::Stratified,
                                  &ray_rng_);
      const V l = mse_loss(real_patch(it, v, spec), pred);
      loss = loss ? ad::add(loss, l) : l;
    }
    return loss;
  }

  V item_reg(const Item& it) {
    const auto* e = it.exp;
    if (e->timestamps < 2) return V();
    const std::size_t t = it.t + 1 < e->timestamps ? it.t : it.t - 1;
    std::vector<Vec3> pts(cfg_.reg_samples);
    for (auto& p : pts) p = {uniform(ray_rng_, -1, 1), uniform(ray_rng_, -1, 1), uniform(ray_rng_, -1, 1)};
    return ad::scale(frame_variation_reg(model_, *e, t, 1, pts, detector_), static_cast<float>(cfg_.reg_weight));
  }

  static bool finite(const V& v) { return std::isfinite(static_cast<double>(v.item())); }

  void mse_iteration(const std::vector<const Item*>& batch, double lr, LogRecord& rec) {
    model_.params().zero_grad();
    double total = 0;
    bool ok = true;
    for (const Item* it : batch) {
      const auto cond = condition_on(model_, *it->exp, it->t, detector_);
      V loss = item_mse(*it, cond);
      total += loss.item();
      if (cfg_.reg_weight > 0) {
        if (V r = item_reg(*it)) loss = ad::add(loss, r);
      }
      if (!finite(loss)) {
        ok = false;
        break;
      }
      ad::backward(loss);
    }
    rec.l_mse = total;
    if (!ok || !eg_opt_.step(model_.params(), lr)) rec.skipped = true;
  }

  void gan_iteration(const std::vector<const Item*>& batch, double lr, LogRecord& rec) {
    const std::size_t K = cfg_.patch.size;
    struct Fake {
      Conditioning<float> cond;
      ViewPose pose;
      PatchSpec spec;
      Rng ray_state;
    };
    std::vector<Fake> fakes;
    std::vector<V> reals, fake_imgs;
    for (const Item* it : batch) {
      Fake f{condition_on(model_, *it->exp, it->t, detector_),
             pose_from_azimuth(uniform(pose_rng_, 0.0, 180.0), detector_),
             sample_patch(it->exp->width, it->exp->height, cfg_.patch, patch_rng_), ray_rng_};
      ray_rng_.discard(1);  // keep the streams of successive items distinct
      {
        ad::NoGradGuard ng;
        Rng r = f.ray_state;
        fake_imgs.push_back(as_patch_image(
            render_patch(model_, f.cond, f.pose, f.spec, cfg_.samples_per_ray, SampleMode::Stratified, &r), K));
      }
      const std::size_t view = pose_rng_() % it->exp->views;
      const PatchSpec rs = sample_patch(it->exp->width, it->exp->height, cfg_.patch, patch_rng_);
      reals.push_back(as_patch_image(real_patch(*it, view, rs), K));
      fakes.push_back(std::move(f));
    }
    // Discriminator update.
    model_.params().zero_grad();
    const auto& D = model_.discriminator();
    const auto losses = gan_losses(D.scores(ad::concat(reals, 0)), D.scores(ad::concat(fake_imgs, 0)), cfg_.clamp_eps);
    rec.l_d = losses.d_loss.item();
    rec.clamped += losses.clamped;
    if (!finite(losses.d_loss)) {
      rec.skipped = true;
      return;
    }
    ad::backward(losses.d_loss);
    if (!d_opt_.step(model_.params(), lr)) {
      rec.skipped = true;
      return;
    }
    rec.d_step = true;
    // Encoder + generator update against the updated discriminator.
    model_.params().zero_grad();
    double lg = 0, lm = 0;
    const float inv_b = 1.0f / static_cast<float>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      Fake& f = fakes[i];
      const V pred = render_patch(model_, f.cond, f.pose, f.spec, cfg_.samples_per_ray, SampleMode::Stratified,
                                  &f.ray_state);
      const V scores = D.scores(as_patch_image(pred, K));
      rec.clamped += count_outside(scores, cfg_.clamp_eps);
      V loss = ad::scale(generator_loss(scores, cfg_.clamp_eps), static_cast<float>(cfg_.adversarial_weight) * inv_b);
      lg += loss.item();
      if (cfg_.mse_weight_after_warmup > 0) {
        const V m = item_mse(*batch[i], f.cond);
        lm += m.item();
        loss = ad::add(loss, ad::scale(m, static_cast<float>(cfg_.mse_weight_after_warmup)));
      }
      if (cfg_.reg_weight > 0) {
        if (V r = item_reg(*batch[i])) loss = ad::add(loss, r);
      }
      if (!finite(loss)) {
        rec.skipped = true;
        return;
      }
      ad::backward(loss);
    }
    rec.l_g = cfg_.adversarial_weight > 0 ? lg / cfg_.adversarial_weight : lg;
    if (cfg_.mse_weight_after_warmup > 0) rec.l_mse = lm;
    if (!eg_opt_.step(model_.params(), lr)) rec.skipped = true;
  }

  OnixModel<float>& model_;
  TrainConfig cfg_;
  Detector detector_;
  const std::vector<io::ExperimentImages>& data_;
  std::vector<Item> items_;
  Adam<float> eg_opt_, d_opt_;
  Schedule schedule_;
  Rng batch_rng_, patch_rng_, pose_rng_, ray_rng_;
};

}  // namespace onix
