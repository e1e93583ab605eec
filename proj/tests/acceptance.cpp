// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.
//
// Environment:
//   ONIX4D_ACCEPT_ONLY    comma-separated criterion numbers to run (default: all)
//   ONIX4D_ACCEPT_EPOCHS  training epochs for criteria 5 and 6 (default 8, at most 60)

#include <fftw3.h>

#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include "onix4d/onix4d.hpp"

using namespace onix;
namespace fs = std::filesystem;

namespace {

const Logger kQuiet(LogLevel::Error);

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void progress(const std::string& msg) { std::fprintf(stderr, "[acceptance] %s\n", msg.c_str()); }

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("onix4d_accept_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::size_t env_size(const char* name, std::size_t fallback) {
  const char* v = std::getenv(name);
  return v && *v ? static_cast<std::size_t>(std::stoul(v)) : fallback;
}

// 1. Sphere absorption line integrals against 2 sqrt(R^2 - b^2). Per-pixel
// error is measured against the peak chord at the reference pose, where rays
// span the box edge to edge; off-axis rays are longer, so the midpoint step
// (ray length / n) grows and only the aggregate error is bounded there.
Outcome sphere_chord() {
  Stopwatch sw;
  SphereField f;
  f.radius = 0.5;
  f.material = {2e-5, 3e-8};
  Acquisition acq;
  acq.samples_per_ray = 256;
  double pixel_ref = 0, pixel_off = 0, worst_l1 = 0;
  for (double phi : {0.0, 23.8, 45.0, 90.0, 137.0}) {
    const auto pose = pose_from_azimuth(phi, acq.detector);
    const auto img = render_projection(f, pose, acq);
    const double peak = acq.absorption_factor() * f.material.beta0 * 2 * f.radius;
    double err_sum = 0, ref_sum = 0, worst = 0;
    for (std::size_t r = 0; r < acq.detector.height; ++r)
      for (std::size_t c = 0; c < acq.detector.width; ++c) {
        const double b = std::hypot(pose.u_of(double(c)), pose.v_of(double(r)));
        const double chord = b < f.radius ? 2 * std::sqrt(f.radius * f.radius - b * b) : 0.0;
        const double exact = acq.absorption_factor() * f.material.beta0 * chord;
        const double e = std::abs(img.absorption.at(c, r) - exact);
        worst = std::max(worst, e / peak);
        err_sum += e;
        ref_sum += exact;
      }
    (phi == 0.0 ? pixel_ref : pixel_off) = std::max(phi == 0.0 ? pixel_ref : pixel_off, worst);
    worst_l1 = std::max(worst_l1, err_sum / ref_sum);
  }
  const double secs = sw.seconds();
  return {pixel_ref < 0.01 && worst_l1 < 0.01 && secs < 10,
          fmt("max per-pixel error %.3g%% of peak chord at azimuth 0 (%.3g%% off-axis), max aggregate L1 error %.3g%% "
              "over azimuths 0/23.8/45/90/137, %.2f s",
              100 * pixel_ref, 100 * pixel_off, 100 * worst_l1, secs)};
}

// 2. Finite-difference checks of every op and the render-patch -> loss graph.
Outcome gradient_suite() {
  Stopwatch sw;
  const auto rep = run_gradcheck_suite(GradSuiteOptions{});
  const double secs = sw.seconds();
  double w32 = 0, w64 = 0;
  std::size_t failed = 0;
  for (const auto& e : rep.entries) {
    (e.dtype == "float32" ? w32 : w64) = std::max(e.dtype == "float32" ? w32 : w64, e.result.max_rel_error);
    failed += !e.passed();
  }
  return {rep.passed() && secs < 60,
          fmt("%zu checks, %zu failed, worst float32 %.3g (< 1e-3), worst float64 %.3g (< 1e-4), %.1f s",
              rep.entries.size(), failed, w32, w64, secs)};
}

// 3. SART on a 64^3 sphere from 180 noiseless views over 180 degrees.
Outcome sart_oracle() {
  Stopwatch sw;
  const std::size_t n = 64;
  const Detector det{n, n, 2.0 / double(n)};
  SphereField f;
  f.center = {0.05, -0.03, 0.02};
  f.radius = 0.5;
  f.band = 0.09;
  f.material = {0.0, 1.0};
  SartConfig sc;
  for (std::size_t i = 0; i < 180; ++i) sc.angles.push_back(double(i));
  sc.iterations = 20;
  std::vector<Image> proj;
  for (double a : sc.angles) {
    const auto li = integrate_rays(f, rays_for_pixels(pose_from_azimuth(a, det), all_pixels(det)), 256);
    Image img(det.width, det.height);
    for (std::size_t i = 0; i < li.size(); ++i) img.px[i] = static_cast<float>(li[i].beta);
    proj.push_back(std::move(img));
  }
  const double sim = sw.seconds();
  const SartResult r = sart_reconstruct(proj, sc, n, det);
  const double secs = sw.seconds();
  const Volume truth = voxelize([&](const Vec3& p) { return f(p).beta; }, n);
  const double e = mse(r.volume, truth);
  const double res = r.residuals.back();
  return {e < 1e-4 && res < 0.01 && secs < 120,
          fmt("volume MSE %.3g (< 1e-4), projection residual %.3g%% (< 1%%), %.1f s (%.1f s simulating)", e, 100 * res,
              secs, sim)};
}

Volume random_volume(std::size_t n, std::uint64_t seed) {
  Volume v(n, n, n);
  Rng rng = make_rng(seed, "accept-volume");
  for (auto& x : v.data) x = static_cast<float>(uniform(rng));
  return v;
}

// Keeps Fourier modes whose rounded radius is <= cutoff.
Volume low_pass(const Volume& v, std::size_t cutoff) {
  const std::size_t N = v.nx;
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
  for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = static_cast<float>(buf[i].real() / double(buf.size()));
  return out;
}

// 4. Metric identities and the half-bit crossing of a low-pass pair.
Outcome metric_identities() {
  Stopwatch sw;
  const Volume a = random_volume(32, 1), b = random_volume(32, 2);
  const double m = mse(a, a);
  const double d_self = dssim(a, a);
  const double d_sym = std::abs(dssim(a, b) - dssim(b, a));
  double fsc_dev = 0;
  for (double c : fsc(a, a).correlation) fsc_dev = std::max(fsc_dev, std::abs(c - 1.0));
  double crossing_err = 0;
  for (std::size_t cutoff : {4, 6, 9, 12}) {
    const auto r = resolution_half_bit(fsc(a, low_pass(a, cutoff)));
    crossing_err = std::max(crossing_err, r.at_limit ? 1e9 : std::abs(r.crossing - double(cutoff)));
  }
  const double secs = sw.seconds();
  const bool ok = m == 0 && std::abs(d_self) < 1e-9 && d_sym < 1e-9 && fsc_dev < 1e-9 && crossing_err <= 1.0 && secs < 30;
  return {ok, fmt("mse(a,a) %.3g, dssim(a,a) %.3g, |dssim(a,b)-dssim(b,a)| %.3g, max |FSC(a,a)-1| %.3g, "
                  "max half-bit crossing offset %.3g shells (cutoffs 4,6,9,12), %.2f s",
                  m, d_self, d_sym, fsc_dev, crossing_err, secs)};
}

// Shared state of criteria 5 and 6.
struct DeskScale {
  fs::path root;
  io::ManifestReader* manifest = nullptr;
  std::vector<io::ExperimentImages> data;
  std::size_t epochs = 8;
};

ModelConfig desk_model() { return ModelConfig{}; }

TrainConfig desk_train(std::size_t epochs, std::uint64_t seed) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.warmup_epochs = 5;
  tc.mode = TrainMode::TwoPhase;
  tc.lr = 1e-3;
  tc.samples_per_ray = 8;
  tc.render_views = 1;
  tc.mse_weight_after_warmup = 1.0;
  tc.seed = seed;
  return tc;
}

std::unique_ptr<OnixModel<float>> train_desk(const std::vector<io::ExperimentImages>& data, const Detector& det,
                                             std::size_t epochs, std::uint64_t seed) {
  auto model = std::make_unique<OnixModel<float>>(desk_model(), seed);
  Trainer trainer(*model, desk_train(epochs, seed), det, data);
  TrainHooks hooks;
  Stopwatch sw;
  hooks.on_checkpoint = [&](std::size_t epoch, bool) {
    progress(fmt("  epoch %zu done at %.0f s", epoch, sw.seconds()));
  };
  trainer.run(hooks);
  return model;
}

// 5. Desk-scale end-to-end run.
Outcome desk_scale(DeskScale& ds, std::unique_ptr<OnixModel<float>>& model16_seed0) {
  Stopwatch sw;
  const auto& tr = ds.manifest->training();
  progress(fmt("criterion 5: training 16 experiments x 24 timestamps for %zu epochs", ds.epochs));
  model16_seed0 = train_desk(ds.data, tr.acquisition.detector, ds.epochs, 0);
  const double train_secs = sw.seconds();
  EvalOptions eo;
  eo.grid = 32;
  eo.fsc = false;
  const auto rep = evaluate_model(*model16_seed0, ds.data, ds.manifest->eval_section(), tr.reference,
                                  tr.acquisition.detector, eo);
  const double secs = sw.seconds();
  return {rep.mse < 5e-3 && rep.dssim < 2e-2,
          fmt("%zu epochs (5 warmup), 4D MSE %.4g (< 5e-3), 4D DSSIM %.4g (< 2e-2) over %zu volumes at 32^3, "
              "train %.0f s, total %.0f s on %u hardware threads",
              ds.epochs, rep.mse, rep.dssim, rep.entries.size(), train_secs, secs,
              std::thread::hardware_concurrency())};
}

double top_dssim_on_first(const OnixModel<float>& model, const DeskScale& ds) {
  const auto& tr = ds.manifest->training();
  EvalOptions eo;
  eo.grid = 32;
  eo.fsc = false;
  eo.experiments = {ds.data.front().id};
  return evaluate_model(model, ds.data, ds.manifest->eval_section(), tr.reference, tr.acquisition.detector, eo)
      .top_dssim;
}

// 6. Top-view DSSIM of 16-experiment training against 1-experiment training,
// both scored on the first experiment and averaged over 3 seeds.
Outcome more_experiments_help(DeskScale& ds, const OnixModel<float>* model16_seed0) {
  Stopwatch sw;
  const Detector det = ds.manifest->training().acquisition.detector;
  const std::vector<io::ExperimentImages> one{ds.data.front()};
  double sum16 = 0, sum1 = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    double d16;
    if (seed == 0 && model16_seed0) {
      d16 = top_dssim_on_first(*model16_seed0, ds);
    } else {
      progress(fmt("criterion 6: 16 experiments, seed %llu", static_cast<unsigned long long>(seed)));
      d16 = top_dssim_on_first(*train_desk(ds.data, det, ds.epochs, seed), ds);
    }
    progress(fmt("criterion 6: 1 experiment, seed %llu", static_cast<unsigned long long>(seed)));
    const double d1 = top_dssim_on_first(*train_desk(one, det, ds.epochs, seed), ds);
    sum16 += d16;
    sum1 += d1;
    per_seed += fmt(" seed%llu %.4g/%.4g", static_cast<unsigned long long>(seed), d16, d1);
  }
  const double m16 = sum16 / 3, m1 = sum1 / 3;
  return {m16 < m1, fmt("mean top-view DSSIM 16 experiments %.4g vs 1 experiment %.4g (16/1 per seed:%s), %.0f s", m16,
                        m1, per_seed.c_str(), sw.seconds())};
}

json tiny_run(const fs::path& out) {
  json j = json::parse(R"({
    "seed": 5, "threads": 1,
    "simulate": {"experiments": 2, "timestamps": 3,
                 "acquisition": {"detector": {"width": 16, "height": 16, "pitch": 0.125}, "samples_per_ray": 16}},
    "train": {"model": {"hidden": 8, "encoder_channels": [4, 4], "patch": 8, "disc_channels": 4},
              "optim": {"epochs": 2, "warmup_epochs": 1, "batch_size": 2, "patch": {"size": 8},
                        "samples_per_ray": 8, "checkpoint_every": 1}},
    "render": {"grid": 16}
  })");
  j["out"] = out.string();
  return j;
}

struct TinyData {
  fs::path root;
  std::vector<io::ExperimentImages> data;
  Detector det;
  RunConfig cfg;
};

TinyData tiny_data(const std::string& name) {
  TinyData t;
  t.root = scratch(name);
  t.cfg = parse_config(tiny_run(t.root / "data"));
  run_simulate(t.cfg, kQuiet);
  io::ManifestReader m(t.root / "data" / "manifest.json");
  t.data = io::load_training_images(m);
  t.det = m.training().acquisition.detector;
  return t;
}

std::vector<LogRecord> train_log(const TinyData& t, const TrainConfig& tc) {
  OnixModel<float> model(t.cfg.train.model, tc.seed);
  Trainer trainer(model, tc, t.det, t.data);
  std::vector<LogRecord> log;
  TrainHooks hooks;
  hooks.on_iteration = [&](const LogRecord& r) { log.push_back(r); };
  trainer.run(hooks);
  return log;
}

// 7. Schedule conformance read from the training log.
Outcome schedule_conformance() {
  Stopwatch sw;
  const TinyData t = tiny_data("schedule");
  bool ok = true;
  std::string detail;

  TrainConfig two = t.cfg.train.train;
  two.epochs = 7;
  two.warmup_epochs = 5;
  two.mode = TrainMode::TwoPhase;
  std::size_t warm_d = 0, warm_gan = 0, late_d = 0, late_iters = 0;
  for (const auto& r : train_log(t, two)) {
    if (r.epoch <= 5) {
      warm_d += r.d_step;
      warm_gan += r.phase == IterationKind::Gan;
    } else {
      late_d += r.d_step;
      ++late_iters;
    }
  }
  ok &= warm_d == 0 && warm_gan == 0 && late_d == late_iters && late_iters > 0;
  detail += fmt("two-phase: %zu D updates and %zu GAN iterations in epochs 1-5, %zu/%zu D updates in epochs 6-7; ",
                warm_d, warm_gan, late_d, late_iters);

  TrainConfig dice = t.cfg.train.train;
  dice.mode = TrainMode::RandomDice;
  dice.epochs = 4;
  dice.warmup_epochs = 0;
  dice.seed = 11;
  const auto dlog = train_log(t, dice);
  Schedule replay(dice, dice.seed);
  bool same = !dlog.empty();
  for (const auto& r : dlog) same &= replay.next(r.epoch) == r.phase;
  Schedule sched(dice, dice.seed);
  std::size_t gan = 0;
  const std::size_t n = 10000;
  for (std::size_t i = 0; i < n; ++i) gan += sched.next(1 + i / 100) == IterationKind::Gan;
  const double frac = double(gan) / double(n);
  ok &= same && std::abs(frac - 0.5) <= 0.02;
  detail += fmt("dice: logged phases %s the trainer's schedule stream, GAN fraction %.4f over %zu iterations; ",
                same ? "match" : "DIFFER from", frac, n);

  TrainConfig decay = t.cfg.train.train;
  decay.epochs = 4;
  decay.warmup_epochs = 1;
  decay.decay_every = 2;
  decay.lr = 1e-3;
  bool lr_ok = true;
  for (const auto& r : train_log(t, decay)) {
    const double want = r.epoch <= 2 ? 1e-3 : 1e-4;
    lr_ok &= std::abs(r.lr - want) <= 1e-12 * want;
  }
  TrainConfig paper_like;
  paper_like.lr = 1e-4;
  const double l100 = learning_rate(paper_like, 100), l101 = learning_rate(paper_like, 101),
               l201 = learning_rate(paper_like, 201);
  lr_ok &= l100 == 1e-4 && std::abs(l101 - 1e-5) < 1e-18 && std::abs(l201 - 1e-6) < 1e-19;
  ok &= lr_ok;
  detail += fmt("lr: logged decade drop after epoch 2 of a decay_every=2 run %s, epoch 100/101/201 -> %.3g/%.3g/%.3g",
                lr_ok ? "ok" : "WRONG", l100, l101, l201);
  return {ok, detail + fmt(", %.1f s", sw.seconds())};
}

std::vector<std::uint8_t> without_wallclock(const fs::path& jsonl) {
  std::istringstream in(io::read_text(jsonl));
  std::string line, out;
  while (std::getline(in, line)) {
    json j = json::parse(line);
    j.erase("wallclock");
    out += j.dump() + "\n";
  }
  return {out.begin(), out.end()};
}

template <class Decode, class Encode>
bool round_trips(const fs::path& p, Decode decode, Encode encode, std::size_t& files) {
  const auto bytes = io::read_file(p);
  if (encode(decode(bytes)) != bytes) return false;
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x04;
  bool detected = false;
  try {
    decode(flipped);
  } catch (const io::FormatError& e) {
    detected = std::string(e.what()).find("CRC mismatch") != std::string::npos;
  }
  ++files;
  return detected;
}

// 8. Bit-identical simulate -> train -> render and format round trips.
Outcome determinism_and_io() {
  Stopwatch sw;
  set_threads(1);
  const fs::path root = scratch("determinism");
  // Both runs use the same working path (configs record it), then move aside.
  for (const char* run : {"a", "b"}) {
    const fs::path dir = root / "run";
    run_simulate(parse_config(tiny_run(dir / "data")), kQuiet);
    json tr = tiny_run(dir / "train");
    tr["train"]["data"] = (dir / "data" / "manifest.json").string();
    run_train(parse_config(tr), kQuiet);
    json rd = tiny_run(dir / "render");
    rd["render"]["data"] = (dir / "data" / "manifest.json").string();
    rd["render"]["checkpoint"] = (dir / "train" / "model.onixckpt").string();
    run_render(parse_config(rd), kQuiet);
    fs::rename(dir, root / run);
  }
  std::size_t compared = 0, differing = 0;
  for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), root / "a");
    const fs::path other = root / "b" / rel;
    // Wallclock entries of the training log are excluded.
    std::vector<std::uint8_t> x, y;
    if (rel.filename() == "train_log.jsonl") {
      x = without_wallclock(entry.path());
      y = fs::exists(other) ? without_wallclock(other) : std::vector<std::uint8_t>{};
    } else {
      x = io::read_file(entry.path());
      y = fs::exists(other) ? io::read_file(other) : std::vector<std::uint8_t>{};
    }
    ++compared;
    if (x != y) {
      ++differing;
      progress("criterion 8: differs: " + rel.string());
    }
  }
  std::size_t files = 0;
  bool io_ok = true;
  for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
    const auto ext = entry.path().extension();
    if (ext == ".xmpj") {
      io_ok &= round_trips(entry.path(), [](auto b) { return io::decode_xmpj(b); },
                           [](const auto& s) { return io::encode_xmpj(s); }, files);
    } else if (ext == ".xvol") {
      io_ok &= round_trips(entry.path(), [](auto b) { return io::decode_xvol(b); },
                           [](const auto& v) { return io::encode_xvol(v); }, files);
    } else if (ext == ".onixckpt") {
      io_ok &= round_trips(entry.path(), [](auto b) { return io::decode_checkpoint(b); },
                           [](const auto& t) { return io::encode_checkpoint(t); }, files);
    }
  }
  const bool ok = differing == 0 && compared > 0 && io_ok && files > 0;
  return {ok, fmt("%zu output files compared across two runs, %zu differ; %zu XMPJ/XVOL/ONIXCKPT files re-encode "
                  "bit-exactly and reject a flipped byte by CRC: %s, %.1f s",
                  compared, differing, files, io_ok ? "yes" : "NO", sw.seconds())};
}

}  // namespace

int main() {
  std::set<int> only;
  if (const char* s = std::getenv("ONIX4D_ACCEPT_ONLY"); s && *s) {
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
  }
  auto wanted = [&](int c) { return only.empty() || only.count(c); };

  DeskScale ds;
  ds.epochs = env_size("ONIX4D_ACCEPT_EPOCHS", 8);
  if (ds.epochs < 6 || ds.epochs > 60) {
    std::fprintf(stderr, "ONIX4D_ACCEPT_EPOCHS must lie in [6, 60]\n");
    return 2;
  }
  std::unique_ptr<io::ManifestReader> manifest;
  auto desk_data = [&] {
    if (manifest) return;
    ds.root = scratch("desk");
    json sim = json::parse(R"({"simulate": {"experiments": 16, "timestamps": 24}})");
    sim["out"] = (ds.root / "data").string();
    progress("simulating 16 experiments x 24 timestamps at 64x64");
    run_simulate(parse_config(sim), kQuiet);
    manifest = std::make_unique<io::ManifestReader>(ds.root / "data" / "manifest.json");
    ds.manifest = manifest.get();
    ds.data = io::load_training_images(*manifest);
  };
  set_threads(std::max(1u, std::thread::hardware_concurrency()));

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  std::unique_ptr<OnixModel<float>> model16;
  const std::vector<Criterion> criteria{
      {1, "forward-model sphere chord oracle", sphere_chord},
      {2, "autodiff finite-difference suite", gradient_suite},
      {3, "SART 64^3 sphere oracle", sart_oracle},
      {4, "metric identities", metric_identities},
      {5, "desk-scale end-to-end reconstruction",
       [&] {
         desk_data();
         return desk_scale(ds, model16);
       }},
      {6, "more experiments improve the unseen top view",
       [&] {
         desk_data();
         return more_experiments_help(ds, model16.get());
       }},
      {7, "schedule conformance", schedule_conformance},
      {8, "determinism and file-format round trips", determinism_and_io},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    if (!wanted(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %d %s: %s | %s\n", c.id, o.pass ? "PASS" : "FAIL", c.name, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  fs::remove_all(fs::temp_directory_path() / ("onix4d_accept_" + std::to_string(::getpid())));
  return failed ? 1 : 0;
}
