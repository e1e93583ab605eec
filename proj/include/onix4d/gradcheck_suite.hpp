#pragma once

// Finite-difference checks of every autodiff op, the network components and
// the end-to-end render-patch -> MSE graph, in float32 and float64.
//
// float64: analytic float64 gradient against a float64 central difference.
// float32: analytic float32 gradient against a float64 central difference of
// the same graph, so that the check measures the float32 backward pass rather
// than float32 cancellation in the difference quotient.

#include <functional>
#include <string>
#include <vector>

#include "onix4d/gradcheck.hpp"
#include "onix4d/training.hpp"

namespace onix {

struct GradSuiteOptions {
  double step32 = 1e-5;
  double step64 = 1e-6;
  double tol32 = 1e-3;
  double tol64 = 1e-4;
  std::size_t probes = 8;  // per input tensor; 0 = every entry
  std::uint64_t seed = 0;
};

struct GradSuiteEntry {
  std::string name;
  std::string dtype;
  double tolerance = 0;
  GradCheckResult result;
  bool passed() const { return result.passed(tolerance); }
};

struct GradSuiteReport {
  std::vector<GradSuiteEntry> entries;
  bool passed() const {
    for (const auto& e : entries)
      if (!e.passed()) return false;
    return !entries.empty();
  }
  io::json to_json() const {
    io::json arr = io::json::array();
    for (const auto& e : entries) {
      arr.push_back({{"name", e.name},
                     {"dtype", e.dtype},
                     {"max_rel_error", e.result.max_rel_error},
                     {"tolerance", e.tolerance},
                     {"probes", e.result.probes},
                     {"passed", e.passed()},
                     {"worst", {{"input", e.result.worst.name},
                                {"index", e.result.worst.index},
                                {"analytic", e.result.worst.analytic},
                                {"numeric", e.result.worst.numeric}}}});
    }
    return {{"passed", passed()}, {"checks", arr}};
  }
};

namespace gradsuite {

template <class M>
struct ScalarOf;
template <class T>
struct ScalarOf<OnixModel<T>> {
  using type = T;
};
template <class M>
using scalar_of = typename ScalarOf<M>::type;

enum class Values { Signed, AwayFromZero, Positive, Unit };

struct Case {
  std::string name;
  std::vector<Shape> shapes;
  Values values = Values::AwayFromZero;
  std::function<ad::Var<float>(const std::vector<ad::Var<float>>&)> f32;
  std::function<ad::Var<double>(const std::vector<ad::Var<double>>&)> f64;
};

// Wraps a generic graph builder for both dtypes.
template <class Fn>
Case make_case(std::string name, std::vector<Shape> shapes, Values v, Fn fn) {
  Case c;
  c.name = std::move(name);
  c.shapes = std::move(shapes);
  c.values = v;
  c.f32 = [fn](const std::vector<ad::Var<float>>& x) { return fn.template operator()<float>(x); };
  c.f64 = [fn](const std::vector<ad::Var<double>>& x) { return fn.template operator()<double>(x); };
  return c;
}

inline double draw(Values v, Rng& rng) {
  switch (v) {
    case Values::Signed: return uniform(rng, -1.0, 1.0);
    case Values::Positive: return uniform(rng, 0.2, 1.5);
    case Values::Unit: return uniform(rng, 0.1, 0.9);
    case Values::AwayFromZero: {
      const double m = uniform(rng, 0.1, 1.0);
      return uniform(rng) < 0.5 ? -m : m;
    }
  }
  return 0;
}

// Scalar readout with fixed pseudo-random weights.
template <class T>
ad::Var<T> readout(const ad::Var<T>& y) {
  Tensor<T> w(y.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(0.5 + 0.37 * std::sin(1.7 * double(i) + 0.3));
  return ad::sum(ad::mul(y, ad::Var<T>::constant(std::move(w))));
}

// Central differences of `loss` over random entries of `ref`, compared with the
// analytic gradients `grads` of the same values. The step is refined (h, h/4,
// h/16) until two successive quotients agree, so that a ReLU switching inside
// the largest step does not corrupt the reference.
template <class G, class R>
void probe_tensors(GradCheckResult& res, const std::vector<Tensor<G>>& grads, std::vector<ad::Var<R>>& ref,
                   const std::vector<std::string>& names, const std::function<long double()>& loss, double step,
                   double agree, std::size_t probes, Rng& prng) {
  for (std::size_t k = 0; k < ref.size(); ++k) {
    auto& val = ref[k].mutable_value();
    std::vector<std::size_t> idx(val.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (probes && idx.size() > probes) {
      for (std::size_t i = 0; i < probes; ++i) std::swap(idx[i], idx[i + prng() % (idx.size() - i)]);
      idx.resize(probes);
    }
    for (std::size_t i : idx) {
      const R orig = val[i];
      auto central = [&](double h) {
        long double fp, fm;
        {
          ad::NoGradGuard ng;
          val[i] = orig + static_cast<R>(h);
          fp = loss();
          val[i] = orig - static_cast<R>(h);
          fm = loss();
        }
        val[i] = orig;
        return static_cast<double>((fp - fm) / (2 * static_cast<long double>(h)));
      };
      double num = central(step);
      for (int refine = 0; refine < 2; ++refine) {
        const double finer = central(step * std::pow(0.25, refine + 1));
        const bool agrees = relative_error(num, finer, 1e-6) <= agree;
        num = agrees ? num : finer;
        if (agrees) break;
      }
      const double ana = static_cast<double>(grads[k][i]);
      const double e = relative_error(ana, num, 1e-6);
      ++res.probes;
      if (!(e <= res.max_rel_error)) {
        res.max_rel_error = e;
        res.worst = {k < names.size() ? names[k] : "input" + std::to_string(k), i, ana, num, e};
      }
    }
  }
}

inline std::vector<GradSuiteEntry> run_case(const Case& c, const GradSuiteOptions& o) {
  Rng rng = make_rng(o.seed, "gradsuite:" + c.name);
  std::vector<Tensor<double>> init;
  for (const auto& s : c.shapes) {
    Tensor<double> t(s);
    for (auto& v : t) v = draw(c.values, rng);
    init.push_back(std::move(t));
  }
  std::vector<GradSuiteEntry> out;
  // float64
  {
    std::vector<ad::Var<double>> x;
    for (const auto& t : init) x.push_back(ad::Var<double>::parameter(t));
    GradCheckOptions go;
    go.step = o.step64;
    go.max_probes = o.probes;
    go.seed = o.seed;
    auto res = check_gradients<double>(c.name, [&] { return c.f64(x); }, x, go);
    out.push_back({c.name, "float64", o.tol64, res});
  }
  // float32 backward against float64 differences of the same values
  {
    std::vector<ad::Var<float>> xf;
    std::vector<ad::Var<double>> xd;
    for (const auto& t : init) {
      xf.push_back(ad::Var<float>::parameter(t.cast<float>()));
      xd.push_back(ad::Var<double>::parameter(xf.back().value().cast<double>()));
    }
    ad::backward(c.f32(xf));
    std::vector<Tensor<float>> g;
    for (const auto& x : xf) g.push_back(x.grad());
    GradCheckResult res;
    res.name = c.name;
    Rng prng = make_rng(o.seed, "gradsuite-probe:" + c.name);
    probe_tensors(res, g, xd, {}, [&]() -> long double { return c.f64(xd).item(); }, o.step32, 0.1 * o.tol32, o.probes,
                  prng);
    out.push_back({c.name, "float32", o.tol32, res});
  }
  return out;
}

inline std::vector<Case> op_cases() {
  using ad::Var;
  std::vector<Case> cs;
  const Shape v{3, 4};
  cs.push_back(make_case("relu", {v}, Values::AwayFromZero, []<class T>(const std::vector<Var<T>>& x) { return readout(ad::relu(x[0])); }));
  cs.push_back(make_case("leaky_relu", {v}, Values::AwayFromZero,
                         []<class T>(const std::vector<Var<T>>& x) { return readout(ad::leaky_relu(x[0], T(0.2))); }));
  cs.push_back(make_case("sigmoid", {v}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) { return readout(ad::sigmoid(x[0])); }));
  cs.push_back(make_case("softplus", {v}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) { return readout(ad::softplus(x[0])); }));
  cs.push_back(make_case("exp", {v}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) { return readout(ad::exp(x[0])); }));
  cs.push_back(make_case("log", {v}, Values::Positive, []<class T>(const std::vector<Var<T>>& x) { return readout(ad::log(x[0])); }));
  cs.push_back(make_case("negate", {v}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) { return readout(ad::negate(x[0])); }));
  cs.push_back(make_case("square", {v}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) { return readout(ad::square(x[0])); }));
  cs.push_back(make_case("scale", {v}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) { return readout(ad::scale(x[0], T(-1.7))); }));
  cs.push_back(make_case("add_scalar", {v}, Values::Signed,
                         []<class T>(const std::vector<Var<T>>& x) { return readout(ad::add_scalar(x[0], T(0.3))); }));
  cs.push_back(make_case("clamp", {v}, Values::AwayFromZero,
                         []<class T>(const std::vector<Var<T>>& x) { return readout(ad::clamp(x[0], T(-0.5), T(0.55))); }));
  cs.push_back(make_case("add", {v, v}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) { return readout(ad::add(x[0], x[1])); }));
  cs.push_back(make_case("sub", {v, v}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) { return readout(ad::sub(x[0], x[1])); }));
  cs.push_back(make_case("mul", {v, v}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) { return readout(ad::mul(x[0], x[1])); }));
  cs.push_back(make_case("sum", {v}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) { return ad::sum(ad::square(x[0])); }));
  cs.push_back(make_case("mean", {v}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) { return ad::mean(ad::square(x[0])); }));
  cs.push_back(make_case("mean_over_views", {{3, 2, 5}}, Values::Signed,
                         []<class T>(const std::vector<Var<T>>& x) { return readout(ad::mean_over_views(x[0])); }));
  cs.push_back(make_case("weighted_segment_sum", {{6, 2}}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) {
    static const T w[3] = {T(0.5), T(1.25), T(-0.75)};
    return readout(ad::weighted_segment_sum(x[0], 2, std::span<const T>(w, 3)));
  }));
  cs.push_back(make_case("reshape", {v}, Values::Signed,
                         []<class T>(const std::vector<Var<T>>& x) { return readout(ad::square(ad::reshape(x[0], {2, 6}))); }));
  cs.push_back(make_case("transpose2d", {v}, Values::Signed,
                         []<class T>(const std::vector<Var<T>>& x) { return readout(ad::transpose2d(x[0])); }));
  cs.push_back(make_case("concat", {{2, 3}, {4, 3}}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) {
    return readout(ad::square(ad::concat(std::vector<Var<T>>{x[0], x[1]}, 0)));
  }));
  cs.push_back(make_case("concat_axis1", {{2, 3}, {2, 2}}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) {
    return readout(ad::square(ad::concat(std::vector<Var<T>>{x[0], x[1]}, 1)));
  }));
  cs.push_back(make_case("to_channels_last", {{2, 3, 2, 2}}, Values::Signed,
                         []<class T>(const std::vector<Var<T>>& x) { return readout(ad::to_channels_last(x[0])); }));
  cs.push_back(make_case("linear", {{5, 4}, {3, 4}, {3}}, Values::Signed,
                         []<class T>(const std::vector<Var<T>>& x) { return readout(ad::linear(x[0], x[1], x[2])); }));
  cs.push_back(make_case("residual_block", {{5, 4}, {6, 4}, {6}, {4, 6}, {4}}, Values::AwayFromZero,
                         []<class T>(const std::vector<Var<T>>& x) {
                           return readout(ad::residual_block(x[0], x[1], x[2], x[3], x[4]));
                         }));
  cs.push_back(make_case("conv2d_3x3", {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}, Values::Signed,
                         []<class T>(const std::vector<Var<T>>& x) { return readout(ad::conv2d(x[0], x[1], x[2], 1, 1)); }));
  cs.push_back(make_case("conv2d_4x4_s2", {{1, 2, 6, 6}, {3, 2, 4, 4}, {3}}, Values::Signed,
                         []<class T>(const std::vector<Var<T>>& x) { return readout(ad::conv2d(x[0], x[1], x[2], 2, 1)); }));
  cs.push_back(make_case("avg_pool2x2", {{1, 2, 4, 6}}, Values::Signed,
                         []<class T>(const std::vector<Var<T>>& x) { return readout(ad::avg_pool2x2(x[0])); }));
  cs.push_back(make_case("bilinear_sample", {{2, 4, 5, 3}}, Values::Signed, []<class T>(const std::vector<Var<T>>& x) {
    static const T xy[8] = {T(0.3), T(1.6), T(3.75), T(2.2), T(-0.4), T(0.5), T(4.2), T(3.1)};
    return readout(ad::bilinear_sample(x[0], 1, std::span<const T>(xy, 8)));
  }));
  cs.push_back(make_case("mse_loss", {{6, 2}, {6, 2}}, Values::Signed,
                         []<class T>(const std::vector<Var<T>>& x) { return mse_loss(x[0], x[1]); }));
  cs.push_back(make_case("discriminator_loss", {{4, 1}, {4, 1}}, Values::Unit, []<class T>(const std::vector<Var<T>>& x) {
    return gan_losses(x[0], x[1]).d_loss;
  }));
  cs.push_back(make_case("generator_loss", {{4, 1}}, Values::Unit,
                         []<class T>(const std::vector<Var<T>>& x) { return generator_loss(x[0]); }));
  cs.push_back(make_case("frame_variation", {v, v}, Values::Signed,
                         []<class T>(const std::vector<Var<T>>& x) { return frame_variation(x[0], x[1]); }));
  return cs;
}

inline ModelConfig small_model() {
  ModelConfig mc;
  mc.hidden = 8;
  mc.encoder_channels = {4, 4, 4};
  mc.xyz_frequencies = 2;
  mc.t_frequencies = 1;
  mc.patch = 8;
  mc.disc_channels = 4;
  mc.head_bias = 0.0;
  return mc;
}

// Analytic float32 and float64 gradients are compared with central
// differences of an extended-precision twin holding the same parameter
// values; fn(model) builds the scalar loss.
template <class Fn>
std::vector<GradSuiteEntry> model_case(const std::string& name, const std::string& prefix, Fn fn,
                                       const GradSuiteOptions& o) {
  using Ext = long double;
  const ModelConfig mc = small_model();
  OnixModel<float> mf(mc, o.seed + 11);
  OnixModel<double> md(mc, o.seed + 11);
  OnixModel<Ext> mx(mc, o.seed + 11);
  // Non-zero residual outputs so that every parameter is exercised.
  Rng rng = make_rng(o.seed, "gradsuite-model:" + name);
  for (std::size_t k = 0; k < mf.params().size(); ++k) {
    auto& vf = mf.params().entries()[k].var.mutable_value();
    auto& vd = md.params().entries()[k].var.mutable_value();
    auto& vx = mx.params().entries()[k].var.mutable_value();
    for (std::size_t i = 0; i < vf.size(); ++i) {
      if (mf.params().entries()[k].init == InitScheme::Zeros) vf[i] = static_cast<float>(uniform(rng, -0.3, 0.3));
      vd[i] = static_cast<double>(vf[i]);
      vx[i] = static_cast<Ext>(vf[i]);
    }
  }
  std::vector<std::size_t> picked;
  std::vector<std::string> names;
  std::vector<ad::Var<Ext>> xx;
  for (std::size_t k = 0; k < md.params().size(); ++k) {
    const auto& e = md.params().entries()[k];
    if (e.name.rfind(prefix, 0) != 0) continue;
    picked.push_back(k);
    names.push_back(e.name);
    xx.push_back(mx.params().entries()[k].var);
  }
  auto reference = [&]() -> long double { return fn(mx).item(); };
  std::vector<GradSuiteEntry> out;
  {
    md.params().zero_grad();
    ad::backward(fn(md));
    std::vector<Tensor<double>> g;
    for (std::size_t k : picked) g.push_back(md.params().entries()[k].var.grad());
    GradCheckResult res;
    res.name = name;
    Rng prng = make_rng(o.seed, "gradsuite-probe64:" + name);
    probe_tensors(res, g, xx, names, reference, o.step64, 0.1 * o.tol64, o.probes, prng);
    out.push_back({name, "float64", o.tol64, res});
  }
  {
    mf.params().zero_grad();
    ad::backward(fn(mf));
    std::vector<Tensor<float>> g;
    for (std::size_t k : picked) g.push_back(mf.params().entries()[k].var.grad());
    GradCheckResult res;
    res.name = name;
    Rng prng = make_rng(o.seed, "gradsuite-probe:" + name);
    probe_tensors(res, g, xx, names, reference, o.step32, 0.1 * o.tol32, o.probes, prng);
    out.push_back({name, "float32", o.tol32, res});
  }
  return out;
}

template <class T>
ad::Var<T> test_images(std::size_t views, std::size_t size) {
  Tensor<T> img(Shape{views, 2, size, size});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<T>(0.5 + 0.45 * std::sin(0.37 * double(i)));
  return ad::Var<T>::constant(std::move(img));
}

}  // namespace gradsuite

// Runs every check; `include_model` adds the encoder, discriminator and the
// end-to-end render-patch -> MSE graph.
inline GradSuiteReport run_gradcheck_suite(const GradSuiteOptions& o = {}, bool include_model = true) {
  GradSuiteReport rep;
  for (const auto& c : gradsuite::op_cases())
    for (auto& e : gradsuite::run_case(c, o)) rep.entries.push_back(std::move(e));
  if (!include_model) return rep;
  const Detector det{16, 16, 2.0 / 16.0};
  auto add = [&](std::vector<GradSuiteEntry> es) {
    for (auto& e : es) rep.entries.push_back(std::move(e));
  };
  add(gradsuite::model_case(
      "encoder", "encoder.",
      [](auto& m) {
        using T = gradsuite::scalar_of<std::remove_reference_t<decltype(m)>>;
        const auto pyr = m.encode(gradsuite::test_images<T>(2, 16));
        ad::Var<T> acc;
        for (const auto& l : pyr.levels) {
          const auto r = gradsuite::readout(l);
          acc = acc ? ad::add(acc, r) : r;
        }
        return acc;
      },
      o));
  add(gradsuite::model_case(
      "discriminator", "discriminator.",
      [](auto& m) {
        using T = gradsuite::scalar_of<std::remove_reference_t<decltype(m)>>;
        return gradsuite::readout(m.discriminator().scores(gradsuite::test_images<T>(2, 8)));
      },
      o));
  add(gradsuite::model_case(
      "render_patch_mse", "",
      [det](auto& m) {
        using T = gradsuite::scalar_of<std::remove_reference_t<decltype(m)>>;
        const std::vector<ViewPose> poses{pose_from_azimuth(0, det), pose_from_azimuth(23.8, det)};
        const auto cond = m.condition(gradsuite::test_images<T>(2, 16), poses, 0.3);
        const PatchSpec spec{4, 1.7, 3.2, 4.1};
        Tensor<T> tgt(Shape{16, 2});
        for (std::size_t i = 0; i < tgt.size(); ++i) tgt[i] = static_cast<T>(0.2 + 0.1 * std::cos(double(i)));
        const auto pred = render_patch(m, cond, pose_from_azimuth(51.0, det), spec, 4, SampleMode::Uniform, nullptr);
        auto loss = mse_loss(ad::Var<T>::constant(std::move(tgt)), pred);
        // Adversarial term through the discriminator on the same rendered patch.
        const auto fake = as_patch_image(render_patch(m, cond, pose_from_azimuth(51.0, det), PatchSpec{8, 1.0, 2.0, 3.0}, 4,
                                                      SampleMode::Uniform, nullptr),
                                         8);
        return ad::add(loss, generator_loss(m.discriminator().scores(fake)));
      },
      o));
  return rep;
}

}  // namespace onix
