#pragma once

// Finite-difference verification of reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "onix4d/autodiff.hpp"
#include "onix4d/rng.hpp"

namespace onix {

struct GradCheckOptions {
  double step = 1e-3;
  double floor = 1e-6;        // denominators below this use absolute error
  std::size_t max_probes = 0; // per input; 0 checks every entry
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  std::size_t probes = 0;
  GradCheckEntry worst;
  bool passed(double tol) const { return std::isfinite(max_rel_error) && max_rel_error < tol; }
};

inline double relative_error(double a, double n, double floor) {
  const double d = std::abs(a - n);
  const double s = std::max(std::abs(a), std::abs(n));
  return s > floor ? d / s : d;
}

// `loss` rebuilds the scalar graph from the current input values; `inputs`
// are leaf variables whose values are perturbed in place.
template <class T>
GradCheckResult check_gradients(const std::string& name, const std::function<ad::Var<T>()>& loss,
                                std::vector<ad::Var<T>> inputs, const GradCheckOptions& opt = {},
                                std::vector<std::string> input_names = {}) {
  for (auto& v : inputs) v.zero_grad();
  const ad::Var<T> root = loss();
  if (root.size() != 1) throw ShapeError("check_gradients: loss must be a scalar");
  ad::backward(root);
  std::vector<Tensor<T>> grads;
  for (const auto& v : inputs) grads.push_back(v.grad());
  GradCheckResult res;
  res.name = name;
  Rng rng = make_rng(opt.seed, "gradcheck");
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& val = inputs[k].mutable_value();
    std::vector<std::size_t> idx(val.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opt.max_probes && idx.size() > opt.max_probes) {
      for (std::size_t i = 0; i < opt.max_probes; ++i) std::swap(idx[i], idx[i + rng() % (idx.size() - i)]);
      idx.resize(opt.max_probes);
    }
    for (std::size_t i : idx) {
      const T orig = val[i];
      const T h = static_cast<T>(opt.step);
      double fp, fm;
      {
        ad::NoGradGuard ng;
        val[i] = orig + h;
        fp = static_cast<double>(loss().item());
        val[i] = orig - h;
        fm = static_cast<double>(loss().item());
      }
      val[i] = orig;
      // Use the realised step so that rounding of orig +- h does not bias the quotient.
      const double num = (fp - fm) / (static_cast<double>(orig + h) - static_cast<double>(orig - h));
      const double ana = static_cast<double>(grads[k][i]);
      const double e = relative_error(ana, num, opt.floor);
      ++res.probes;
      if (!(e <= res.max_rel_error)) {
        res.max_rel_error = e;
        res.worst = {k < input_names.size() ? input_names[k] : "input" + std::to_string(k), i, ana, num, e};
      }
    }
  }
  return res;
}

}  // namespace onix
