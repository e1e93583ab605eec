#pragma once

#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "onix4d/autodiff.hpp"
#include "onix4d/rng.hpp"

namespace onix {

enum class InitScheme { HeUniform, Zeros, Constant };

inline std::string_view to_string(InitScheme s) {
  switch (s) {
    case InitScheme::HeUniform: return "he_uniform";
    case InitScheme::Zeros: return "zeros";
    case InitScheme::Constant: return "constant";
  }
  return "?";
}

template <class T>
struct Parameter {
  std::string name;
  ad::Var<T> var;
  InitScheme init;
};

// Named parameter collection. Names carry the owning network as prefix
// ("encoder.", "generator.", "discriminator."), so each tensor belongs to
// exactly one network definition.
template <class T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed), rng_(make_rng(seed, "init")) {}

  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  std::uint64_t seed() const noexcept { return seed_; }

  ad::Var<T> create(const std::string& name, Shape shape, InitScheme init, T constant = T{0}) {
    if (index_.count(name)) throw Error("duplicate parameter name '" + name + "'");
    Tensor<T> value(shape);
    if (init == InitScheme::HeUniform) {
      const std::size_t fan_in = shape.size() > 1 ? numel(shape) / shape[0] : shape[0];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (auto& v : value) v = static_cast<T>(uniform(rng_, -bound, bound));
    } else if (init == InitScheme::Constant) {
      value.fill(constant);
    }
    index_[name] = params_.size();
    params_.push_back({name, ad::Var<T>::parameter(std::move(value)), init});
    return params_.back().var;
  }

  const ad::Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter '" + name + "'");
    return params_[it->second].var;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Parameter<T>>& entries() noexcept { return params_; }
  const std::vector<Parameter<T>>& entries() const noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  // Copies values by name from a store of another precision.
  template <class U>
  void assign_from(const ParamStore<U>& other) {
    for (auto& p : params_) {
      const auto& src = other.get(p.name).value();
      if (src.shape() != p.var.shape()) {
        throw ShapeError("parameter '" + p.name + "' shape " + onix::to_string(src.shape()) +
                         " vs " + onix::to_string(p.var.shape()));
      }
      auto& dst = p.var.mutable_value();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
    }
  }

 private:
  std::uint64_t seed_;
  Rng rng_;
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// ADAM with bias correction over the parameters whose names start with one
// of the given prefixes (all parameters when the list is empty).
template <class T>
class Adam {
 public:
  Adam(AdamConfig cfg, std::vector<std::string> prefixes = {})
      : cfg_(cfg), prefixes_(std::move(prefixes)) {}

  const AdamConfig& config() const noexcept { return cfg_; }
  std::uint64_t steps() const noexcept { return steps_; }
  std::uint64_t skipped() const noexcept { return skipped_; }

  bool owns(const std::string& name) const {
    if (prefixes_.empty()) return true;
    for (const auto& p : prefixes_)
      if (name.rfind(p, 0) == 0) return true;
    return false;
  }

  // Returns false (and leaves parameters untouched) if any owned gradient is
  // non-finite.
  bool step(ParamStore<T>& store, double lr) {
    for (auto& p : store.entries()) {
      if (!owns(p.name) || !p.var.has_grad()) continue;
      for (T g : p.var.node()->grad) {
        if (!std::isfinite(static_cast<double>(g))) {
          ++skipped_;
          return false;
        }
      }
    }
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (auto& p : store.entries()) {
      if (!owns(p.name)) continue;
      auto& st = state_[p.name];
      auto& value = p.var.mutable_value();
      if (st.m.empty()) {
        st.m.assign(value.size(), 0.0);
        st.v.assign(value.size(), 0.0);
      }
      const bool has = p.var.has_grad();
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = has ? static_cast<double>(p.var.node()->grad[i]) : 0.0;
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mh = st.m[i] / bc1;
        const double vh = st.v[i] / bc2;
        value[i] = static_cast<T>(static_cast<double>(value[i]) - lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
    return true;
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::vector<std::string> prefixes_;
  std::map<std::string, Moments> state_;
  std::uint64_t steps_ = 0;
  std::uint64_t skipped_ = 0;
};

}  // namespace onix
