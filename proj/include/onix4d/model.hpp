#pragma once

// The three networks: a shared-weight convolutional encoder producing a
// feature pyramid per view, an implicit field generator conditioned on
// pixel-aligned features, and a patch discriminator.

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "onix4d/autodiff.hpp"
#include "onix4d/geometry.hpp"
#include "onix4d/params.hpp"

namespace onix {

struct ModelConfig {
  std::size_t image_channels = 2;
  std::vector<std::size_t> encoder_channels{16, 32, 64};
  std::size_t hidden = 32;
  std::size_t view_blocks = 3;
  std::size_t joint_blocks = 2;
  bool fourier_encoding = true;
  std::size_t xyz_frequencies = 6;
  std::size_t t_frequencies = 4;
  bool time_input = true;
  std::size_t patch = 32;
  std::size_t disc_channels = 16;
  double head_bias = -4.0;

  std::size_t coord_dims() const {
    const std::size_t xyz = 3 * (1 + (fourier_encoding ? 2 * xyz_frequencies : 0));
    const std::size_t t = time_input ? 1 + (fourier_encoding ? 2 * t_frequencies : 0) : 0;
    return xyz + t;
  }

  std::size_t feature_dims() const {
    std::size_t n = 0;
    for (auto c : encoder_channels) n += c;
    return n;
  }

  void validate() const {
    if (encoder_channels.empty()) throw Error("model: encoder needs at least one stage");
    if (hidden == 0 || image_channels == 0) throw Error("model: zero-sized layer");
    if (patch < 8 || patch % 4) throw Error("model: patch size must be a multiple of 4 and >= 8");
  }
};

// Positional encoding of (x, y, z) and, optionally, t. Time enters as 2t - 1.
inline std::vector<double> encode_coordinates(const ModelConfig& cfg, const Vec3& p, double t) {
  std::vector<double> out;
  out.reserve(cfg.coord_dims());
  auto push = [&](double v, std::size_t freqs) {
    out.push_back(v);
    if (!cfg.fourier_encoding) return;
    for (std::size_t k = 0; k < freqs; ++k) {
      const double w = std::ldexp(std::numbers::pi, static_cast<int>(k));
      out.push_back(std::sin(w * v));
      out.push_back(std::cos(w * v));
    }
  };
  push(p.x, cfg.xyz_frequencies);
  push(p.y, cfg.xyz_frequencies);
  push(p.z, cfg.xyz_frequencies);
  if (cfg.time_input) push(2.0 * t - 1.0, cfg.t_frequencies);
  return out;
}

// Per-view feature maps, one [V, C_l, H_l, W_l] tensor per level.
template <class T>
struct FeaturePyramid {
  std::vector<ad::Var<T>> levels;
  std::size_t views() const { return levels.empty() ? 0 : levels[0].dim(0); }
};

template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParamStore<T>& store, const ModelConfig& cfg) : cfg_(cfg) {
    std::size_t in = cfg.image_channels;
    for (std::size_t s = 0; s < cfg.encoder_channels.size(); ++s) {
      const std::size_t c = cfg.encoder_channels[s];
      const std::string p = "encoder.stage" + std::to_string(s);
      Stage st;
      st.w_in = store.create(p + ".in.weight", {c, in, 3, 3}, InitScheme::HeUniform);
      st.b_in = store.create(p + ".in.bias", {c}, InitScheme::Zeros);
      st.w_a = store.create(p + ".res_a.weight", {c, c, 3, 3}, InitScheme::HeUniform);
      st.b_a = store.create(p + ".res_a.bias", {c}, InitScheme::Zeros);
      st.w_b = store.create(p + ".res_b.weight", {c, c, 3, 3}, InitScheme::Zeros);
      st.b_b = store.create(p + ".res_b.bias", {c}, InitScheme::Zeros);
      stages_.push_back(st);
      in = c;
    }
  }

  // images: [V, channels, H, W]; weights are shared across views.
  FeaturePyramid<T> forward(const ad::Var<T>& images) const {
    const auto& s = images.shape();
    if (s.size() != 4 || s[1] != cfg_.image_channels) {
      throw ShapeError("encoder: expected [views, " + std::to_string(cfg_.image_channels) + ", H, W], got " +
                       to_string(s));
    }
    const std::size_t div = std::size_t{1} << (stages_.size() - 1);
    if (s[2] % div || s[3] % div) {
      throw ShapeError("encoder: image dims " + to_string(s) + " not divisible by " + std::to_string(div));
    }
    FeaturePyramid<T> out;
    ad::Var<T> x = images;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const Stage& st = stages_[i];
      if (i > 0) x = ad::avg_pool2x2(x);
      x = ad::leaky_relu(ad::conv2d(x, st.w_in, st.b_in, 1, 1), T(0.2));
      auto r = ad::conv2d(ad::leaky_relu(ad::conv2d(x, st.w_a, st.b_a, 1, 1), T(0.2)), st.w_b, st.b_b, 1, 1);
      x = ad::add(x, r);
      out.levels.push_back(x);
    }
    return out;
  }

 private:
  struct Stage {
    ad::Var<T> w_in, b_in, w_a, b_a, w_b, b_b;
  };
  ModelConfig cfg_;
  std::vector<Stage> stages_;
};

// Continuous pixel coordinate at pyramid level `level` for a level-0 coordinate.
inline double level_coordinate(double c0, std::size_t level) {
  return (c0 + 0.5) / static_cast<double>(std::size_t{1} << level) - 0.5;
}

// Everything the generator needs from one set of conditioning views.
template <class T>
struct Conditioning {
  std::vector<ViewPose> poses;
  std::vector<ad::Var<T>> projected;  // per level [V, H_l, W_l, hidden]
  double time = 0;
};

template <class T>
class Generator {
 public:
  Generator() = default;
  Generator(ParamStore<T>& store, const ModelConfig& cfg) : cfg_(cfg) {
    const std::size_t h = cfg.hidden;
    coord_w_ = store.create("generator.coord.weight", {h, cfg.coord_dims()}, InitScheme::HeUniform);
    in_b_ = store.create("generator.in.bias", {h}, InitScheme::Zeros);
    for (std::size_t l = 0; l < cfg.encoder_channels.size(); ++l) {
      feat_w_.push_back(store.create("generator.feat" + std::to_string(l) + ".weight",
                                     {h, cfg.encoder_channels[l], 1, 1}, InitScheme::HeUniform));
    }
    auto block = [&](const std::string& name) {
      Block b;
      b.w0 = store.create(name + ".fc0.weight", {h, h}, InitScheme::HeUniform);
      b.b0 = store.create(name + ".fc0.bias", {h}, InitScheme::Zeros);
      b.w1 = store.create(name + ".fc1.weight", {h, h}, InitScheme::Zeros);
      b.b1 = store.create(name + ".fc1.bias", {h}, InitScheme::Zeros);
      return b;
    };
    for (std::size_t i = 0; i < cfg.view_blocks; ++i) view_blocks_.push_back(block("generator.view" + std::to_string(i)));
    for (std::size_t i = 0; i < cfg.joint_blocks; ++i) joint_blocks_.push_back(block("generator.joint" + std::to_string(i)));
    head_w_ = store.create("generator.head.weight", {2, h}, InitScheme::HeUniform);
    head_b_ = store.create("generator.head.bias", {2}, InitScheme::Constant, static_cast<T>(cfg.head_bias));
  }

  // Projects every pyramid level onto the first hidden layer. The first layer
  // is linear in the concatenated features and bilinear lookup is linear in
  // the map, so projecting before lookup gives the same result.
  Conditioning<T> condition(const FeaturePyramid<T>& pyramid, std::vector<ViewPose> poses, double t) const {
    if (pyramid.levels.size() != feat_w_.size()) throw ShapeError("generator: pyramid depth mismatch");
    if (poses.size() != pyramid.views()) throw ShapeError("generator: one pose per conditioning view required");
    Conditioning<T> c;
    c.poses = std::move(poses);
    c.time = t;
    for (std::size_t l = 0; l < feat_w_.size(); ++l) {
      c.projected.push_back(ad::to_channels_last(ad::conv2d(pyramid.levels[l], feat_w_[l], ad::Var<T>(), 1, 0)));
    }
    return c;
  }

  // Normalised (delta, beta) at each point: [P, 2].
  ad::Var<T> query(const Conditioning<T>& cond, std::span<const Vec3> points) const {
    if (cond.poses.empty()) throw Error("generator: empty conditioning view set");
    const std::size_t P = points.size();
    const std::size_t V = cond.poses.size();
    const ad::Var<T> coord = ad::linear(coordinates(points, cond.time), coord_w_, in_b_);
    std::vector<ad::Var<T>> per_view;
    per_view.reserve(V);
    std::vector<T> xy(2 * P);
    for (std::size_t v = 0; v < V; ++v) {
      ad::Var<T> h = coord;
      const ViewPose& pose = cond.poses[v];
      std::vector<double> col(P), row(P);
      for (std::size_t i = 0; i < P; ++i) {
        const CameraPoint cp = world_to_camera(points[i], pose);
        col[i] = pose.column_of(cp.u);
        row[i] = pose.row_of(cp.v);
      }
      for (std::size_t l = 0; l < cond.projected.size(); ++l) {
        for (std::size_t i = 0; i < P; ++i) {
          xy[2 * i] = static_cast<T>(level_coordinate(col[i], l));
          xy[2 * i + 1] = static_cast<T>(level_coordinate(row[i], l));
        }
        h = ad::add(h, ad::bilinear_sample(cond.projected[l], v, std::span<const T>(xy)));
      }
      per_view.push_back(h);
    }
    return trunk(per_view, P);
  }

  // Reference path: first layer applied to explicitly concatenated
  // [features | coordinates]. features: [V * P, feature_dims], view-major.
  ad::Var<T> query_from_features(const ad::Var<T>& features, std::size_t views, std::span<const Vec3> points,
                                 double t) const {
    const std::size_t P = points.size();
    if (views == 0) throw Error("generator: empty conditioning view set");
    std::vector<ad::Var<T>> parts;
    for (std::size_t l = 0; l < feat_w_.size(); ++l) {
      const auto& w = feat_w_[l];
      parts.push_back(ad::reshape(w, {w.dim(0), w.dim(1)}));
    }
    parts.push_back(coord_w_);
    const ad::Var<T> w_full = ad::concat(parts, 1);
    const ad::Var<T> coord = coordinates(points, t);
    std::vector<ad::Var<T>> rows;
    for (std::size_t v = 0; v < views; ++v) rows.push_back(coord);
    const ad::Var<T> x = ad::concat(std::vector<ad::Var<T>>{features, ad::concat(rows, 0)}, 1);
    const ad::Var<T> h = ad::linear(x, w_full, in_b_);
    std::vector<ad::Var<T>> per_view;
    for (std::size_t v = 0; v < views; ++v) {
      per_view.push_back(slice_rows(h, v * P, P));
    }
    return trunk(per_view, P);
  }

  const ModelConfig& config() const { return cfg_; }

 private:
  struct Block {
    ad::Var<T> w0, b0, w1, b1;
  };

  static ad::Var<T> residual(const Block& b, const ad::Var<T>& x) {
    return ad::residual_block(x, b.w0, b.b0, b.w1, b.b1);
  }

  ad::Var<T> trunk(const std::vector<ad::Var<T>>& per_view, std::size_t P) const {
    const std::size_t V = per_view.size();
    ad::Var<T> x = V == 1 ? per_view[0] : ad::concat(per_view, 0);
    for (const auto& b : view_blocks_) x = residual(b, x);
    x = ad::mean_over_views(ad::reshape(x, {V, P, cfg_.hidden}));
    for (const auto& b : joint_blocks_) x = residual(b, x);
    return ad::softplus(ad::linear(ad::relu(x), head_w_, head_b_));
  }

  ad::Var<T> coordinates(std::span<const Vec3> points, double t) const {
    const std::size_t D = cfg_.coord_dims();
    Tensor<T> enc(Shape{points.size(), D});
    for (std::size_t i = 0; i < points.size(); ++i) {
      const auto e = encode_coordinates(cfg_, points[i], t);
      for (std::size_t d = 0; d < D; ++d) enc[i * D + d] = static_cast<T>(e[d]);
    }
    return ad::Var<T>::constant(std::move(enc));
  }

  static ad::Var<T> slice_rows(const ad::Var<T>& x, std::size_t start, std::size_t count) {
    // Implemented as a reshape-free gather through concat's inverse.
    const std::size_t cols = x.dim(1);
    Tensor<T> out(Shape{count, cols});
    std::copy_n(x.value().data() + start * cols, count * cols, out.data());
    return ad::detail::make_op<T>(std::move(out), {&x}, [start, cols](ad::Node<T>& self) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * cols + i] += self.grad[i];
    });
  }

  ModelConfig cfg_;
  ad::Var<T> coord_w_, in_b_, head_w_, head_b_;
  std::vector<ad::Var<T>> feat_w_;
  std::vector<Block> view_blocks_, joint_blocks_;
};

// Raw pixel-aligned features for each view at each point, levels
// concatenated: [V * P, feature_dims], view-major.
template <class T>
ad::Var<T> pixel_features(const FeaturePyramid<T>& pyramid, std::span<const Vec3> points,
                          const std::vector<ViewPose>& poses) {
  if (poses.size() != pyramid.views()) throw ShapeError("pixel_features: one pose per view required");
  std::vector<ad::Var<T>> levels_cl;
  for (const auto& l : pyramid.levels) levels_cl.push_back(ad::to_channels_last(l));
  std::vector<ad::Var<T>> rows;
  std::vector<T> xy(2 * points.size());
  for (std::size_t v = 0; v < poses.size(); ++v) {
    std::vector<ad::Var<T>> per_level;
    for (std::size_t l = 0; l < levels_cl.size(); ++l) {
      for (std::size_t i = 0; i < points.size(); ++i) {
        const CameraPoint cp = world_to_camera(points[i], poses[v]);
        xy[2 * i] = static_cast<T>(level_coordinate(poses[v].column_of(cp.u), l));
        xy[2 * i + 1] = static_cast<T>(level_coordinate(poses[v].row_of(cp.v), l));
      }
      per_level.push_back(ad::bilinear_sample(levels_cl[l], v, std::span<const T>(xy)));
    }
    rows.push_back(ad::concat(per_level, 1));
  }
  return ad::concat(rows, 0);
}

template <class T>
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(ParamStore<T>& store, const ModelConfig& cfg) : cfg_(cfg) {
    const std::size_t c = cfg.disc_channels;
    w0_ = store.create("discriminator.conv0.weight", {c, cfg.image_channels, 4, 4}, InitScheme::HeUniform);
    b0_ = store.create("discriminator.conv0.bias", {c}, InitScheme::Zeros);
    w1_ = store.create("discriminator.conv1.weight", {2 * c, c, 4, 4}, InitScheme::HeUniform);
    b1_ = store.create("discriminator.conv1.bias", {2 * c}, InitScheme::Zeros);
    w2_ = store.create("discriminator.out.weight", {1, 2 * c, 3, 3}, InitScheme::HeUniform);
    b2_ = store.create("discriminator.out.bias", {1}, InitScheme::Zeros);
  }

  static constexpr std::size_t total_stride = 4;

  // patches: [B, channels, K, K] -> logits [B, 1, K/4, K/4]
  ad::Var<T> logits(const ad::Var<T>& patches) const {
    const auto& s = patches.shape();
    if (s.size() != 4 || s[1] != cfg_.image_channels || s[2] != cfg_.patch || s[3] != cfg_.patch) {
      throw ShapeError("discriminator: expected [B, " + std::to_string(cfg_.image_channels) + ", " +
                       std::to_string(cfg_.patch) + ", " + std::to_string(cfg_.patch) + "], got " + to_string(s));
    }
    auto x = ad::leaky_relu(ad::conv2d(patches, w0_, b0_, 2, 1), T(0.2));
    x = ad::leaky_relu(ad::conv2d(x, w1_, b1_, 2, 1), T(0.2));
    return ad::conv2d(x, w2_, b2_, 1, 1);
  }

  ad::Var<T> scores(const ad::Var<T>& patches) const { return ad::sigmoid(logits(patches)); }

 private:
  ModelConfig cfg_;
  ad::Var<T> w0_, b0_, w1_, b1_, w2_, b2_;
};

template <class T>
class OnixModel {
 public:
  OnixModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), params_(seed) {
    cfg.validate();
    encoder_ = Encoder<T>(params_, cfg);
    generator_ = Generator<T>(params_, cfg);
    discriminator_ = Discriminator<T>(params_, cfg);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const Encoder<T>& encoder() const { return encoder_; }
  const Generator<T>& generator() const { return generator_; }
  const Discriminator<T>& discriminator() const { return discriminator_; }

  FeaturePyramid<T> encode(const ad::Var<T>& images) const { return encoder_.forward(images); }

  Conditioning<T> condition(const ad::Var<T>& images, std::vector<ViewPose> poses, double t) const {
    return generator_.condition(encoder_.forward(images), std::move(poses), t);
  }

  ad::Var<T> query(const Conditioning<T>& cond, std::span<const Vec3> points) const {
    return generator_.query(cond, points);
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  Encoder<T> encoder_;
  Generator<T> generator_;
  Discriminator<T> discriminator_;
};

}  // namespace onix
