#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "onix4d/geometry.hpp"

namespace onix {

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> px;  // row-major, row 0 first

  Image() = default;
  Image(std::size_t w, std::size_t h, float fill = 0.0f) : width(w), height(h), px(w * h, fill) {}

  float& at(std::size_t col, std::size_t row) { return px[row * width + col]; }
  float at(std::size_t col, std::size_t row) const { return px[row * width + col]; }
  bool same_dims(const Image& o) const { return width == o.width && height == o.height; }
};

// Cell-centred samples over the world box [-1, 1]^3. x is the fastest axis.
struct Volume {
  std::size_t nx = 0, ny = 0, nz = 0;
  std::vector<float> data;

  Volume() = default;
  Volume(std::size_t x, std::size_t y, std::size_t z, float fill = 0.0f)
      : nx(x), ny(y), nz(z), data(x * y * z, fill) {}

  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return (k * ny + j) * nx + i; }
  float& at(std::size_t i, std::size_t j, std::size_t k) { return data[index(i, j, k)]; }
  float at(std::size_t i, std::size_t j, std::size_t k) const { return data[index(i, j, k)]; }
  bool same_dims(const Volume& o) const { return nx == o.nx && ny == o.ny && nz == o.nz; }

  Vec3 cell_center(std::size_t i, std::size_t j, std::size_t k, const Box& b = {}) const {
    return {b.lo.x + (static_cast<double>(i) + 0.5) * (b.hi.x - b.lo.x) / static_cast<double>(nx),
            b.lo.y + (static_cast<double>(j) + 0.5) * (b.hi.y - b.lo.y) / static_cast<double>(ny),
            b.lo.z + (static_cast<double>(k) + 0.5) * (b.hi.z - b.lo.z) / static_cast<double>(nz)};
  }

  double voxel_volume(const Box& b = {}) const {
    return (b.hi.x - b.lo.x) * (b.hi.y - b.lo.y) * (b.hi.z - b.lo.z) /
           static_cast<double>(nx * ny * nz);
  }
};

// Samples a scalar field at every cell centre.
template <class ScalarFn>
Volume voxelize(ScalarFn&& field, std::size_t nx, std::size_t ny, std::size_t nz, const Box& bounds = {}) {
  if (nx < 2 || ny < 2 || nz < 2) throw Error("voxelize: grid dimensions must be >= 2");
  if (bounds.degenerate()) throw Error("voxelize: degenerate bounds");
  Volume vol(nx, ny, nz);
  for (std::size_t k = 0; k < nz; ++k)
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i)
        vol.at(i, j, k) = static_cast<float>(field(vol.cell_center(i, j, k, bounds)));
  return vol;
}

template <class ScalarFn>
Volume voxelize(ScalarFn&& field, std::size_t n, const Box& bounds = {}) {
  return voxelize(std::forward<ScalarFn>(field), n, n, n, bounds);
}

// Sum along z (top view) or x (side view), scaled by the voxel edge length.
inline Image project_volume_z(const Volume& v) {
  Image img(v.nx, v.ny);
  const double dz = 2.0 / static_cast<double>(v.nz);
  for (std::size_t j = 0; j < v.ny; ++j)
    for (std::size_t i = 0; i < v.nx; ++i) {
      double acc = 0;
      for (std::size_t k = 0; k < v.nz; ++k) acc += v.at(i, j, k);
      img.at(i, j) = static_cast<float>(acc * dz);
    }
  return img;
}

inline Image project_volume_x(const Volume& v) {
  Image img(v.ny, v.nz);
  const double dx = 2.0 / static_cast<double>(v.nx);
  for (std::size_t k = 0; k < v.nz; ++k)
    for (std::size_t j = 0; j < v.ny; ++j) {
      double acc = 0;
      for (std::size_t i = 0; i < v.nx; ++i) acc += v.at(i, j, k);
      img.at(j, k) = static_cast<float>(acc * dx);
    }
  return img;
}

}  // namespace onix
