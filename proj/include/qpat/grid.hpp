#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "qpat/error.hpp"

namespace qpat {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const { return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x}; }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    const double n = norm();
    return {x / n, y / n, z / n};
  }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
};

/// Regular 3D grid. `origin` is the outer corner of voxel (0,0,0); voxel
/// centers sit at origin + (i + 0.5) * spacing. Storage is C order with x
/// fastest and z slowest.
struct VoxelGrid {
  std::array<std::size_t, 3> dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{};

  std::size_t size() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return (k * dims[1] + j) * dims[0] + i;
  }
  Vec3 center(std::size_t i, std::size_t j, std::size_t k) const {
    return {origin.x + (static_cast<double>(i) + 0.5) * spacing.x,
            origin.y + (static_cast<double>(j) + 0.5) * spacing.y,
            origin.z + (static_cast<double>(k) + 0.5) * spacing.z};
  }
  Vec3 extent() const {
    return {static_cast<double>(dims[0]) * spacing.x, static_cast<double>(dims[1]) * spacing.y,
            static_cast<double>(dims[2]) * spacing.z};
  }
  double voxel_volume() const { return spacing.x * spacing.y * spacing.z; }

  void validate() const {
    for (auto d : dims)
      if (d < 1) throw ConfigError("voxel grid: every dimension must be >= 1");
    if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0))
      throw ConfigError("voxel grid: spacing must be positive");
  }

  bool operator==(const VoxelGrid& o) const {
    return dims == o.dims && spacing.x == o.spacing.x && spacing.y == o.spacing.y &&
           spacing.z == o.spacing.z && origin.x == o.origin.x && origin.y == o.origin.y &&
           origin.z == o.origin.z;
  }

  /// Cube of n^3 voxels centered on the coordinate origin.
  static VoxelGrid centered_cube(std::size_t n, double spacing) {
    const double half = 0.5 * static_cast<double>(n) * spacing;
    return VoxelGrid{{n, n, n}, {spacing, spacing, spacing}, {-half, -half, -half}};
  }
};

template <class T>
struct Volume {
  VoxelGrid grid;
  std::vector<T> data;

  Volume() = default;
  explicit Volume(const VoxelGrid& g, T fill = T{}) : grid(g), data(g.size(), fill) {}

  T& at(std::size_t i, std::size_t j, std::size_t k) { return data[grid.index(i, j, k)]; }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const { return data[grid.index(i, j, k)]; }
};

/// Regular 2D grid; `origin` is the outer corner of pixel (0,0). Row-major,
/// x fastest.
struct PlaneGrid {
  std::size_t nx = 1, ny = 1;
  double dx = 1.0, dy = 1.0;
  double x0 = 0.0, y0 = 0.0;

  std::size_t size() const { return nx * ny; }
  std::size_t index(std::size_t i, std::size_t j) const { return j * nx + i; }
  double x(std::size_t i) const { return x0 + (static_cast<double>(i) + 0.5) * dx; }
  double y(std::size_t j) const { return y0 + (static_cast<double>(j) + 0.5) * dy; }

  bool operator==(const PlaneGrid& o) const {
    return nx == o.nx && ny == o.ny && dx == o.dx && dy == o.dy && x0 == o.x0 && y0 == o.y0;
  }

  static PlaneGrid centered(std::size_t nx, std::size_t ny, double pitch) {
    return {nx, ny, pitch, pitch, -0.5 * static_cast<double>(nx) * pitch,
            -0.5 * static_cast<double>(ny) * pitch};
  }
};

template <class T>
struct Image2D {
  PlaneGrid grid;
  std::vector<T> data;

  Image2D() = default;
  explicit Image2D(const PlaneGrid& g, T fill = T{}) : grid(g), data(g.size(), fill) {}

  T& at(std::size_t i, std::size_t j) { return data[grid.index(i, j)]; }
  const T& at(std::size_t i, std::size_t j) const { return data[grid.index(i, j)]; }
};

/// The z-slice of a volume at index k, as an image sharing the in-plane grid.
template <class T>
Image2D<T> slice_z(const Volume<T>& v, std::size_t k) {
  const auto& g = v.grid;
  if (k >= g.dims[2]) throw DimensionError("slice_z: slice index out of range");
  PlaneGrid pg{g.dims[0], g.dims[1], g.spacing.x, g.spacing.y, g.origin.x, g.origin.y};
  Image2D<T> out(pg);
  const std::size_t n = g.dims[0] * g.dims[1];
  std::copy(v.data.begin() + static_cast<std::ptrdiff_t>(k * n),
            v.data.begin() + static_cast<std::ptrdiff_t>((k + 1) * n), out.data.begin());
  return out;
}

/// Bilinear sample at physical (x, y); zero outside the outermost pixel centers.
template <class T>
double sample_bilinear(const Image2D<T>& img, double x, double y) {
  const auto& g = img.grid;
  const double fx = (x - g.x0) / g.dx - 0.5;
  const double fy = (y - g.y0) / g.dy - 0.5;
  if (fx < 0.0 || fy < 0.0 || fx > static_cast<double>(g.nx - 1) || fy > static_cast<double>(g.ny - 1))
    return 0.0;
  const auto i0 = static_cast<std::size_t>(fx);
  const auto j0 = static_cast<std::size_t>(fy);
  const std::size_t i1 = std::min(i0 + 1, g.nx - 1);
  const std::size_t j1 = std::min(j0 + 1, g.ny - 1);
  const double tx = fx - static_cast<double>(i0);
  const double ty = fy - static_cast<double>(j0);
  const double a = static_cast<double>(img.at(i0, j0)) * (1 - tx) + static_cast<double>(img.at(i1, j0)) * tx;
  const double b = static_cast<double>(img.at(i0, j1)) * (1 - tx) + static_cast<double>(img.at(i1, j1)) * tx;
  return a * (1 - ty) + b * ty;
}

/// Resamples `src` onto `target` by bilinear interpolation.
template <class T>
Image2D<double> resample(const Image2D<T>& src, const PlaneGrid& target) {
  Image2D<double> out(target);
  for (std::size_t j = 0; j < target.ny; ++j)
    for (std::size_t i = 0; i < target.nx; ++i)
      out.at(i, j) = sample_bilinear(src, target.x(i), target.y(j));
  return out;
}

} // namespace qpat
