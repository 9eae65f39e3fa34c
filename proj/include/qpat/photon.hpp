#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "qpat/grid.hpp"
#include "qpat/phantom.hpp"
#include "qpat/rng.hpp"

namespace qpat {

struct HgDeflection {
  double cos_theta;
  double azimuth;
};

/// cos(theta) from the Henyey-Greenstein inverse CDF for a uniform xi in [0,1).
double hg_inverse_cdf(double g, double xi);

HgDeflection scatter_hg(double g, RngStream& rng);

/// Rotates unit direction `d` by a deflection (polar cos_theta, azimuth).
Vec3 deflect(const Vec3& d, double cos_theta, double azimuth);

/// Collimated beam; with spot_radius > 0 the launch point is uniform on a
/// disc perpendicular to `direction`.
struct PencilBeam {
  Vec3 position{};
  Vec3 direction{0.0, 0.0, 1.0};
  double spot_radius = 0.0;
};

/// Ring of fibre-bundle pairs around the phantom axis (z). Each pair sits at
/// an azimuth on a ring of `ring_radius` in the plane z = ring_z; its two
/// members are offset by +/- axial_offset along z and aim at `target_point`.
struct IlluminationGeometry {
  int bundle_pairs = 5;
  double ring_radius = 22.0;
  double axial_offset = 3.0;
  double beam_divergence_half_angle_deg = 15.0;
  double spot_radius = 1.0;
  Vec3 target_point{};
  double ring_z = 0.0;
  double first_azimuth_deg = 90.0;

  void validate(double phantom_radius) const;
};

using LightSource = std::variant<PencilBeam, IlluminationGeometry>;

struct PhotonLaunch {
  Vec3 position;
  Vec3 direction;
};

PhotonLaunch launch_photon(const LightSource& source, RngStream& rng);

/// Optical coefficients per voxel, sharing one grid. Units 1/mm.
struct OpticalMedium {
  VoxelGrid grid;
  std::vector<float> mu_a, mu_s, g;

  static OpticalMedium from_properties(const PropertyVolumes& props);
  static OpticalMedium homogeneous(const VoxelGrid& grid, double mu_a, double mu_s, double g);
  void validate() const;
};

struct TransportConfig {
  std::uint64_t n_photons = 1'000'000;
  std::uint64_t seed = 42;
  double roulette_threshold = 1e-4;
  double roulette_survival = 0.1;
  /// 0 = let OpenMP decide.
  int threads = 0;
};

/// Raw integer tallies. Deposits are accumulated in fixed point so the sum
/// does not depend on the order in which photons are merged.
struct TransportTallies {
  double scale = 1.0;  ///< fixed-point units per unit weight
  std::vector<std::int64_t> absorbed;
  std::vector<std::int64_t> track;  ///< weight*length in voxels with mu_a = 0
  std::int64_t escaped = 0;
  std::int64_t roulette_killed = 0;
  std::int64_t roulette_created = 0;
  std::uint64_t launched = 0;

  bool operator==(const TransportTallies&) const = default;
};

struct EnergyBalance {
  double launched = 0.0;
  double absorbed = 0.0;
  double escaped = 0.0;
  double roulette_net = 0.0;

  /// |launched - (absorbed + escaped)| / launched
  double relative_defect() const { return std::abs(launched - (absorbed + escaped)) / launched; }
};

/// Fluence per unit delivered energy, 1/mm^2.
struct FluenceVolume {
  VoxelGrid grid;
  std::vector<double> phi;
  EnergyBalance balance;
  TransportTallies tallies;
};

/// Initial pressure, arbitrary units proportional to absorbed energy density.
struct PressureField {
  VoxelGrid grid;
  std::vector<double> p0;
};

FluenceVolume simulate_fluence(const OpticalMedium& medium, const LightSource& source,
                               const TransportConfig& config);

namespace serial {
FluenceVolume simulate_fluence(const OpticalMedium& medium, const LightSource& source,
                               const TransportConfig& config);
}

/// p0 = Gamma * mu_a * phi, voxelwise.
PressureField compute_p0(const Volume<float>& mu_a, const FluenceVolume& phi, const Volume<float>& gruneisen);

/// The imaging plane: z-slice at index nz/2.
template <class T>
Image2D<T> central_slice(const VoxelGrid& grid, const std::vector<T>& values) {
  if (values.size() != grid.size()) throw DimensionError("central_slice: value count does not match grid");
  const std::size_t k = grid.dims[2] / 2;
  const std::size_t n = grid.dims[0] * grid.dims[1];
  Image2D<T> out(PlaneGrid{grid.dims[0], grid.dims[1], grid.spacing.x, grid.spacing.y, grid.origin.x, grid.origin.y});
  std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(k * n), n, out.data.begin());
  return out;
}

} // namespace qpat
