#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qpat/grid.hpp"

namespace qpat {

/// Optical coefficients in 1/mm.
struct OpticalProperties {
  double mu_a = 0.0;
  double mu_s = 0.0;
  double g = 0.0;
  double n = 1.0;

  double mu_s_prime() const { return mu_s * (1.0 - g); }
  void validate() const;

  static OpticalProperties from_reduced(double mu_a, double mu_s_prime, double g, double n) {
    return {mu_a, mu_s_prime / (1.0 - g), g, n};
  }
};

/// sound_speed in mm/us, density in kg/m^3.
struct AcousticProperties {
  double sound_speed = 1.497;
  double density = 1000.0;
  double gruneisen = 1.0;

  void validate() const;
};

struct SpectrumSample {
  double wavelength_nm = 0.0;
  OpticalProperties optical;
};

struct MaterialSpectrum {
  std::string name;
  std::vector<SpectrumSample> samples;
  AcousticProperties acoustic;

  void validate() const;
  double min_wavelength() const { return samples.front().wavelength_nm; }
  double max_wavelength() const { return samples.back().wavelength_nm; }

  /// Linear interpolation between the bracketing samples.
  OpticalProperties at(double wavelength_nm) const;

  /// Same properties at every 10 nm step of [lo, hi].
  static MaterialSpectrum flat(std::string name, const OpticalProperties& props, double lo_nm = 700.0,
                               double hi_nm = 900.0, double step_nm = 10.0);
};

enum class ShapeKind { cylinder, sphere };

struct ShapePrimitive {
  ShapeKind kind = ShapeKind::cylinder;
  Vec3 center{};
  double radius = 1.0;
  Vec3 axis{0.0, 0.0, 1.0};
  double half_length = 1.0;

  bool contains(const Vec3& p) const;
  void validate() const;
  static ShapePrimitive cylinder(Vec3 center, double radius, double half_length, Vec3 axis = {0, 0, 1});
  static ShapePrimitive sphere(Vec3 center, double radius);
};

struct Inclusion {
  ShapePrimitive shape;
  std::string material;
};

struct PhantomSpec {
  ShapePrimitive background_shape = ShapePrimitive::cylinder({}, 13.75, 40.0);
  std::string background_material = "background";
  std::vector<Inclusion> inclusions;
  std::string couplant_material = "water";
  std::vector<MaterialSpectrum> materials;
  std::optional<std::uint64_t> seed;

  const MaterialSpectrum& material(const std::string& name) const;
  /// Throws ConfigError on unresolved names or misplaced inclusions.
  void validate() const;
};

/// Per-voxel region index: 0 couplant, 1 background, 2 + k for inclusion k.
/// `materials[label]` names the material of each region.
struct LabelMap {
  Volume<std::uint8_t> labels;
  std::vector<std::string> materials;

  static constexpr std::uint8_t couplant = 0;
  static constexpr std::uint8_t background = 1;
  static constexpr std::uint8_t inclusion(std::size_t k) { return static_cast<std::uint8_t>(2 + k); }
};

/// The last inclusion containing a voxel center wins; else background if
/// inside the background shape; else couplant.
LabelMap rasterize(const PhantomSpec& spec, const VoxelGrid& grid);

namespace serial {
LabelMap rasterize(const PhantomSpec& spec, const VoxelGrid& grid);
}

/// Same labelling rule on a 2D pixel grid lying in the plane z = z_mm.
Image2D<std::uint8_t> rasterize_plane(const PhantomSpec& spec, const PlaneGrid& plane, double z_mm);

struct PropertyVolumes {
  Volume<float> mu_a, mu_s, g, n;
  Volume<float> sound_speed, density, gruneisen;
};

PropertyVolumes assign_properties(const LabelMap& labels, const std::vector<MaterialSpectrum>& materials,
                                  double wavelength_nm);

/// Sampling ranges. Optical ranges are in 1/cm at the 800 nm reference, as
/// phantom recipes are usually quoted.
struct PropertyRanges {
  double mu_a_min_per_cm = 0.05;
  double mu_a_max_per_cm = 4.0;
  double mus_prime_min_per_cm = 5.0;
  double mus_prime_max_per_cm = 15.0;
  double background_radius_mm = 13.75;
  double half_length_mm = 40.0;
  int min_inclusions = 0;
  int max_inclusions = 3;
  double inclusion_radius_min_mm = 1.5;
  double inclusion_radius_max_mm = 5.0;
  double placement_margin_mm = 0.5;
  double g = 0.7;
  double n = 1.4;

  void validate() const;
};

/// Draws a random phantom. `water` supplies the couplant spectrum.
PhantomSpec sample_phantom(std::uint64_t seed, const PropertyRanges& ranges, const MaterialSpectrum& water);

// Reference spectra --------------------------------------------------------

std::filesystem::path default_data_dir();

/// Two-column CSV (wavelength_nm, value). Lines starting with '#' are comments.
std::vector<std::pair<double, double>> read_spectrum_csv(const std::filesystem::path& path);

/// Water couplant: mu_a from the shipped absorption table (converted from
/// 1/cm to 1/mm), mu_s = 0, n = 1.33, Grueneisen 1.
MaterialSpectrum water_spectrum(const std::filesystem::path& csv);
MaterialSpectrum water_spectrum();

// Serialization ------------------------------------------------------------

nlohmann::json to_json(const PhantomSpec& spec);
PhantomSpec phantom_from_json(const nlohmann::json& j);
PhantomSpec load_phantom(const std::filesystem::path& path);
void save_phantom(const std::filesystem::path& path, const PhantomSpec& spec);

} // namespace qpat
