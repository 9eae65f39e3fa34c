#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "qpat/grid.hpp"

namespace qpat {

/// signal = slope * mu_a + intercept, mu_a in 1/cm.
struct LinearMap {
  double slope = 1.0;
  double intercept = 0.0;
  double fit_r = 0.0;

  void validate() const;
  double invert(double signal) const { return (signal - intercept) / slope; }

  static LinearMap paper_calibration() { return {1485.0, 313.0, 0.94}; }
  static LinearMap paper_fluence_corrected() { return {8801.0, 832.0, 0.93}; }
};

/// One training image: signal, region labels on the same grid (1 =
/// background, see LabelMap), and the reference mu_a [1/cm] per label.
/// `rank_by`, when set, picks the brightest pixels in place of `signal`
/// (the fluence-corrected fit ranks on the raw image so it keeps the rim).
struct CalibrationSample {
  Image2D<double> signal;
  Image2D<std::uint8_t> labels;
  std::vector<double> reference_mu_a;
  Image2D<double> rank_by{};
};

/// The `fraction` brightest background pixels of one sample, as
/// (signal, reference mu_a) pairs.
std::vector<std::pair<double, double>> brightest_background(const CalibrationSample& sample, double fraction = 0.02);

/// OLS of signal on reference mu_a over brightest background pixels pooled
/// across all samples. Throws NumericalError if the reference has no spread.
LinearMap fit_linear_calibration(std::span<const CalibrationSample> samples, double fraction = 0.02);

/// mu_a = max(0, (signal - intercept) / slope).
Image2D<double> apply_calibration(const Image2D<double>& signal, const LinearMap& map);

/// signal / phi; NaN where phi is at or below `floor_fraction * max(phi)`.
Image2D<double> fluence_normalize(const Image2D<double>& signal, const Image2D<double>& phi,
                                  double floor_fraction = 1e-6);

struct FluenceCorrected {
  Image2D<double> mu_a;
  Image2D<std::uint8_t> valid;
};

/// mu_a = max(0, (signal/phi - intercept) / slope). Pixels with phi under
/// floor_fraction * max(phi) are invalid and set to 0. Throws DomainError
/// when phi is zero everywhere.
FluenceCorrected fluence_correct(const Image2D<double>& signal, const Image2D<double>& phi, const LinearMap& map_phi,
                                 double floor_fraction = 1e-6);

enum class RegionKind { background, inclusion };

struct RegionSpec {
  Image2D<std::uint8_t> mask;
  RegionKind kind = RegionKind::background;
  double depth_threshold_mm = 1.28;
};

/// Exact Euclidean distance (mm) from each pixel center to the nearest pixel
/// center where mask == 0; +inf if there is none.
Image2D<double> distance_to_outside(const Image2D<std::uint8_t>& mask);

/// Depth of each in-mask pixel below the region boundary: distance to the
/// nearest outside pixel center minus half a pixel.
Image2D<double> inward_depth(const Image2D<std::uint8_t>& mask);

/// Background: mean over the mask. Inclusion: median over mask pixels whose
/// inward depth <= depth_threshold_mm. Non-finite pixels (invalid estimates)
/// are skipped. Throws DomainError if nothing is left.
double aggregate_region(const Image2D<double>& image, const RegionSpec& region);

struct ChromophoreBasis {
  std::vector<double> wavelengths;
  std::vector<double> eps_hbo2;
  std::vector<double> eps_hb;

  void validate() const;
  /// Rows restricted to the given wavelengths (must be present).
  ChromophoreBasis select(std::span<const double> wavelengths_nm) const;
};

/// CSV columns: wavelength_nm, eps_hbo2, eps_hb.
ChromophoreBasis load_hemoglobin_basis(const std::filesystem::path& csv);
ChromophoreBasis load_hemoglobin_basis();

struct So2Image {
  Image2D<double> so2;  ///< NaN where invalid
  Image2D<std::uint8_t> valid;
};

/// Per-pixel OLS on the two-column basis, negative concentrations clamped to
/// zero, sO2 = c_hbo2 / (c_hbo2 + c_hb).
So2Image linear_unmix_so2(std::span<const Image2D<double>> mu_a, const ChromophoreBasis& basis);

/// Single-pixel form of the above; returns NaN when both concentrations clamp.
double unmix_so2(std::span<const double> mu_a, const ChromophoreBasis& basis);

} // namespace qpat
