#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <vector>

#include "qpat/grid.hpp"

namespace qpat {

/// Point elements evenly spaced on a circular arc. Element i sits at angle
/// arc_center + (i - (n-1)/2) * span/n, so the angular pitch is span/n and a
/// 360 degree span closes into a full ring.
struct DetectorArray {
  std::size_t n_elements = 256;
  double arc_span_deg = 270.0;
  double radius = 40.5;
  double center_x = 0.0;
  double center_y = 0.0;
  double arc_center_deg = -90.0;

  void validate() const;
  double angular_pitch_deg() const { return arc_span_deg / static_cast<double>(n_elements); }
  double element_angle_deg(std::size_t i) const;
  std::vector<std::array<double, 2>> element_positions() const;
};

/// Pressure recordings, row-major (element, sample). Times in microseconds.
template <class T>
struct BasicTimeSeries {
  std::size_t n_elements = 0;
  std::size_t n_samples = 0;
  double dt = 0.025;
  double t0 = 0.0;
  std::vector<std::array<double, 2>> positions;  ///< mm
  std::array<double, 2> array_center{0.0, 0.0};   ///< mm; used to place virtual elements
  std::vector<T> data;

  T* channel(std::size_t e) { return data.data() + e * n_samples; }
  const T* channel(std::size_t e) const { return data.data() + e * n_samples; }
  T& at(std::size_t e, std::size_t s) { return data[e * n_samples + s]; }
  const T& at(std::size_t e, std::size_t s) const { return data[e * n_samples + s]; }

  void validate() const;
};

using TimeSeries = BasicTimeSeries<double>;
using ComplexTimeSeries = BasicTimeSeries<std::complex<double>>;

template <class T>
void BasicTimeSeries<T>::validate() const {
  if (n_samples < 2) throw DimensionError("time series needs at least two samples");
  if (data.size() != n_elements * n_samples) throw DimensionError("time series data size mismatch");
  if (positions.size() != n_elements) throw DimensionError("time series element geometry mismatch");
  if (!(dt > 0.0)) throw ConfigError("time series dt must be positive");
}

/// Sound speed in mm/us and density in kg/m^3 on a 2D grid.
struct Medium2D {
  PlaneGrid grid;
  std::vector<double> sound_speed;
  std::vector<double> density;

  void validate() const;
  double max_sound_speed() const;
  static Medium2D homogeneous(const PlaneGrid& grid, double c = 1.497, double rho = 1000.0);
};

struct AcousticConfig {
  double dt = 0.025;            ///< us
  std::size_t n_steps = 2560;   ///< samples recorded, starting at t = 0
  double c_ref = 1.497;         ///< mm/us, for the k-space correction
  std::size_t pml_size = 20;    ///< pixels on every side, inside the grid
  double pml_alpha = 2.0;       ///< nepers per pixel at the outer edge
  double max_cfl = 0.3;
};

/// Smallest grid able to hold the detector ring, `margin` mm of clearance and
/// the PML, with FFT-friendly dimensions.
PlaneGrid acoustic_grid_for(const DetectorArray& detectors, double dx, std::size_t pml_size,
                            double margin_mm = 2.0);

/// Next size >= n whose prime factors are all in {2, 3, 5, 7}.
std::size_t fft_friendly_size(std::size_t n);

/// k-space pseudospectral solution of the first-order linear acoustic
/// equations on a staggered grid. `p0` must share the medium grid.
TimeSeries simulate_forward(const Image2D<double>& p0, const Medium2D& medium, const DetectorArray& detectors,
                            const AcousticConfig& config);

/// Adds i.i.d. N(0, sigma^2) to every sample.
TimeSeries add_noise(const TimeSeries& ts, double sigma, std::uint64_t seed);

} // namespace qpat
