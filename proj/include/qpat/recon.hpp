#pragma once

#include <array>
#include <complex>
#include <vector>

#include "qpat/acoustics.hpp"
#include "qpat/grid.hpp"

namespace qpat {

/// Second-order IIR section: b0 b1 b2 / 1 a1 a2.
struct Biquad {
  double b0, b1, b2, a1, a2;
};

/// Cascade of a Butterworth high-pass (lo) and low-pass (hi), each of
/// `order`, designed by the bilinear transform with frequency prewarping.
/// Frequencies in Hz, sampling rate in Hz.
std::vector<Biquad> design_butterworth_bandpass(double lo_hz, double hi_hz, double fs_hz, int order = 3);

/// |H(e^{i w})| of a biquad cascade at frequency f.
double cascade_magnitude(const std::vector<Biquad>& sections, double f_hz, double fs_hz);

/// Zero-phase forward-backward filtering of one channel with odd-extension
/// padding and steady-state initial conditions.
std::vector<double> filtfilt(const std::vector<Biquad>& sections, const std::vector<double>& x);

/// Zero-phase band-pass per channel. Throws ConfigError if hi >= Nyquist.
TimeSeries bandpass_filter(const TimeSeries& ts, double lo_hz = 5e3, double hi_hz = 7e6, int order = 3);

/// Analytic signal per channel: negative frequencies zeroed, positive doubled.
ComplexTimeSeries hilbert_analytic(const TimeSeries& ts);

/// Fourier interpolation along time by `time_factor`; linear interpolation of
/// waveforms between adjacent elements, inserting `element_factor - 1`
/// virtual elements at equal angular steps between neighbours.
TimeSeries interpolate(const TimeSeries& ts, int time_factor, int element_factor);
ComplexTimeSeries interpolate(const ComplexTimeSeries& ts, int time_factor, int element_factor);

struct ReconGeometry {
  std::size_t n_pixels = 300;
  double fov_mm = 32.0;
  double center_x = 0.0;
  double center_y = 0.0;
  double sound_speed = 1.497;
  std::size_t crop_to = 288;

  PlaneGrid plane() const {
    auto g = PlaneGrid::centered(n_pixels, n_pixels, fov_mm / static_cast<double>(n_pixels));
    g.x0 += center_x;
    g.y0 += center_y;
    return g;
  }
};

/// Envelope image. `fov_mm` and `pixel_pitch_mm` describe the stored pixels.
struct ReconImage {
  Image2D<double> pixels;
  double fov_mm = 0.0;
  double pixel_pitch_mm = 0.0;
};

/// Delay-and-sum of a complex time series, magnitude after summation, then
/// center crop to `geometry.crop_to`. Delays outside the record add nothing.
ReconImage das_reconstruct(const ComplexTimeSeries& ts, const ReconGeometry& geometry);

namespace serial {
ReconImage das_reconstruct(const ComplexTimeSeries& ts, const ReconGeometry& geometry);
}

/// Uncropped complex DAS sum over the full geometry grid.
Image2D<std::complex<double>> das_sum(const ComplexTimeSeries& ts, const ReconGeometry& geometry);

ReconImage crop_center(const ReconImage& img, std::size_t n);

struct PreprocessConfig {
  double lo_hz = 5e3;
  double hi_hz = 7e6;
  int filter_order = 3;
  int time_factor = 3;
  int element_factor = 2;
};

/// bandpass -> interpolate -> analytic signal -> DAS.
ReconImage reconstruct(const TimeSeries& ts, const ReconGeometry& geometry, const PreprocessConfig& pre = {});

} // namespace qpat
