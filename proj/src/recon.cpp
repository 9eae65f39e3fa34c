#include "qpat/recon.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <type_traits>

#include <fftw3.h>

namespace qpat {

using cd = std::complex<double>;

namespace {

// FFTW's planner is not re-entrant; execution of an existing plan is.
std::mutex planner_mutex;

/// Complex 1D transform of length n, executed on caller buffers through the
/// new-array interface. Buffers must come from fftw_malloc.
class Fft1D {
public:
  Fft1D(std::size_t n, int sign, bool in_place = false) {
    auto* a = fftw_alloc_complex(n);
    auto* b = in_place ? a : fftw_alloc_complex(n);
    {
      std::lock_guard lock(planner_mutex);
      plan_ = fftw_plan_dft_1d(static_cast<int>(n), a, b, sign, FFTW_ESTIMATE);
    }
    if (!in_place) fftw_free(b);
    fftw_free(a);
    if (!plan_) throw NumericalError("FFTW plan creation failed");
  }
  ~Fft1D() {
    std::lock_guard lock(planner_mutex);
    fftw_destroy_plan(plan_);
  }
  Fft1D(const Fft1D&) = delete;
  Fft1D& operator=(const Fft1D&) = delete;

  void operator()(fftw_complex* in, fftw_complex* out) const { fftw_execute_dft(plan_, in, out); }

private:
  fftw_plan plan_ = nullptr;
};

struct ComplexBuf {
  fftw_complex* p;
  explicit ComplexBuf(std::size_t n) : p(fftw_alloc_complex(n)) {
    if (!p) throw NumericalError("FFTW allocation failed");
  }
  ~ComplexBuf() { fftw_free(p); }
  ComplexBuf(const ComplexBuf&) = delete;
  ComplexBuf& operator=(const ComplexBuf&) = delete;
  cd& operator[](std::size_t i) { return reinterpret_cast<cd*>(p)[i]; }
};

Biquad normalise(double b0, double b1, double b2, double a0, double a1, double a2) {
  return {b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0};
}

/// Butterworth sections of one type (low- or high-pass) at prewarped cutoff.
void butterworth_sections(std::vector<Biquad>& out, int order, double fc, double fs, bool highpass) {
  const double K = 2.0 * fs;
  const double W = K * std::tan(std::numbers::pi * fc / fs);
  for (int k = 0; k < order / 2; ++k) {
    const double sigma = std::sin(std::numbers::pi * (2.0 * k + 1.0) / (2.0 * order));
    const double a0 = K * K + 2.0 * sigma * W * K + W * W;
    const double a1 = 2.0 * (W * W - K * K);
    const double a2 = K * K - 2.0 * sigma * W * K + W * W;
    if (highpass)
      out.push_back(normalise(K * K, -2.0 * K * K, K * K, a0, a1, a2));
    else
      out.push_back(normalise(W * W, 2.0 * W * W, W * W, a0, a1, a2));
  }
  if (order % 2 == 1) {
    if (highpass)
      out.push_back(normalise(K, -K, 0.0, K + W, W - K, 0.0));
    else
      out.push_back(normalise(W, W, 0.0, K + W, W - K, 0.0));
  }
}

/// Transposed direct form II, state (z1, z2) per section, in place.
void sosfilt(const std::vector<Biquad>& sos, std::vector<double>& x, std::vector<std::array<double, 2>> z) {
  for (double& v : x) {
    double s = v;
    for (std::size_t k = 0; k < sos.size(); ++k) {
      const auto& q = sos[k];
      const double y = q.b0 * s + z[k][0];
      z[k][0] = q.b1 * s - q.a1 * y + z[k][1];
      z[k][1] = q.b2 * s - q.a2 * y;
      s = y;
    }
    v = s;
  }
}

/// Steady-state section states for a unit step, each section seeing the DC
/// gain of those before it.
std::vector<std::array<double, 2>> sosfilt_zi(const std::vector<Biquad>& sos) {
  std::vector<std::array<double, 2>> zi(sos.size());
  double scale = 1.0;
  for (std::size_t k = 0; k < sos.size(); ++k) {
    const auto& q = sos[k];
    const double h = (q.b0 + q.b1 + q.b2) / (1.0 + q.a1 + q.a2);
    const double z2 = q.b2 - q.a2 * h;
    const double z1 = q.b1 - q.a1 * h + z2;
    zi[k] = {scale * z1, scale * z2};
    scale *= h;
  }
  return zi;
}

std::vector<std::array<double, 2>> scaled(std::vector<std::array<double, 2>> zi, double s) {
  for (auto& z : zi) z = {z[0] * s, z[1] * s};
  return zi;
}

template <class T>
void check_factors(const BasicTimeSeries<T>& ts, int time_factor, int element_factor) {
  ts.validate();
  if (time_factor < 1 || element_factor < 1) throw ConfigError("interpolation factors must be >= 1");
}

double wrap_angle(double a) {
  while (a > std::numbers::pi) a -= 2.0 * std::numbers::pi;
  while (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

/// Fourier upsampling of one complex channel (length n -> n*f), splitting the
/// Nyquist bin for even n so real input stays real.
void upsample_channel(const Fft1D& fwd, const Fft1D& inv, ComplexBuf& a, ComplexBuf& spec, ComplexBuf& big,
                      std::size_t n, int f) {
  const std::size_t nf = n * static_cast<std::size_t>(f);
  fwd(a.p, spec.p);
  for (std::size_t i = 0; i < nf; ++i) big[i] = 0.0;
  const std::size_t pos = (n + 1) / 2;  // bins [0, pos) are the non-negative ones
  for (std::size_t i = 0; i < pos; ++i) big[i] = spec[i];
  const std::size_t neg = n % 2 == 0 ? n / 2 + 1 : pos;
  for (std::size_t i = neg; i < n; ++i) big[nf - n + i] = spec[i];
  if (n % 2 == 0) {
    big[n / 2] = 0.5 * spec[n / 2];
    big[nf - n / 2] = 0.5 * spec[n / 2];
  }
  inv(big.p, big.p);
  const double norm = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < nf; ++i) big[i] *= norm;
}

template <class T>
BasicTimeSeries<T> interpolate_impl(const BasicTimeSeries<T>& ts, int time_factor, int element_factor) {
  check_factors(ts, time_factor, element_factor);
  const std::size_t n = ts.n_samples;
  const std::size_t nf = n * static_cast<std::size_t>(time_factor);

  // Time axis.
  BasicTimeSeries<T> up = ts;
  if (time_factor > 1) {
    up.n_samples = nf;
    up.dt = ts.dt / time_factor;
    up.data.assign(ts.n_elements * nf, T{});
    Fft1D fwd(n, FFTW_FORWARD);
    Fft1D inv(nf, FFTW_BACKWARD, true);
    ComplexBuf a(n), spec(n), big(nf);
    for (std::size_t e = 0; e < ts.n_elements; ++e) {
      const T* src = ts.channel(e);
      for (std::size_t i = 0; i < n; ++i) a[i] = cd(src[i]);
      upsample_channel(fwd, inv, a, spec, big, n, time_factor);
      T* dst = up.channel(e);
      for (std::size_t i = 0; i < nf; ++i) {
        if constexpr (std::is_same_v<T, double>)
          dst[i] = big[i].real();
        else
          dst[i] = big[i];
      }
    }
  }
  if (element_factor == 1) return up;

  // Element axis: ring if the closing gap matches the mean pitch.
  const std::size_t ne = ts.n_elements;
  const auto c = ts.array_center;
  std::vector<double> theta(ne), radius(ne);
  for (std::size_t e = 0; e < ne; ++e) {
    theta[e] = std::atan2(ts.positions[e][1] - c[1], ts.positions[e][0] - c[0]);
    radius[e] = std::hypot(ts.positions[e][0] - c[0], ts.positions[e][1] - c[1]);
  }
  double mean_pitch = 0.0;
  for (std::size_t e = 0; e + 1 < ne; ++e) mean_pitch += wrap_angle(theta[e + 1] - theta[e]);
  mean_pitch /= static_cast<double>(ne - 1);
  const double closing = wrap_angle(theta[0] - theta[ne - 1]);
  const bool ring = std::abs(closing - mean_pitch) < 0.25 * std::abs(mean_pitch);

  const std::size_t f = static_cast<std::size_t>(element_factor);
  const std::size_t segments = ring ? ne : ne - 1;
  const std::size_t n_out = ring ? ne * f : (ne - 1) * f + 1;
  BasicTimeSeries<T> out = up;
  out.n_elements = n_out;
  out.positions.assign(n_out, {0.0, 0.0});
  out.data.assign(n_out * up.n_samples, T{});
  for (std::size_t s = 0; s < segments; ++s) {
    const std::size_t e0 = s, e1 = (s + 1) % ne;
    const double dtheta = wrap_angle(theta[e1] - theta[e0]);
    for (std::size_t k = 0; k < f; ++k) {
      const double w = static_cast<double>(k) / static_cast<double>(f);
      const std::size_t o = s * f + k;
      const double th = theta[e0] + w * dtheta;
      const double r = (1.0 - w) * radius[e0] + w * radius[e1];
      out.positions[o] = k == 0 ? ts.positions[e0] : std::array<double, 2>{c[0] + r * std::cos(th), c[1] + r * std::sin(th)};
      const T* a = up.channel(e0);
      const T* b = up.channel(e1);
      T* d = out.channel(o);
      if (k == 0)
        std::copy_n(a, up.n_samples, d);
      else
        for (std::size_t i = 0; i < up.n_samples; ++i) d[i] = (1.0 - w) * a[i] + w * b[i];
    }
  }
  if (!ring) {
    out.positions[n_out - 1] = ts.positions[ne - 1];
    std::copy_n(up.channel(ne - 1), up.n_samples, out.channel(n_out - 1));
  }
  return out;
}

void validate_geometry(const ReconGeometry& g) {
  if (g.n_pixels < 1 || !(g.fov_mm > 0.0)) throw ConfigError("reconstruction grid must be non-empty");
  if (!(g.sound_speed > 0.0)) throw ConfigError("reconstruction sound speed must be positive");
  if (g.crop_to < 1 || g.crop_to > g.n_pixels) throw ConfigError("crop size must lie in [1, n_pixels]");
}

/// One row of the complex DAS sum.
void das_row(const ComplexTimeSeries& ts, const PlaneGrid& plane, double c, std::size_t j, cd* row) {
  const double y = plane.y(j);
  const double inv_dt = 1.0 / ts.dt;
  const double last = static_cast<double>(ts.n_samples - 1);
  for (std::size_t i = 0; i < plane.nx; ++i) {
    const double x = plane.x(i);
    cd acc = 0.0;
    for (std::size_t e = 0; e < ts.n_elements; ++e) {
      const double d = std::hypot(x - ts.positions[e][0], y - ts.positions[e][1]);
      const double s = (d / c - ts.t0) * inv_dt;
      if (s < 0.0 || s > last) continue;
      const auto k = static_cast<std::size_t>(s);
      const double w = s - static_cast<double>(k);
      const cd* ch = ts.channel(e);
      acc += k + 1 < ts.n_samples ? (1.0 - w) * ch[k] + w * ch[k + 1] : ch[k];
    }
    row[i] = acc;
  }
}

ReconImage magnitude_cropped(const Image2D<cd>& sum, const ReconGeometry& geometry) {
  ReconImage full;
  full.pixels = Image2D<double>(sum.grid);
  for (std::size_t v = 0; v < sum.data.size(); ++v) full.pixels.data[v] = std::abs(sum.data[v]);
  full.pixel_pitch_mm = sum.grid.dx;
  full.fov_mm = sum.grid.dx * static_cast<double>(sum.grid.nx);
  return crop_center(full, geometry.crop_to);
}

} // namespace

std::vector<Biquad> design_butterworth_bandpass(double lo_hz, double hi_hz, double fs_hz, int order) {
  if (order < 1) throw ConfigError("filter order must be >= 1");
  if (!(fs_hz > 0.0)) throw ConfigError("sampling rate must be positive");
  if (!(hi_hz < 0.5 * fs_hz)) throw ConfigError("band-pass upper edge must lie below the Nyquist frequency");
  if (!(lo_hz > 0.0 && lo_hz < hi_hz)) throw ConfigError("band-pass edges must satisfy 0 < lo < hi");
  std::vector<Biquad> sos;
  butterworth_sections(sos, order, lo_hz, fs_hz, true);
  butterworth_sections(sos, order, hi_hz, fs_hz, false);
  return sos;
}

double cascade_magnitude(const std::vector<Biquad>& sections, double f_hz, double fs_hz) {
  const cd z1 = std::polar(1.0, -2.0 * std::numbers::pi * f_hz / fs_hz);
  const cd z2 = z1 * z1;
  cd h = 1.0;
  for (const auto& q : sections) h *= (q.b0 + q.b1 * z1 + q.b2 * z2) / (1.0 + q.a1 * z1 + q.a2 * z2);
  return std::abs(h);
}

std::vector<double> filtfilt(const std::vector<Biquad>& sections, const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n < 2) return x;
  std::size_t zero_b2 = 0, zero_a2 = 0;
  for (const auto& q : sections) {
    zero_b2 += q.b2 == 0.0;
    zero_a2 += q.a2 == 0.0;
  }
  std::size_t padlen = 3 * (2 * sections.size() + 1 - std::min(zero_b2, zero_a2));
  padlen = std::min(padlen, n - 1);

  std::vector<double> ext;
  ext.reserve(n + 2 * padlen);
  for (std::size_t i = padlen; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= padlen; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  const auto zi = sosfilt_zi(sections);
  sosfilt(sections, ext, scaled(zi, ext.front()));
  std::reverse(ext.begin(), ext.end());
  sosfilt(sections, ext, scaled(zi, ext.front()));
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(padlen), ext.begin() + static_cast<std::ptrdiff_t>(padlen + n)};
}

TimeSeries bandpass_filter(const TimeSeries& ts, double lo_hz, double hi_hz, int order) {
  ts.validate();
  const double fs = 1e6 / ts.dt;  // dt in microseconds
  const auto sos = design_butterworth_bandpass(lo_hz, hi_hz, fs, order);
  TimeSeries out = ts;
  const auto ne = static_cast<std::int64_t>(ts.n_elements);
#pragma omp parallel for schedule(static)
  for (std::int64_t e = 0; e < ne; ++e) {
    const double* src = ts.channel(static_cast<std::size_t>(e));
    const auto y = filtfilt(sos, std::vector<double>(src, src + ts.n_samples));
    std::copy(y.begin(), y.end(), out.channel(static_cast<std::size_t>(e)));
  }
  return out;
}

ComplexTimeSeries hilbert_analytic(const TimeSeries& ts) {
  ts.validate();
  const std::size_t n = ts.n_samples;
  ComplexTimeSeries out;
  out.n_elements = ts.n_elements;
  out.n_samples = n;
  out.dt = ts.dt;
  out.t0 = ts.t0;
  out.positions = ts.positions;
  out.array_center = ts.array_center;
  out.data.assign(ts.data.size(), cd{});

  std::vector<double> h(n, 0.0);
  h[0] = 1.0;
  if (n % 2 == 0) {
    h[n / 2] = 1.0;
    for (std::size_t i = 1; i < n / 2; ++i) h[i] = 2.0;
  } else {
    for (std::size_t i = 1; i < (n + 1) / 2; ++i) h[i] = 2.0;
  }
  Fft1D fwd(n, FFTW_FORWARD), inv(n, FFTW_BACKWARD);
  ComplexBuf a(n), b(n);
  for (std::size_t e = 0; e < ts.n_elements; ++e) {
    const double* src = ts.channel(e);
    for (std::size_t i = 0; i < n; ++i) a[i] = cd(src[i], 0.0);
    fwd(a.p, b.p);
    for (std::size_t i = 0; i < n; ++i) b[i] *= h[i] / static_cast<double>(n);
    inv(b.p, a.p);
    std::copy_n(reinterpret_cast<cd*>(a.p), n, out.channel(e));
  }
  return out;
}

TimeSeries interpolate(const TimeSeries& ts, int time_factor, int element_factor) {
  return interpolate_impl(ts, time_factor, element_factor);
}

ComplexTimeSeries interpolate(const ComplexTimeSeries& ts, int time_factor, int element_factor) {
  return interpolate_impl(ts, time_factor, element_factor);
}

Image2D<cd> das_sum(const ComplexTimeSeries& ts, const ReconGeometry& geometry) {
  ts.validate();
  validate_geometry(geometry);
  const PlaneGrid plane = geometry.plane();
  Image2D<cd> img(plane);
  const auto ny = static_cast<std::int64_t>(plane.ny);
#pragma omp parallel for schedule(dynamic, 4)
  for (std::int64_t j = 0; j < ny; ++j)
    das_row(ts, plane, geometry.sound_speed, static_cast<std::size_t>(j),
            img.data.data() + static_cast<std::size_t>(j) * plane.nx);
  return img;
}

ReconImage das_reconstruct(const ComplexTimeSeries& ts, const ReconGeometry& geometry) {
  return magnitude_cropped(das_sum(ts, geometry), geometry);
}

namespace serial {

ReconImage das_reconstruct(const ComplexTimeSeries& ts, const ReconGeometry& geometry) {
  ts.validate();
  validate_geometry(geometry);
  const PlaneGrid plane = geometry.plane();
  Image2D<cd> img(plane);
  for (std::size_t j = 0; j < plane.ny; ++j)
    das_row(ts, plane, geometry.sound_speed, j, img.data.data() + j * plane.nx);
  return magnitude_cropped(img, geometry);
}

} // namespace serial

ReconImage crop_center(const ReconImage& img, std::size_t n) {
  const auto& g = img.pixels.grid;
  if (n > g.nx || n > g.ny || n == 0) throw DimensionError("crop size exceeds image dimensions");
  const std::size_t ox = (g.nx - n) / 2, oy = (g.ny - n) / 2;
  PlaneGrid cg{n, n, g.dx, g.dy, g.x0 + static_cast<double>(ox) * g.dx, g.y0 + static_cast<double>(oy) * g.dy};
  ReconImage out;
  out.pixels = Image2D<double>(cg);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < n; ++i) out.pixels.at(i, j) = img.pixels.at(i + ox, j + oy);
  out.pixel_pitch_mm = g.dx;
  out.fov_mm = g.dx * static_cast<double>(n);
  return out;
}

ReconImage reconstruct(const TimeSeries& ts, const ReconGeometry& geometry, const PreprocessConfig& pre) {
  const TimeSeries filtered = bandpass_filter(ts, pre.lo_hz, pre.hi_hz, pre.filter_order);
  const TimeSeries dense = interpolate(filtered, pre.time_factor, pre.element_factor);
  return das_reconstruct(hilbert_analytic(dense), geometry);
}

} // namespace qpat
