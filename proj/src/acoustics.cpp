#include "qpat/acoustics.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>

#include <fftw3.h>

#include "qpat/rng.hpp"

namespace qpat {

void DetectorArray::validate() const {
  if (n_elements < 2) throw ConfigError("detector array needs at least two elements");
  if (!(arc_span_deg > 0.0 && arc_span_deg <= 360.0)) throw ConfigError("detector arc span must lie in (0, 360]");
  if (!(radius > 0.0)) throw ConfigError("detector radius must be positive");
}

double DetectorArray::element_angle_deg(std::size_t i) const {
  return arc_center_deg + (static_cast<double>(i) - 0.5 * static_cast<double>(n_elements - 1)) * angular_pitch_deg();
}

std::vector<std::array<double, 2>> DetectorArray::element_positions() const {
  std::vector<std::array<double, 2>> out(n_elements);
  for (std::size_t i = 0; i < n_elements; ++i) {
    const double a = element_angle_deg(i) * std::numbers::pi / 180.0;
    out[i] = {center_x + radius * std::cos(a), center_y + radius * std::sin(a)};
  }
  return out;
}

void Medium2D::validate() const {
  if (sound_speed.size() != grid.size() || density.size() != grid.size())
    throw DimensionError("acoustic medium fields do not match the grid");
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (!(sound_speed[i] > 0.0) || !(density[i] > 0.0) || !std::isfinite(sound_speed[i]) || !std::isfinite(density[i]))
      throw ConfigError("acoustic medium: sound speed and density must be finite and positive");
}

double Medium2D::max_sound_speed() const { return *std::max_element(sound_speed.begin(), sound_speed.end()); }

Medium2D Medium2D::homogeneous(const PlaneGrid& grid, double c, double rho) {
  return {grid, std::vector<double>(grid.size(), c), std::vector<double>(grid.size(), rho)};
}

std::size_t fft_friendly_size(std::size_t n) {
  for (std::size_t m = std::max<std::size_t>(n, 1);; ++m) {
    std::size_t r = m;
    for (std::size_t f : {2, 3, 5, 7})
      while (r % f == 0) r /= f;
    if (r == 1) return m;
  }
}

PlaneGrid acoustic_grid_for(const DetectorArray& detectors, double dx, std::size_t pml_size, double margin_mm) {
  if (!(dx > 0.0)) throw ConfigError("acoustic grid spacing must be positive");
  const double half = detectors.radius + margin_mm;
  const auto inner = static_cast<std::size_t>(std::ceil(2.0 * half / dx));
  const std::size_t n = fft_friendly_size(inner + 2 * pml_size);
  auto g = PlaneGrid::centered(n, n, dx);
  g.x0 += detectors.center_x;
  g.y0 += detectors.center_y;
  return g;
}

namespace {

std::mutex fftw_planner_mutex;

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};
template <class T>
using FftwBuffer = std::unique_ptr<T[], FftwFree>;

template <class T>
FftwBuffer<T> fftw_alloc(std::size_t n) {
  auto* p = static_cast<T*>(fftw_malloc(sizeof(T) * n));
  if (!p) throw NumericalError("FFTW allocation failed");
  std::fill_n(reinterpret_cast<double*>(p), n * sizeof(T) / sizeof(double), 0.0);
  return FftwBuffer<T>(p);
}

/// Real 2D transforms on an (ny, nx) row-major grid; plans are built once and
/// reused through the new-array interface.
class RealFft2D {
public:
  RealFft2D(std::size_t nx, std::size_t ny, double* real, fftw_complex* spec) {
    std::lock_guard lock(fftw_planner_mutex);
    fwd_ = fftw_plan_dft_r2c_2d(static_cast<int>(ny), static_cast<int>(nx), real, spec, FFTW_ESTIMATE);
    inv_ = fftw_plan_dft_c2r_2d(static_cast<int>(ny), static_cast<int>(nx), spec, real, FFTW_ESTIMATE);
    if (!fwd_ || !inv_) throw NumericalError("FFTW plan creation failed");
  }
  ~RealFft2D() {
    std::lock_guard lock(fftw_planner_mutex);
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
  }
  RealFft2D(const RealFft2D&) = delete;
  RealFft2D& operator=(const RealFft2D&) = delete;

  void forward(double* in, fftw_complex* out) const { fftw_execute_dft_r2c(fwd_, in, out); }
  /// Destroys `in`.
  void inverse(fftw_complex* in, double* out) const { fftw_execute_dft_c2r(inv_, in, out); }

private:
  fftw_plan fwd_ = nullptr;
  fftw_plan inv_ = nullptr;
};

/// exp(-alpha * (c/dx) * (d/L)^4 * dt/2) for depth d (pixels) into the layer.
std::vector<double> pml_profile(std::size_t n, std::size_t size, double alpha, double c, double dx, double dt,
                                bool staggered) {
  std::vector<double> out(n, 1.0);
  const double shift = staggered ? 0.5 : 0.0;
  const auto L = static_cast<double>(size);
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = static_cast<double>(i) + shift;
    double depth = 0.0;
    if (pos < L) depth = L - pos;
    else if (pos > static_cast<double>(n - 1 - size)) depth = pos - static_cast<double>(n - 1 - size);
    if (depth > 0.0) out[i] = std::exp(-alpha * (c / dx) * std::pow(depth / L, 4.0) * dt / 2.0);
  }
  return out;
}

struct BilinearTap {
  std::size_t idx[4];
  double w[4];
};

BilinearTap make_tap(const PlaneGrid& g, double x, double y) {
  const double fx = (x - g.x0) / g.dx - 0.5;
  const double fy = (y - g.y0) / g.dy - 0.5;
  if (fx < 0.0 || fy < 0.0 || fx >= static_cast<double>(g.nx - 1) || fy >= static_cast<double>(g.ny - 1))
    throw ConfigError("detector element lies outside the acoustic grid");
  const auto i0 = static_cast<std::size_t>(fx);
  const auto j0 = static_cast<std::size_t>(fy);
  const double tx = fx - static_cast<double>(i0);
  const double ty = fy - static_cast<double>(j0);
  return {{g.index(i0, j0), g.index(i0 + 1, j0), g.index(i0, j0 + 1), g.index(i0 + 1, j0 + 1)},
          {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty}};
}

double wavenumber(std::size_t i, std::size_t n, double d) {
  const auto k = i <= n / 2 ? static_cast<double>(i) : static_cast<double>(i) - static_cast<double>(n);
  return 2.0 * std::numbers::pi * k / (static_cast<double>(n) * d);
}

} // namespace

TimeSeries simulate_forward(const Image2D<double>& p0, const Medium2D& medium, const DetectorArray& detectors,
                            const AcousticConfig& cfg) {
  detectors.validate();
  medium.validate();
  const PlaneGrid& g = medium.grid;
  if (!(p0.grid == g) || p0.data.size() != g.size()) throw DimensionError("p0 and acoustic medium grids differ");
  if (g.nx < 2 * cfg.pml_size + 4 || g.ny < 2 * cfg.pml_size + 4) throw ConfigError("acoustic grid too small for the PML");
  if (cfg.pml_size < 20) throw ConfigError("PML must be at least 20 pixels thick");
  if (!(cfg.dt > 0.0) || cfg.n_steps < 2) throw ConfigError("acoustic dt must be positive and n_steps >= 2");
  const double cfl = medium.max_sound_speed() * cfg.dt / std::min(g.dx, g.dy);
  if (cfl > cfg.max_cfl)
    throw ConfigError("CFL number " + std::to_string(cfl) + " exceeds " + std::to_string(cfg.max_cfl));

  const std::size_t nx = g.nx, ny = g.ny, N = g.size();
  const std::size_t nxh = nx / 2 + 1, M = ny * nxh;
  const double dt = cfg.dt;

  // Elements must sit inside the non-absorbing interior.
  const auto positions = detectors.element_positions();
  std::vector<BilinearTap> taps;
  taps.reserve(positions.size());
  const double lo_x = g.x0 + static_cast<double>(cfg.pml_size) * g.dx;
  const double hi_x = g.x0 + static_cast<double>(nx - cfg.pml_size) * g.dx;
  const double lo_y = g.y0 + static_cast<double>(cfg.pml_size) * g.dy;
  const double hi_y = g.y0 + static_cast<double>(ny - cfg.pml_size) * g.dy;
  for (const auto& p : positions) {
    if (p[0] < lo_x || p[0] > hi_x || p[1] < lo_y || p[1] > hi_y)
      throw ConfigError("detector element lies inside the PML or outside the grid");
    taps.push_back(make_tap(g, p[0], p[1]));
  }

  // Spectral operators: i k exp(+-i k d/2) kappa / N.
  using cd = std::complex<double>;
  std::vector<cd> dxp(M), dxn(M), dyp(M), dyn(M);
  const double inv_n = 1.0 / static_cast<double>(N);
  for (std::size_t j = 0; j < ny; ++j) {
    const double ky = (ny % 2 == 0 && j == ny / 2) ? 0.0 : wavenumber(j, ny, g.dy);
    const double ky_full = wavenumber(j, ny, g.dy);
    for (std::size_t i = 0; i < nxh; ++i) {
      const double kx = (nx % 2 == 0 && i == nx / 2) ? 0.0 : wavenumber(i, nx, g.dx);
      const double kx_full = wavenumber(i, nx, g.dx);
      const double kmag = std::hypot(kx_full, ky_full);
      const double arg = cfg.c_ref * kmag * dt / 2.0;
      const double kappa = arg == 0.0 ? 1.0 : std::sin(arg) / arg;
      const std::size_t m = j * nxh + i;
      const cd I(0.0, 1.0);
      dxp[m] = I * kx * std::exp(I * (kx * g.dx / 2.0)) * kappa * inv_n;
      dxn[m] = I * kx * std::exp(-I * (kx * g.dx / 2.0)) * kappa * inv_n;
      dyp[m] = I * ky * std::exp(I * (ky * g.dy / 2.0)) * kappa * inv_n;
      dyn[m] = I * ky * std::exp(-I * (ky * g.dy / 2.0)) * kappa * inv_n;
    }
  }

  const auto pml_x = pml_profile(nx, cfg.pml_size, cfg.pml_alpha, cfg.c_ref, g.dx, dt, false);
  const auto pml_xs = pml_profile(nx, cfg.pml_size, cfg.pml_alpha, cfg.c_ref, g.dx, dt, true);
  const auto pml_y = pml_profile(ny, cfg.pml_size, cfg.pml_alpha, cfg.c_ref, g.dy, dt, false);
  const auto pml_ys = pml_profile(ny, cfg.pml_size, cfg.pml_alpha, cfg.c_ref, g.dy, dt, true);

  // Staggered densities by neighbour averaging; c^2 and rho0 on the main grid.
  std::vector<double> inv_rho_x(N), inv_rho_y(N), c2(N);
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) {
      const std::size_t v = g.index(i, j);
      const double r = medium.density[v];
      inv_rho_x[v] = 2.0 / (r + medium.density[g.index(std::min(i + 1, nx - 1), j)]);
      inv_rho_y[v] = 2.0 / (r + medium.density[g.index(i, std::min(j + 1, ny - 1))]);
      c2[v] = medium.sound_speed[v] * medium.sound_speed[v];
    }

  auto p = fftw_alloc<double>(N), ux = fftw_alloc<double>(N), uy = fftw_alloc<double>(N);
  auto rx = fftw_alloc<double>(N), ry = fftw_alloc<double>(N), tmp = fftw_alloc<double>(N);
  auto P = fftw_alloc<fftw_complex>(M), S = fftw_alloc<fftw_complex>(M);
  RealFft2D fft(nx, ny, tmp.get(), S.get());

  auto apply = [&](const fftw_complex* src, const std::vector<cd>& op, double* out) {
    for (std::size_t m = 0; m < M; ++m) {
      const cd v = cd(src[m][0], src[m][1]) * op[m];
      S[m][0] = v.real();
      S[m][1] = v.imag();
    }
    fft.inverse(S.get(), out);
  };

  TimeSeries ts;
  ts.n_elements = detectors.n_elements;
  ts.n_samples = cfg.n_steps;
  ts.dt = dt;
  ts.t0 = 0.0;
  ts.positions = positions;
  ts.array_center = {detectors.center_x, detectors.center_y};
  ts.data.assign(ts.n_elements * ts.n_samples, 0.0);

  auto record = [&](std::size_t step) {
    for (std::size_t e = 0; e < taps.size(); ++e) {
      const auto& t = taps[e];
      const double v = t.w[0] * p[t.idx[0]] + t.w[1] * p[t.idx[1]] + t.w[2] * p[t.idx[2]] + t.w[3] * p[t.idx[3]];
      if (!std::isfinite(v)) throw NumericalError("acoustic solver became unstable at step " + std::to_string(step));
      ts.at(e, step) = v;
    }
  };

  // Initial state: p = p0, split density, velocity at t = -dt/2.
  for (std::size_t v = 0; v < N; ++v) {
    p[v] = p0.data[v];
    rx[v] = ry[v] = p0.data[v] / (2.0 * c2[v]);
  }
  record(0);
  std::copy_n(p.get(), N, tmp.get());
  fft.forward(tmp.get(), P.get());
  apply(P.get(), dxp, ux.get());
  apply(P.get(), dyp, uy.get());
  for (std::size_t v = 0; v < N; ++v) {
    ux[v] *= dt / 2.0 * inv_rho_x[v];
    uy[v] *= dt / 2.0 * inv_rho_y[v];
  }

  for (std::size_t step = 1; step < cfg.n_steps; ++step) {
    std::copy_n(p.get(), N, tmp.get());
    fft.forward(tmp.get(), P.get());

    apply(P.get(), dxp, tmp.get());
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i) {
        const std::size_t v = j * nx + i;
        ux[v] = pml_xs[i] * (pml_xs[i] * ux[v] - dt * inv_rho_x[v] * tmp[v]);
      }
    apply(P.get(), dyp, tmp.get());
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i) {
        const std::size_t v = j * nx + i;
        uy[v] = pml_ys[j] * (pml_ys[j] * uy[v] - dt * inv_rho_y[v] * tmp[v]);
      }

    std::copy_n(ux.get(), N, tmp.get());
    fft.forward(tmp.get(), P.get());
    apply(P.get(), dxn, tmp.get());
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i) {
        const std::size_t v = j * nx + i;
        rx[v] = pml_x[i] * (pml_x[i] * rx[v] - dt * medium.density[v] * tmp[v]);
      }
    std::copy_n(uy.get(), N, tmp.get());
    fft.forward(tmp.get(), P.get());
    apply(P.get(), dyn, tmp.get());
    for (std::size_t j = 0; j < ny; ++j)
      for (std::size_t i = 0; i < nx; ++i) {
        const std::size_t v = j * nx + i;
        ry[v] = pml_y[j] * (pml_y[j] * ry[v] - dt * medium.density[v] * tmp[v]);
      }

    for (std::size_t v = 0; v < N; ++v) p[v] = c2[v] * (rx[v] + ry[v]);
    record(step);
  }
  return ts;
}

TimeSeries add_noise(const TimeSeries& ts, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw ConfigError("noise sigma must be >= 0");
  TimeSeries out = ts;
  if (sigma == 0.0) return out;
  RngStream rng(seed, 0x6e6f697365ULL);
  for (double& v : out.data) v += sigma * rng.normal();
  return out;
}

} // namespace qpat
