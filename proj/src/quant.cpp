#include "qpat/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "qpat/io.hpp"
#include "qpat/phantom.hpp"

namespace qpat {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

template <class A, class B>
void require_same_grid(const Image2D<A>& a, const Image2D<B>& b, const char* what) {
  if (!(a.grid == b.grid) || a.data.size() != b.data.size()) throw DimensionError(std::string(what) + ": image grids differ");
}

/// 1D squared distance transform (Felzenszwalb & Huttenlocher) of samples at
/// positions i*d. Infinite entries are ignored when building the envelope.
void edt_1d(const std::vector<double>& f, double d, std::vector<double>& out) {
  const std::size_t n = f.size();
  std::vector<std::size_t> v(n);
  std::vector<double> z(n + 1);
  auto pos = [d](std::size_t i) { return static_cast<double>(i) * d; };
  auto meet = [&](std::size_t p, std::size_t q) {
    return ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
  };
  std::ptrdiff_t k = -1;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s = meet(v[static_cast<std::size_t>(k)], q);
    while (s <= z[static_cast<std::size_t>(k)]) {  // z[0] = -inf stops this at k = 0
      --k;
      s = meet(v[static_cast<std::size_t>(k)], q);
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = kInf;
  }
  if (k < 0) {
    std::fill(out.begin(), out.end(), kInf);
    return;
  }
  std::size_t j = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[j + 1] < pos(q)) ++j;
    const double dq = pos(q) - pos(v[j]);
    out[q] = dq * dq + f[v[j]];
  }
}

} // namespace

void LinearMap::validate() const {
  if (!(std::isfinite(slope) && std::isfinite(intercept)) || slope == 0.0)
    throw ConfigError("linear map needs a finite, non-zero slope");
}

std::vector<std::pair<double, double>> brightest_background(const CalibrationSample& sample, double fraction) {
  require_same_grid(sample.signal, sample.labels, "brightest_background");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("calibration fraction must lie in (0, 1]");
  if (sample.reference_mu_a.size() <= LabelMap::background)
    throw DimensionError("brightest_background: no reference value for the background label");
  const bool ranked = !sample.rank_by.data.empty();
  if (ranked) require_same_grid(sample.rank_by, sample.labels, "brightest_background");
  const auto& key = ranked ? sample.rank_by : sample.signal;
  // (rank key, signal)
  std::vector<std::pair<double, double>> values;
  for (std::size_t v = 0; v < sample.labels.data.size(); ++v)
    if (sample.labels.data[v] == LabelMap::background && std::isfinite(key.data[v]) &&
        std::isfinite(sample.signal.data[v]))
      values.emplace_back(key.data[v], sample.signal.data[v]);
  if (values.empty()) return {};
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(values.size()))));
  std::partial_sort(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end(), std::greater<>());
  std::vector<std::pair<double, double>> out;
  out.reserve(k);
  const double ref = sample.reference_mu_a[LabelMap::background];
  for (std::size_t i = 0; i < k; ++i) out.emplace_back(values[i].second, ref);
  return out;
}

LinearMap fit_linear_calibration(std::span<const CalibrationSample> samples, double fraction) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& s : samples) {
    auto b = brightest_background(s, fraction);
    pts.insert(pts.end(), b.begin(), b.end());
  }
  if (pts.size() < 2) throw NumericalError("calibration fit needs at least two pixels");
  double mx = 0.0, my = 0.0;
  for (const auto& [y, x] : pts) {
    mx += x;
    my += y;
  }
  mx /= static_cast<double>(pts.size());
  my /= static_cast<double>(pts.size());
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (const auto& [y, x] : pts) {
    sxx += (x - mx) * (x - mx);
    sxy += (x - mx) * (y - my);
    syy += (y - my) * (y - my);
  }
  // relative test: the mean of identical values need not reproduce them exactly
  if (!(sxx > 1e-20 * static_cast<double>(pts.size()) * (mx * mx + 1e-300)))
    throw NumericalError("degenerate calibration: reference mu_a has no spread");
  LinearMap m;
  m.slope = sxy / sxx;
  m.intercept = my - m.slope * mx;
  m.fit_r = syy > 0.0 ? sxy / std::sqrt(sxx * syy) : 1.0;
  if (m.slope == 0.0) throw NumericalError("degenerate calibration: zero slope");
  return m;
}

Image2D<double> apply_calibration(const Image2D<double>& signal, const LinearMap& map) {
  map.validate();
  Image2D<double> out(signal.grid);
  for (std::size_t v = 0; v < out.data.size(); ++v) out.data[v] = std::max(0.0, map.invert(signal.data[v]));
  return out;
}

Image2D<double> fluence_normalize(const Image2D<double>& signal, const Image2D<double>& phi, double floor_fraction) {
  require_same_grid(signal, phi, "fluence_normalize");
  const double peak = *std::max_element(phi.data.begin(), phi.data.end());
  if (!(peak > 0.0)) throw DomainError("fluence is zero everywhere");
  const double floor = floor_fraction * peak;
  Image2D<double> out(signal.grid);
  for (std::size_t v = 0; v < out.data.size(); ++v)
    out.data[v] = phi.data[v] > floor ? signal.data[v] / phi.data[v] : std::numeric_limits<double>::quiet_NaN();
  return out;
}

FluenceCorrected fluence_correct(const Image2D<double>& signal, const Image2D<double>& phi, const LinearMap& map_phi,
                                 double floor_fraction) {
  map_phi.validate();
  require_same_grid(signal, phi, "fluence_correct");
  const double peak = *std::max_element(phi.data.begin(), phi.data.end());
  if (!(peak > 0.0)) throw DomainError("fluence is zero everywhere");
  const double floor = floor_fraction * peak;
  FluenceCorrected out{Image2D<double>(signal.grid), Image2D<std::uint8_t>(signal.grid)};
  for (std::size_t v = 0; v < signal.data.size(); ++v) {
    if (phi.data[v] > floor) {
      out.mu_a.data[v] = std::max(0.0, map_phi.invert(signal.data[v] / phi.data[v]));
      out.valid.data[v] = 1;
    }
  }
  return out;
}

Image2D<double> distance_to_outside(const Image2D<std::uint8_t>& mask) {
  const auto& g = mask.grid;
  Image2D<double> d2(g);
  for (std::size_t v = 0; v < d2.data.size(); ++v) d2.data[v] = mask.data[v] ? kInf : 0.0;

  std::vector<double> f, out;
  f.resize(g.ny);
  out.resize(g.ny);
  for (std::size_t i = 0; i < g.nx; ++i) {
    for (std::size_t j = 0; j < g.ny; ++j) f[j] = d2.at(i, j);
    edt_1d(f, g.dy, out);
    for (std::size_t j = 0; j < g.ny; ++j) d2.at(i, j) = out[j];
  }
  f.resize(g.nx);
  out.resize(g.nx);
  for (std::size_t j = 0; j < g.ny; ++j) {
    for (std::size_t i = 0; i < g.nx; ++i) f[i] = d2.at(i, j);
    edt_1d(f, g.dx, out);
    for (std::size_t i = 0; i < g.nx; ++i) d2.at(i, j) = std::sqrt(out[i]);
  }
  return d2;
}

Image2D<double> inward_depth(const Image2D<std::uint8_t>& mask) {
  Image2D<double> d = distance_to_outside(mask);
  const double half = 0.5 * std::min(mask.grid.dx, mask.grid.dy);
  for (std::size_t v = 0; v < d.data.size(); ++v) d.data[v] = mask.data[v] ? d.data[v] - half : 0.0;
  return d;
}

double aggregate_region(const Image2D<double>& image, const RegionSpec& region) {
  require_same_grid(image, region.mask, "aggregate_region");
  std::vector<double> vals;
  if (region.kind == RegionKind::background) {
    for (std::size_t v = 0; v < image.data.size(); ++v)
      if (region.mask.data[v] && std::isfinite(image.data[v])) vals.push_back(image.data[v]);
    if (vals.empty()) throw DomainError("aggregate_region: empty background mask");
    return std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
  }
  const auto depth = inward_depth(region.mask);
  for (std::size_t v = 0; v < image.data.size(); ++v)
    if (region.mask.data[v] && depth.data[v] <= region.depth_threshold_mm && std::isfinite(image.data[v]))
      vals.push_back(image.data[v]);
  if (vals.empty()) throw DomainError("aggregate_region: no inclusion pixels within the depth threshold");
  const std::size_t n = vals.size();
  std::nth_element(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(n / 2), vals.end());
  const double hi = vals[n / 2];
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(n / 2));
  return 0.5 * (lo + hi);
}

void ChromophoreBasis::validate() const {
  const std::size_t n = wavelengths.size();
  if (n < 2) throw ConfigError("chromophore basis needs at least two wavelengths");
  if (eps_hbo2.size() != n || eps_hb.size() != n) throw ConfigError("chromophore basis columns have different lengths");
  double a = 0.0, b = 0.0, c = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    a += eps_hbo2[i] * eps_hbo2[i];
    b += eps_hbo2[i] * eps_hb[i];
    c += eps_hb[i] * eps_hb[i];
  }
  if (!(a * c - b * b > 1e-10 * a * c)) throw ConfigError("chromophore basis is singular at the chosen wavelengths");
}

ChromophoreBasis ChromophoreBasis::select(std::span<const double> wavelengths_nm) const {
  ChromophoreBasis out;
  for (double wl : wavelengths_nm) {
    auto it = std::find_if(wavelengths.begin(), wavelengths.end(), [wl](double w) { return std::abs(w - wl) < 1e-6; });
    if (it == wavelengths.end()) throw ConfigError("wavelength " + std::to_string(wl) + " nm not in the chromophore basis");
    const auto i = static_cast<std::size_t>(it - wavelengths.begin());
    out.wavelengths.push_back(wavelengths[i]);
    out.eps_hbo2.push_back(eps_hbo2[i]);
    out.eps_hb.push_back(eps_hb[i]);
  }
  return out;
}

ChromophoreBasis load_hemoglobin_basis(const std::filesystem::path& csv) {
  const auto t = io::read_csv(csv);
  const auto cw = t.column("wavelength_nm"), co = t.column("eps_hbo2"), cd = t.column("eps_hb");
  ChromophoreBasis b;
  try {
    for (const auto& r : t.rows) {
      b.wavelengths.push_back(std::stod(r.at(cw)));
      b.eps_hbo2.push_back(std::stod(r.at(co)));
      b.eps_hb.push_back(std::stod(r.at(cd)));
    }
  } catch (const std::exception& e) {
    throw IoError("malformed hemoglobin table " + csv.string() + ": " + e.what());
  }
  b.validate();
  return b;
}

ChromophoreBasis load_hemoglobin_basis() { return load_hemoglobin_basis(default_data_dir() / "hemoglobin.csv"); }

double unmix_so2(std::span<const double> mu_a, const ChromophoreBasis& basis) {
  const std::size_t n = basis.wavelengths.size();
  if (mu_a.size() != n) throw DimensionError("unmix: one value per basis wavelength expected");
  double a = 0.0, b = 0.0, c = 0.0, yo = 0.0, yd = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    a += basis.eps_hbo2[i] * basis.eps_hbo2[i];
    b += basis.eps_hbo2[i] * basis.eps_hb[i];
    c += basis.eps_hb[i] * basis.eps_hb[i];
    yo += basis.eps_hbo2[i] * mu_a[i];
    yd += basis.eps_hb[i] * mu_a[i];
  }
  const double det = a * c - b * b;
  const double c_oxy = std::max(0.0, (c * yo - b * yd) / det);
  const double c_deoxy = std::max(0.0, (a * yd - b * yo) / det);
  if (c_oxy + c_deoxy <= 0.0 || !std::isfinite(c_oxy + c_deoxy)) return std::numeric_limits<double>::quiet_NaN();
  return c_oxy / (c_oxy + c_deoxy);
}

So2Image linear_unmix_so2(std::span<const Image2D<double>> mu_a, const ChromophoreBasis& basis) {
  basis.validate();
  if (mu_a.size() != basis.wavelengths.size())
    throw DimensionError("unmix: number of images does not match basis wavelengths");
  for (const auto& img : mu_a) require_same_grid(img, mu_a[0], "linear_unmix_so2");
  So2Image out{Image2D<double>(mu_a[0].grid), Image2D<std::uint8_t>(mu_a[0].grid)};
  std::vector<double> px(mu_a.size());
  for (std::size_t v = 0; v < out.so2.data.size(); ++v) {
    for (std::size_t w = 0; w < mu_a.size(); ++w) px[w] = mu_a[w].data[v];
    const double s = unmix_so2(px, basis);
    out.so2.data[v] = s;
    out.valid.data[v] = std::isnan(s) ? 0 : 1;
  }
  return out;
}

} // namespace qpat
