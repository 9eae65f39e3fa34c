// Acceptance suite: one PASS/FAIL line per criterion with the measured values.
//
//   qpat_acceptance [--work DIR] [--only 1,2,...] [--known-fail 6,7,...]
//
// Exit status is the number of FAIL lines outside --known-fail. Known
// failures are still printed as FAIL; the flag only keeps them out of the
// exit status.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "qpat/acoustics.hpp"
#include "qpat/eval.hpp"
#include "qpat/photon.hpp"
#include "qpat/pipeline.hpp"
#include "qpat/quant.hpp"
#include "qpat/recon.hpp"
#include "qpat/slab.hpp"

using namespace qpat;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 1 ------------------------------------------------------------------------

Outcome beer_lambert() {
  const auto t0 = std::chrono::steady_clock::now();
  const double mu_a = 0.1;
  const VoxelGrid grid{{9, 9, 64}, {0.5, 0.5, 0.5}, {-2.25, -2.25, 0.0}};
  TransportConfig cfg;
  cfg.n_photons = 10'000'000;
  const auto f = simulate_fluence(OpticalMedium::homogeneous(grid, mu_a, 0.0, 0.0),
                                  PencilBeam{{0.0, 0.0, -1.0}, {0, 0, 1}, 0.0}, cfg);
  const double secs = seconds_since(t0);
  const double ref = f.phi[grid.index(4, 4, 0)];
  double worst = 0.0;
  for (std::size_t k = 0; k < grid.dims[2]; ++k) {
    const double z = 0.5 * static_cast<double>(k);
    if (mu_a * z > 3.0) break;
    const double expect = std::exp(-mu_a * z);
    worst = std::max(worst, std::abs(f.phi[grid.index(4, 4, k)] / ref - expect) / expect);
  }
  return {worst <= 0.02 && secs < 30.0,
          fmt("max rel dev %.4f over 3 attenuation lengths (<= 0.02), %.1f s (< 30 s)", worst, secs)};
}

// 2 ------------------------------------------------------------------------

Outcome energy_conservation() {
  double worst = 0.0;
  for (double mu_a : {0.005, 0.04, 0.4})
    for (double mus_prime : {0.5, 1.5}) {
      const auto medium = OpticalMedium::homogeneous(VoxelGrid::centered_cube(64, 0.5), mu_a,
                                                     mus_prime / (1.0 - 0.7), 0.7);
      TransportConfig cfg;
      cfg.n_photons = 100'000;
      cfg.seed = 11;
      worst = std::max(worst, simulate_fluence(medium, IlluminationGeometry{}, cfg).balance.relative_defect());
    }
  return {worst < 1e-3, fmt("worst |launched - absorbed - escaped| / launched %.2e over 6 media (< 1e-3)", worst)};
}

// 3 ------------------------------------------------------------------------

Outcome hg_moment() {
  const auto t0 = std::chrono::steady_clock::now();
  const double g = 0.7;
  const int n = 1'000'000;
  RngStream rng(7, 0);
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double c = scatter_hg(g, rng).cos_theta;
    s += c;
    s2 += c * c;
  }
  const double secs = seconds_since(t0);
  const double mean = s / n;
  const double se = std::sqrt((s2 / n - mean * mean) / n);
  return {std::abs(mean - g) <= 0.005 && secs < 1.0,
          fmt("<cos> = %.5f, |<cos> - 0.7| = %.5f (<= 0.005, %.1f standard errors), %.2f s (< 1 s)", mean,
              std::abs(mean - g), std::abs(mean - g) / se, secs)};
}

// 4 ------------------------------------------------------------------------

Image2D<double> gaussian_source(const PlaneGrid& g, double x0, double y0, double sigma) {
  Image2D<double> img(g);
  for (std::size_t j = 0; j < g.ny; ++j)
    for (std::size_t i = 0; i < g.nx; ++i)
      img.at(i, j) = std::exp(-(std::pow(g.x(i) - x0, 2) + std::pow(g.y(j) - y0, 2)) / (2 * sigma * sigma));
  return img;
}

double peak_time(const TimeSeries& ts, std::size_t e) {
  const double* x = ts.channel(e);
  const auto k = static_cast<std::size_t>(std::max_element(x, x + ts.n_samples) - x);
  if (k == 0 || k + 1 >= ts.n_samples) return std::numeric_limits<double>::quiet_NaN();
  const double a = x[k - 1], b = x[k], c = x[k + 1];
  return (static_cast<double>(k) + 0.5 * (a - c) / (a - 2 * b + c)) * ts.dt;
}

Outcome acoustic_speed_and_pml() {
  const auto t0 = std::chrono::steady_clock::now();
  // wavefront speed on the device array from the nearest and farthest element
  const DetectorArray det;
  AcousticConfig cfg;
  cfg.n_steps = 1400;
  const double c = cfg.c_ref;
  const auto medium = Medium2D::homogeneous(acoustic_grid_for(det, 0.25, cfg.pml_size), c);
  const double sx = 3.0, sy = -6.0;
  const auto ts = simulate_forward(gaussian_source(medium.grid, sx, sy, 0.4), medium, det, cfg);
  const auto pos = det.element_positions();
  std::size_t near = 0, far = 0;
  auto dist = [&](std::size_t e) { return std::hypot(pos[e][0] - sx, pos[e][1] - sy); };
  for (std::size_t e = 1; e < pos.size(); ++e) {
    if (dist(e) < dist(near)) near = e;
    if (dist(e) > dist(far)) far = e;
  }
  const double measured = (dist(far) - dist(near)) / (peak_time(ts, far) - peak_time(ts, near));
  const double speed_err = std::abs(measured - c) / c;

  // PML: tight grid against one wide enough that nothing returns in the window
  DetectorArray small;
  small.n_elements = 8;
  small.radius = 8.0;
  small.arc_span_deg = 360.0;
  AcousticConfig pc;
  pc.n_steps = 640;
  pc.c_ref = 1.5;
  const auto tight = Medium2D::homogeneous(acoustic_grid_for(small, 0.2, 20, 1.0), 1.5);
  const auto wide = Medium2D::homogeneous(acoustic_grid_for(small, 0.2, 20, 25.0), 1.5);
  const auto a = simulate_forward(gaussian_source(tight.grid, 1.0, 2.0, 0.4), tight, small, pc);
  const auto b = simulate_forward(gaussian_source(wide.grid, 1.0, 2.0, 0.4), wide, small, pc);
  double peak = 0.0, residual = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    peak = std::max(peak, std::abs(b.data[i]));
    residual = std::max(residual, std::abs(a.data[i] - b.data[i]));
  }
  const double secs = seconds_since(t0);
  return {speed_err <= 0.005 && residual < 0.01 * peak && secs < 60.0,
          fmt("speed %.5f mm/us vs %.3f (rel err %.4f <= 0.005); PML residual %.4f of direct peak (< 0.01); "
              "%.1f s (< 60 s)",
              measured, c, speed_err, residual / peak, secs)};
}

// 5 ------------------------------------------------------------------------

Outcome das_localization() {
  const auto t0 = std::chrono::steady_clock::now();
  const DetectorArray det;
  AcousticConfig cfg;
  cfg.n_steps = 1600;
  const auto medium = Medium2D::homogeneous(acoustic_grid_for(det, 0.25, cfg.pml_size), cfg.c_ref);
  const ReconGeometry geo;
  const double pitch = geo.fov_mm / static_cast<double>(geo.n_pixels);
  double worst = 0.0;
  std::string where;
  for (auto [x0, y0] : {std::pair{2.3, -4.1}, std::pair{-7.6, 5.2}}) {
    const auto ts = simulate_forward(gaussian_source(medium.grid, x0, y0, 0.25), medium, det, cfg);
    const auto img = reconstruct(ts, geo);
    const auto& px = img.pixels;
    const auto k = static_cast<std::size_t>(std::max_element(px.data.begin(), px.data.end()) - px.data.begin());
    const double off = std::hypot(px.grid.x(k % px.grid.nx) - x0, px.grid.y(k / px.grid.nx) - y0) / pitch;
    worst = std::max(worst, off);
    where += fmt(" (%.1f,%.1f)->%.2f px", x0, y0, off);
  }
  const double secs = seconds_since(t0);
  return {worst <= 2.0 && secs < 120.0,
          fmt("%zu px / %.0f mm grid, offsets%s (<= 2 px), %.1f s (< 120 s)", geo.n_pixels, geo.fov_mm,
              where.c_str(), secs)};
}

// 6-8 ----------------------------------------------------------------------

struct Quantification {
  ScenarioResult train;
  PipelineResult test;
  double seconds = 0.0;
};

PipelineConfig desk_config() {
  return PipelineConfig::from_json({{"phantoms", {{"count", 10}}},
                                    {"grid", {{"n", 64}, {"spacing_mm", 0.5}}},
                                    {"optics", {{"wavelengths_nm", {800.0}}, {"photons", 1'000'000}, {"seed", 42}}},
                                    {"acoustics", {{"n_steps", 1600}}}});
}

const Quantification& quantification(const fs::path& work) {
  static std::unique_ptr<Quantification> q;
  static std::string failure;
  if (!failure.empty()) throw std::runtime_error(failure);
  if (q) return *q;
  try {
    q = std::make_unique<Quantification>();
    const auto t0 = std::chrono::steady_clock::now();
    auto train = desk_config();
    train.output_dir = work / "train";
    q->train = scenario_depth_decorrelation(12, 101, train);

    auto test = desk_config();
    test.output_dir = work / "test";
    test.sampler_count = 10;
    test.sampler_seed = 202;
    test.ranges.min_inclusions = 1;
    test.fit_maps = false;
    test.cal_map = q->train.pipeline.cal_map;
    test.gtphi_map = q->train.pipeline.gtphi_map;
    q->test = run_pipeline(test);
    q->seconds = seconds_since(t0);
  } catch (const std::exception& e) {
    q.reset();
    failure = e.what();
    throw;
  }
  return *q;
}

std::vector<MetricRow> rows_of(const PipelineResult& r, const std::string& method, const std::string& kind) {
  std::vector<MetricRow> out;
  for (const auto& row : r.rows)
    if (row.method == method && row.kind == kind) out.push_back(row);
  return out;
}

double median_rel_err(const std::vector<MetricRow>& rows) {
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.rel_err);
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : median(v);
}

double estimate_correlation(const std::vector<MetricRow>& rows) {
  std::vector<double> est, ref;
  for (const auto& r : rows) {
    est.push_back(r.estimate);
    ref.push_back(r.reference);
  }
  try {
    return pearson_r(ref, est);
  } catch (const Error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

Outcome gtphi_quantification(const fs::path& work) {
  const auto& q = quantification(work);
  const auto inc = rows_of(q.test, "gtphi", "inclusion");
  const auto bg = rows_of(q.test, "gtphi", "background");
  std::vector<double> g;
  for (const auto& img : q.test.images) {
    const auto v = inclusion_gcnr(img, gtphi_estimate(img, q.test.gtphi_map));
    g.insert(g.end(), v.begin(), v.end());
  }
  const double inc_err = median_rel_err(inc), bg_err = median_rel_err(bg);
  const double g_med = g.empty() ? std::numeric_limits<double>::quiet_NaN() : median(g);
  const std::size_t n_ph = q.test.images.size();
  const bool pass = n_ph >= 10 && inc_err <= 25.0 && bg_err <= 20.0 && g_med >= 0.9 && q.seconds <= 1800.0;
  return {pass, fmt("%zu phantoms, %zu inclusions: inclusion median rel err %.1f%% (<= 25), background %.1f%% "
                    "(<= 20), median gCNR %.3f (>= 0.9); train+test %.0f s (<= 1800 s)",
                    n_ph, inc.size(), inc_err, bg_err, g_med, q.seconds)};
}

Outcome cal_fails_at_depth(const fs::path& work) {
  const auto& q = quantification(work);
  const auto cal = rows_of(q.test, "cal", "inclusion");
  const double r_cal = estimate_correlation(cal);
  const double r_gt = estimate_correlation(rows_of(q.test, "gtphi", "inclusion"));
  // a constant estimate (e.g. every inclusion clamped to zero) has no defined r
  const auto zero = std::count_if(cal.begin(), cal.end(), [](const MetricRow& r) { return r.estimate == 0.0; });
  const std::string cal_note = std::isnan(r_cal) ? fmt(", undefined: %td of %zu estimates are 0", zero, cal.size()) : "";
  return {std::abs(r_cal) <= 0.5 && r_gt >= 0.8,
          fmt("inclusion estimate vs reference: Cal. r = %.3f%s (|r| <= 0.5), GT-phi r = %.3f (>= 0.8)", r_cal,
              cal_note.c_str(), r_gt)};
}

Outcome depth_decorrelation(const fs::path& work) {
  const auto& curve = quantification(work).train.curve;
  const auto at = [&](double d) {
    for (const auto& c : curve)
      if (c.depth_mm == d) return c;
    return DepthCorrelation{d, std::numeric_limits<double>::quiet_NaN(), 0};
  };
  const auto shallow = at(1.0), deep = at(13.0);
  std::string all;
  for (const auto& c : curve) all += fmt(" %.0f:%.2f", c.depth_mm, c.pearson_r);
  return {shallow.n_phantoms >= 10 && shallow.pearson_r >= 0.9 && deep.pearson_r <= 0.5,
          fmt("%zu phantoms, r(1 mm) = %.3f (>= 0.9), r(13 mm) = %.3f (<= 0.5); curve%s", shallow.n_phantoms,
              shallow.pearson_r, deep.pearson_r, all.c_str())};
}

// 9 ------------------------------------------------------------------------

Outcome adding_doubling() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) {
      const double mua = 0.005 * std::pow(0.4 / 0.005, i / 4.0);  // 0.05..4 /cm, log spaced
      const double musp = 0.5 + 0.25 * j;                          // 5..15 /cm
      const auto r = ad_inverse(ad_forward({mua, musp, 0.7, 1.4, 3.0}), 3.0, 0.7, 1.4);
      worst = std::max({worst, std::abs(r.mu_a - mua) / mua, std::abs(r.mu_s_prime - musp) / musp});
    }
  const double n = 1.4, rf = std::pow((n - 1) / (n + 1), 2);
  const auto clear = ad_forward({0.0, 0.0, 0.7, 1.0, 3.0});
  const auto fresnel = ad_forward({0.0, 0.0, 0.7, n, 3.0});
  const auto absorber = ad_forward({1.0 / 3.0, 0.0, 0.7, 1.0, 3.0});
  const double limit = std::max({std::abs(clear.R), std::abs(clear.T - 1.0), std::abs(fresnel.R - 2 * rf / (1 + rf)),
                                 std::abs(fresnel.T - (1 - rf) / (1 + rf)), std::abs(absorber.R),
                                 std::abs(absorber.T - std::exp(-1.0))});
  const double secs = seconds_since(t0);
  return {worst <= 0.02 && limit <= 1e-3 && secs < 60.0,
          fmt("5x5 round trip worst rel err %.2e (<= 0.02); clear/Fresnel/Beer-Lambert limits worst %.2e (<= 1e-3); "
              "%.1f s (< 60 s)",
              worst, limit, secs)};
}

// 10 -----------------------------------------------------------------------

Outcome thickness_error() {
  const auto e = propagate_thickness_error({0.02, 1.0, 0.7, 1.4, 3.0}, 0.025);
  const double v = std::abs(e.mu_a_rel);
  return {v >= 0.02 && v <= 0.10,
          fmt("2.5%% thickness error -> mu_a error %.2f%% (band 2-10%%), mu_s' error %.2f%%", 100 * v,
              100 * std::abs(e.mu_s_prime_rel))};
}

// 11 -----------------------------------------------------------------------

Outcome metric_oracles() {
  // gCNR of unit Gaussians two sigma apart: 1 - 2 Phi(-1)
  RngStream ra(3, 0), rb(4, 0);
  std::vector<double> a(100000), b(100000);
  for (auto& v : a) v = ra.normal();
  for (auto& v : b) v = 2.0 + rb.normal();
  const double g_exp = 1.0 - std::erfc(1.0 / std::numbers::sqrt2);
  const double g_err = std::abs(gcnr(a, b) - g_exp);

  // Mann-Whitney: every split of ranks 1..na+nb for 1 <= na, nb <= 8. The
  // exact p depends only on U, so it is computed once per U value.
  double worst_all = 0.0, worst_ge5 = 0.0;
  std::size_t worst_na = 0, worst_nb = 0;
  for (std::size_t na = 1; na <= 8; ++na)
    for (std::size_t nb = 1; nb <= 8; ++nb) {
      const std::size_t n = na + nb;
      std::vector<double> exact_by_u(na * nb + 1, -1.0);
      for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
        if (static_cast<std::size_t>(std::popcount(mask)) != na) continue;
        std::vector<double> xa, xb;
        for (std::size_t i = 0; i < n; ++i) (mask >> i & 1u ? xa : xb).push_back(static_cast<double>(i));
        const auto u = static_cast<std::size_t>(mann_whitney_u(xa, xb).U);
        if (exact_by_u[u] < 0.0) exact_by_u[u] = mann_whitney_p_exact(xa, xb);
        const double d = std::abs(mann_whitney_p_normal(xa, xb) - exact_by_u[u]);
        if (d > worst_all) {
          worst_all = d;
          worst_na = na;
          worst_nb = nb;
        }
        if (na >= 5 && nb >= 5) worst_ge5 = std::max(worst_ge5, d);
      }
    }

  // Pearson fixture against the single-pass formula
  const std::vector<double> x{0.3, 1.1, 2.4, 2.9, 4.2, 5.5, 6.1, 7.7, 8.2, 9.6};
  const std::vector<double> y{1.2, 0.7, 3.1, 2.2, 5.9, 4.4, 7.3, 6.6, 9.9, 8.1};
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  const double m = static_cast<double>(x.size());
  const double oracle = (m * sxy - sx * sy) / std::sqrt((m * sxx - sx * sx) * (m * syy - sy * sy));
  const double p_err = std::abs(pearson_r(x, y) - oracle);

  return {g_err <= 0.01 && worst_all <= 0.02 && p_err <= 1e-12,
          fmt("gCNR |err| %.4f (<= 0.01); Mann-Whitney normal vs exact worst %.3f at n = %zu vs %zu over all "
              "sizes <= 8 (<= 0.02), worst %.4f when both >= 5; Pearson |err| %.1e (<= 1e-12)",
              g_err, worst_all, worst_na, worst_nb, worst_ge5, p_err)};
}

// 12 -----------------------------------------------------------------------

Outcome unmixing() {
  const std::vector<double> wls{750.0, 800.0, 850.0};
  const auto basis = load_hemoglobin_basis().select(wls);
  auto mix = [&](double co, double cd) {
    std::vector<double> mu(wls.size());
    for (std::size_t i = 0; i < wls.size(); ++i) mu[i] = co * basis.eps_hbo2[i] + cd * basis.eps_hb[i];
    return mu;
  };
  const double pure = std::max(std::abs(unmix_so2(mix(1.0, 0.0), basis) - 1.0), std::abs(unmix_so2(mix(0.0, 1.0), basis)));
  RngStream r(31, 0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double co = r.uniform(0.05, 1.0), cd = r.uniform(0.05, 1.0);
    auto mu = mix(co, cd);
    for (auto& v : mu) v *= 1.0 + 1e-3 * r.normal();
    worst = std::max(worst, std::abs(unmix_so2(mu, basis) - co / (co + cd)));
  }
  return {worst <= 0.01 && pure <= 1e-12,
          fmt("1000 mixtures at 0.1%% noise: worst |sO2 err| %.4f (<= 0.01); pure cases |err| %.1e (<= 1e-12)", worst,
              pure)};
}

std::set<int> parse_list(const std::string& s) {
  std::set<int> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');)
    if (!tok.empty()) out.insert(std::stoi(tok));
  return out;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"qpat acceptance suite"};
  std::string work = (fs::temp_directory_path() / "qpat_acceptance").string();
  std::string only, known;
  app.add_option("--work", work, "directory for the end-to-end pipeline runs (reused between invocations)");
  app.add_option("--only", only, "comma separated criteria to run");
  app.add_option("--known-fail", known, "comma separated criteria whose FAIL does not count in the exit status");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"Beer-Lambert pure absorber", beer_lambert},
      {"Monte Carlo energy conservation", energy_conservation},
      {"Henyey-Greenstein first moment", hg_moment},
      {"acoustic wavefront speed and PML", acoustic_speed_and_pml},
      {"DAS point-source localization", das_localization},
      {"GT-phi end-to-end quantification", [&] { return gtphi_quantification(work); }},
      {"Cal. fails at depth, GT-phi tracks", [&] { return cal_fails_at_depth(work); }},
      {"depth decorrelation scenario", [&] { return depth_decorrelation(work); }},
      {"adding-doubling round trip and limits", adding_doubling},
      {"thickness error propagation", thickness_error},
      {"metric oracles", metric_oracles},
      {"spectral unmixing", unmixing},
  };
  const auto selected = parse_list(only);
  const auto tolerated = parse_list(known);

  int counted = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const bool excused = !o.pass && tolerated.count(id);
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << id << "  " << criteria[i].first << ": "
              << o.detail << (excused ? "  [known failure]" : "") << std::endl;
    if (!o.pass && !excused) ++counted;
  }
  return counted;
}
