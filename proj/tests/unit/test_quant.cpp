#include <doctest.h>

#include <cmath>
#include <random>

#include "qpat/quant.hpp"
#include "qpat/rng.hpp"

using namespace qpat;

namespace {

// Disc phantom on a 64x64 grid: background label 1 inside radius 12 mm,
// couplant outside.
Image2D<std::uint8_t> disc_labels(double radius = 12.0) {
  Image2D<std::uint8_t> l(PlaneGrid::centered(64, 64, 0.5));
  for (std::size_t j = 0; j < 64; ++j)
    for (std::size_t i = 0; i < 64; ++i) l.at(i, j) = std::hypot(l.grid.x(i), l.grid.y(j)) < radius ? 1 : 0;
  return l;
}

CalibrationSample linear_sample(double mu_a, double slope, double intercept, std::uint64_t seed) {
  CalibrationSample s;
  s.labels = disc_labels();
  s.signal = Image2D<double>(s.labels.grid);
  RngStream r(seed, 0);
  // every background pixel obeys the map; the couplant is random clutter
  for (std::size_t v = 0; v < s.signal.data.size(); ++v)
    s.signal.data[v] = s.labels.data[v] == 1 ? slope * mu_a + intercept : r.uniform(0, 1e4);
  s.reference_mu_a = {0.0, mu_a};
  return s;
}

} // namespace

TEST_CASE("fit_linear_calibration recovers exact linear data") {
  std::vector<CalibrationSample> set;
  for (int k = 0; k < 5; ++k) set.push_back(linear_sample(0.2 + 0.7 * k, 1485.0, 313.0, k));
  const auto m = fit_linear_calibration(set, 0.02);
  CHECK(m.slope == doctest::Approx(1485.0).epsilon(1e-10));
  CHECK(m.intercept == doctest::Approx(313.0).epsilon(1e-10));
  CHECK(m.fit_r == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<CalibrationSample> ident;
  for (int k = 0; k < 4; ++k) ident.push_back(linear_sample(0.5 * (k + 1), 1.0, 0.0, 10 + k));
  const auto mi = fit_linear_calibration(ident);
  CHECK(mi.slope == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(mi.intercept) < 1e-12);
}

TEST_CASE("fit_linear_calibration approaches the OLS slope as noise vanishes") {
  for (double sigma : {1e-1, 1e-3, 1e-6}) {
    std::vector<CalibrationSample> set;
    for (int k = 0; k < 6; ++k) {
      auto s = linear_sample(0.3 * (k + 1), 2.0, 0.0, k);
      RngStream r(100 + k, 0);
      for (std::size_t v = 0; v < s.signal.data.size(); ++v)
        if (s.labels.data[v] == 1) s.signal.data[v] += sigma * r.normal();
      set.push_back(s);
    }
    const auto m = fit_linear_calibration(set);
    CHECK(std::abs(m.slope - 2.0) < 20.0 * sigma);
  }
}

TEST_CASE("fit_linear_calibration uses only the brightest background pixels") {
  auto s = linear_sample(1.0, 10.0, 0.0, 1);
  // darken most of the background; the brightest 2% keep the true relation
  std::size_t n_bg = 0;
  for (auto l : s.labels.data) n_bg += l == 1;
  const std::size_t keep = static_cast<std::size_t>(std::ceil(0.02 * n_bg));
  std::size_t seen = 0;
  for (std::size_t v = 0; v < s.signal.data.size(); ++v)
    if (s.labels.data[v] == 1 && seen++ >= keep) s.signal.data[v] = 0.1;
  const auto pts = brightest_background(s, 0.02);
  CHECK(pts.size() == keep);
  for (const auto& [sig, ref] : pts) {
    CHECK(sig == 10.0);
    CHECK(ref == 1.0);
  }
}

TEST_CASE("degenerate calibration sets are rejected") {
  std::vector<CalibrationSample> same{linear_sample(1.0, 3.0, 1.0, 1), linear_sample(1.0, 3.0, 1.0, 2)};
  CHECK_THROWS_AS(fit_linear_calibration(same), NumericalError);
  CHECK_THROWS_AS(fit_linear_calibration(same, 0.0), ConfigError);
}

TEST_CASE("apply_calibration") {
  Image2D<double> s(PlaneGrid::centered(3, 1, 1.0));
  s.data = {313.0, 1798.0, 100.0};
  const auto mu = apply_calibration(s, LinearMap::paper_calibration());
  CHECK(mu.data[0] == 0.0);
  CHECK(mu.data[1] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mu.data[2] == 0.0);  // clamped

  // identity on mu_a >= 0
  RngStream r(4, 4);
  const LinearMap m{37.5, -2.0, 1.0};
  Image2D<double> truth(PlaneGrid::centered(16, 16, 1.0)), sig(truth.grid);
  for (std::size_t v = 0; v < truth.data.size(); ++v) {
    truth.data[v] = r.uniform(0.0, 5.0);
    sig.data[v] = m.slope * truth.data[v] + m.intercept;
  }
  const auto back = apply_calibration(sig, m);
  for (std::size_t v = 0; v < truth.data.size(); ++v) CHECK(back.data[v] == doctest::Approx(truth.data[v]).epsilon(1e-12));
  CHECK_THROWS_AS(apply_calibration(s, LinearMap{0.0, 1.0, 0.0}), ConfigError);
}

TEST_CASE("fluence_correct") {
  const auto g = PlaneGrid::centered(2, 1, 1.0);
  Image2D<double> s(g), phi(g, 1.0);
  s.data = {832.0, 8801.0 + 832.0};
  const auto out = fluence_correct(s, phi, LinearMap::paper_fluence_corrected());
  CHECK(out.mu_a.data[0] == 0.0);
  CHECK(out.mu_a.data[1] == doctest::Approx(1.0));

  // uniform phi = 1 reduces to apply_calibration
  const auto cal = apply_calibration(s, LinearMap::paper_fluence_corrected());
  CHECK(out.mu_a.data == cal.data);

  // zero fluence everywhere is a domain error
  CHECK_THROWS_AS(fluence_correct(s, Image2D<double>(g, 0.0), LinearMap::paper_fluence_corrected()), DomainError);
}

TEST_CASE("signal = mu_a * phi is inverted exactly after fitting") {
  std::vector<CalibrationSample> train;
  RngStream r(12, 0);
  for (int k = 0; k < 4; ++k) {
    CalibrationSample s;
    s.labels = disc_labels();
    const double mu = 0.4 + 0.9 * k;
    Image2D<double> phi(s.labels.grid), sig(s.labels.grid);
    for (std::size_t j = 0; j < 64; ++j)
      for (std::size_t i = 0; i < 64; ++i) {
        const double rr = std::hypot(phi.grid.x(i), phi.grid.y(j));
        phi.at(i, j) = std::exp(-0.05 * mu * (12.0 - std::min(rr, 12.0))) + 0.01;
        sig.at(i, j) = mu * phi.at(i, j);
      }
    s.signal = fluence_normalize(sig, phi);
    s.reference_mu_a = {0.0, mu};
    train.push_back(s);
  }
  const auto map = fit_linear_calibration(train);
  // a new field of mu_a values
  Image2D<double> mu(PlaneGrid::centered(64, 64, 0.5)), phi(mu.grid), sig(mu.grid);
  for (std::size_t v = 0; v < mu.data.size(); ++v) {
    mu.data[v] = r.uniform(0.05, 4.0);
    phi.data[v] = r.uniform(0.01, 1.0);
    sig.data[v] = mu.data[v] * phi.data[v];
  }
  const auto est = fluence_correct(sig, phi, map);
  for (std::size_t v = 0; v < mu.data.size(); ++v) CHECK(std::abs(est.mu_a.data[v] - mu.data[v]) < 1e-6);

  SUBCASE("global rescaling of phi is absorbed by the refit") {
    std::vector<CalibrationSample> scaled = train;
    for (auto& s : scaled)
      for (auto& x : s.signal.data) x /= 7.0;  // signal / (7 phi)
    const auto map7 = fit_linear_calibration(scaled);
    Image2D<double> phi7 = phi;
    for (auto& x : phi7.data) x *= 7.0;
    const auto est7 = fluence_correct(sig, phi7, map7);
    for (std::size_t v = 0; v < mu.data.size(); ++v)
      CHECK(est7.mu_a.data[v] == doctest::Approx(est.mu_a.data[v]).epsilon(1e-9));
  }
}

TEST_CASE("distance transform against brute force") {
  Image2D<std::uint8_t> m(PlaneGrid{21, 17, 0.3, 0.5, 0.0, 0.0});
  RngStream r(8, 0);
  for (auto& v : m.data) v = r.uniform() < 0.8;
  const auto d = distance_to_outside(m);
  for (std::size_t j = 0; j < 17; ++j)
    for (std::size_t i = 0; i < 21; ++i) {
      double best = INFINITY;
      for (std::size_t q = 0; q < 17; ++q)
        for (std::size_t p = 0; p < 21; ++p)
          if (!m.at(p, q)) best = std::min(best, std::hypot((double(i) - double(p)) * 0.3, (double(j) - double(q)) * 0.5));
      if (!m.at(i, j)) best = 0.0;
      CHECK(d.at(i, j) == doctest::Approx(best).epsilon(1e-12));
    }
}

TEST_CASE("aggregate_region") {
  const auto g = PlaneGrid::centered(80, 80, 0.1);
  Image2D<std::uint8_t> mask(g);
  for (std::size_t j = 0; j < 80; ++j)
    for (std::size_t i = 0; i < 80; ++i) mask.at(i, j) = std::hypot(g.x(i), g.y(j)) < 3.0;

  SUBCASE("constant image") {
    Image2D<double> img(g, 2.5);
    CHECK(aggregate_region(img, {mask, RegionKind::background, 1.28}) == 2.5);
    CHECK(aggregate_region(img, {mask, RegionKind::inclusion, 1.28}) == 2.5);
  }
  SUBCASE("rim and core") {
    const auto depth = inward_depth(mask);
    Image2D<double> img(g, 0.0);
    for (std::size_t v = 0; v < img.data.size(); ++v)
      if (mask.data[v]) img.data[v] = depth.data[v] <= 1.28 ? 1.0 : 5.0;
    CHECK(aggregate_region(img, {mask, RegionKind::inclusion, 1.28}) == 1.0);
  }
  SUBCASE("checkerboard background") {
    Image2D<double> img(g);
    Image2D<std::uint8_t> all(g, 1);
    for (std::size_t j = 0; j < 80; ++j)
      for (std::size_t i = 0; i < 80; ++i) img.at(i, j) = (i + j) % 2 ? 2.0 : 0.0;
    CHECK(aggregate_region(img, {all, RegionKind::background, 1.28}) == doctest::Approx(1.0));
  }
  SUBCASE("permutation invariance and monotonicity") {
    RngStream r(2, 2);
    Image2D<double> img(g);
    for (auto& x : img.data) x = r.uniform(0, 3);
    for (auto kind : {RegionKind::background, RegionKind::inclusion}) {
      const double base = aggregate_region(img, {mask, kind, 1.28});
      // permute values among the pixels that the aggregate uses
      const auto depth = inward_depth(mask);
      std::vector<std::size_t> idx;
      for (std::size_t v = 0; v < img.data.size(); ++v)
        if (mask.data[v] && (kind == RegionKind::background || depth.data[v] <= 1.28)) idx.push_back(v);
      std::vector<double> vals;
      for (auto v : idx) vals.push_back(img.data[v]);
      std::mt19937 gen(5);
      std::shuffle(vals.begin(), vals.end(), gen);
      Image2D<double> perm = img;
      for (std::size_t k = 0; k < idx.size(); ++k) perm.data[idx[k]] = vals[k];
      CHECK(aggregate_region(perm, {mask, kind, 1.28}) == doctest::Approx(base).epsilon(1e-12));
      Image2D<double> up = img;
      for (auto& x : up.data) x += 0.01;
      CHECK(aggregate_region(up, {mask, kind, 1.28}) > base);
    }
  }
  SUBCASE("empty mask") {
    Image2D<double> img(g, 1.0);
    CHECK_THROWS_AS(aggregate_region(img, {Image2D<std::uint8_t>(g, 0), RegionKind::background, 1.28}), DomainError);
  }
}

TEST_CASE("linear unmixing") {
  const auto full = load_hemoglobin_basis();
  const std::vector<double> wls{750.0, 800.0, 850.0};
  const auto basis = full.select(wls);

  auto mix = [&](double co, double cd) {
    std::vector<double> mu(wls.size());
    for (std::size_t i = 0; i < wls.size(); ++i) mu[i] = co * basis.eps_hbo2[i] + cd * basis.eps_hb[i];
    return mu;
  };
  CHECK(unmix_so2(mix(1.0, 0.0), basis) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(unmix_so2(mix(0.0, 2.0), basis) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
  CHECK(std::abs(unmix_so2(mix(0.5, 0.5), basis) - 0.5) < 1e-6);
  CHECK(std::isnan(unmix_so2(std::vector<double>(3, 0.0), basis)));

  RngStream r(31, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const double co = r.uniform(0.05, 1.0), cd = r.uniform(0.05, 1.0);
    auto mu = mix(co, cd);
    for (auto& x : mu) x *= 1.0 + 1e-3 * r.normal();
    CHECK(std::abs(unmix_so2(mu, basis) - co / (co + cd)) < 0.01);
  }

  // scale invariance of the image form
  std::vector<Image2D<double>> imgs, scaled;
  const auto g = PlaneGrid::centered(8, 8, 1.0);
  for (std::size_t w = 0; w < wls.size(); ++w) {
    imgs.emplace_back(g);
    scaled.emplace_back(g);
  }
  for (std::size_t v = 0; v < g.size(); ++v) {
    const auto mu = mix(r.uniform(0, 1), r.uniform(0, 1));
    for (std::size_t w = 0; w < wls.size(); ++w) {
      imgs[w].data[v] = mu[w];
      scaled[w].data[v] = 3.7 * mu[w];
    }
  }
  const auto a = linear_unmix_so2(imgs, basis), b = linear_unmix_so2(scaled, basis);
  for (std::size_t v = 0; v < g.size(); ++v) CHECK(a.so2.data[v] == doctest::Approx(b.so2.data[v]).epsilon(1e-12));

  CHECK_THROWS_AS(full.select(std::vector<double>{751.0}), ConfigError);
  CHECK_THROWS_AS(linear_unmix_so2(std::span<const Image2D<double>>(imgs.data(), 2), basis), DimensionError);
}
