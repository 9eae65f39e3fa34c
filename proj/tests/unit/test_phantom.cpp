#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

#include "qpat/io.hpp"
#include "qpat/phantom.hpp"

using namespace qpat;

namespace {

PhantomSpec plain_cylinder(double radius = 13.75) {
  PhantomSpec s;
  s.background_shape = ShapePrimitive::cylinder({}, radius, 40.0);
  s.materials.push_back(water_spectrum());
  s.materials.push_back(MaterialSpectrum::flat("background", OpticalProperties::from_reduced(0.01, 1.0, 0.7, 1.4)));
  return s;
}

std::size_t count_label(const Volume<std::uint8_t>& v, std::size_t k, std::uint8_t label) {
  const auto img = slice_z(v, k);
  std::size_t n = 0;
  for (auto x : img.data) n += x == label;
  return n;
}

} // namespace

TEST_CASE("rasterize: plain cylinder carries two labels") {
  const auto spec = plain_cylinder();
  const auto lm = rasterize(spec, VoxelGrid::centered_cube(80, 0.5));
  std::set<int> seen(lm.labels.data.begin(), lm.labels.data.end());
  CHECK(seen == std::set<int>{LabelMap::couplant, LabelMap::background});
  CHECK(lm.materials == std::vector<std::string>{"water", "background"});
}

TEST_CASE("rasterize: voxel count per slice matches the disc area") {
  const auto spec = plain_cylinder();
  const auto lm = rasterize(spec, VoxelGrid::centered_cube(160, 0.25));
  const double expected = std::numbers::pi * std::pow(13.75 / 0.25, 2);  // ~9503
  for (std::size_t k : {0u, 40u, 80u, 159u})
    CHECK(std::abs(static_cast<double>(count_label(lm.labels, k, 1)) - expected) < 0.01 * expected);
}

TEST_CASE("rasterize: overlapping inclusions, last listed wins") {
  auto spec = plain_cylinder();
  spec.materials.push_back(MaterialSpectrum::flat("a", OpticalProperties::from_reduced(0.1, 1.0, 0.7, 1.4)));
  spec.materials.push_back(MaterialSpectrum::flat("b", OpticalProperties::from_reduced(0.2, 1.0, 0.7, 1.4)));
  spec.inclusions.push_back({ShapePrimitive::cylinder({-1.0, 0.0, 0.0}, 3.0, 40.0), "a"});
  spec.inclusions.push_back({ShapePrimitive::cylinder({1.0, 0.0, 0.0}, 3.0, 40.0), "b"});
  const auto grid = VoxelGrid::centered_cube(64, 0.5);
  const auto lm = rasterize(spec, grid);
  // voxel nearest the origin lies in both discs
  const std::size_t c = 32;
  CHECK(lm.labels.at(c, c, c) == LabelMap::inclusion(1));
  CHECK(lm.labels.at(c - 6, c, c) == LabelMap::inclusion(0));  // x = -2.75: only in "a"
}

TEST_CASE("rasterize: parallel and serial agree, and match rasterize_plane") {
  const auto spec = sample_phantom(17, PropertyRanges{}, water_spectrum());
  const auto grid = VoxelGrid::centered_cube(48, 0.6);
  const auto a = rasterize(spec, grid), b = serial::rasterize(spec, grid);
  CHECK(a.labels.data == b.labels.data);
  const std::size_t k = 24;
  const auto plane = rasterize_plane(spec, slice_z(a.labels, k).grid, grid.center(0, 0, k).z);
  CHECK(plane.data == slice_z(a.labels, k).data);
}

TEST_CASE("rasterize is resolution consistent") {
  PhantomSpec spec = plain_cylinder(10.0);
  spec.materials.push_back(MaterialSpectrum::flat("s", OpticalProperties::from_reduced(0.1, 1.0, 0.7, 1.4)));
  spec.inclusions.push_back({ShapePrimitive::sphere({1.3, -2.1, 0.7}, 4.2), "s"});
  spec.inclusions.push_back({ShapePrimitive::cylinder({-4.0, 3.0, 0.0}, 2.5, 3.0, {1.0, 1.0, 0.5}), "s"});
  auto volume_of = [&](double h, std::uint8_t label) {
    const auto grid = VoxelGrid::centered_cube(static_cast<std::size_t>(std::lround(32.0 / h)), h);
    const auto lm = rasterize(spec, grid);
    std::size_t n = 0;
    for (auto v : lm.labels.data) n += v == label;
    return static_cast<double>(n) * grid.voxel_volume();
  };
  for (std::uint8_t label : {std::uint8_t{1}, LabelMap::inclusion(0), LabelMap::inclusion(1)}) {
    const double coarse = volume_of(0.5, label), fine = volume_of(0.25, label);
    CAPTURE(int(label));
    CHECK(std::abs(coarse - fine) < 0.02 * fine);
  }
}

TEST_CASE("assign_properties interpolates linearly in wavelength") {
  MaterialSpectrum m;
  m.name = "m";
  m.samples = {{700.0, {0.01, 1.0, 0.7, 1.4}}, {710.0, {0.02, 2.0, 0.7, 1.4}}};
  CHECK(m.at(700.0).mu_a == 0.01);
  CHECK(m.at(710.0).mu_s == 2.0);
  CHECK(m.at(705.0).mu_a == doctest::Approx(0.015));
  CHECK_THROWS_AS(m.at(650.0), DomainError);

  const auto water = water_spectrum();
  CHECK(water.at(800.0).mu_a == doctest::Approx(0.0196 / 10.0));
  CHECK(water.at(800.0).mu_s == 0.0);
  CHECK(water.acoustic.gruneisen == 1.0);

  auto spec = plain_cylinder();
  const auto lm = rasterize(spec, VoxelGrid::centered_cube(32, 1.0));
  const auto props = assign_properties(lm, spec.materials, 800.0);
  for (std::size_t v = 0; v < lm.labels.data.size(); ++v) {
    if (lm.labels.data[v] == LabelMap::background) {
      CHECK(props.mu_a.data[v] == doctest::Approx(0.01));
      CHECK(props.mu_s.data[v] == doctest::Approx(1.0 / 0.3));
    } else {
      CHECK(props.mu_s.data[v] == 0.0);
    }
    CHECK(props.gruneisen.data[v] == 1.0f);
  }
}

TEST_CASE("assign_properties preserves order between materials") {
  MaterialSpectrum a, b;
  a.name = "a";
  b.name = "b";
  a.samples = {{700.0, {0.3, 1.0, 0.7, 1.4}}, {750.0, {0.1, 1.0, 0.7, 1.4}}};
  b.samples = {{700.0, {0.2, 1.0, 0.7, 1.4}}, {750.0, {0.05, 1.0, 0.7, 1.4}}};
  for (double wl = 700.0; wl <= 750.0; wl += 1.0) CHECK(a.at(wl).mu_a >= b.at(wl).mu_a);
}

TEST_CASE("sample_phantom respects its ranges and is reproducible") {
  const auto water = water_spectrum();
  const PropertyRanges r;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto s = sample_phantom(seed, r, water);
    for (const auto& m : s.materials) {
      if (m.name == "water") continue;
      const auto p = m.at(800.0);
      CHECK(p.mu_a * 10.0 >= 0.05 - 1e-12);
      CHECK(p.mu_a * 10.0 <= 4.0 + 1e-12);
      CHECK(p.mu_s_prime() * 10.0 >= 5.0 - 1e-9);
      CHECK(p.mu_s_prime() * 10.0 <= 15.0 + 1e-9);
    }
    for (const auto& inc : s.inclusions) {
      const double reach = std::hypot(inc.shape.center.x, inc.shape.center.y) + inc.shape.radius;
      CHECK(reach <= r.background_radius_mm - r.placement_margin_mm + 1e-9);
    }
    CHECK(s.inclusions.size() <= 3u);
  }
  const auto a = sample_phantom(42, r, water), b = sample_phantom(42, r, water);
  CHECK(to_json(a) == to_json(b));
}

TEST_CASE("phantom spec JSON round trip and validation") {
  const auto s = sample_phantom(9, PropertyRanges{}, water_spectrum());
  const auto path = std::filesystem::temp_directory_path() / "qpat_test_phantom.json";
  save_phantom(path, s);
  const auto back = load_phantom(path);
  CHECK(to_json(back) == to_json(s));
  std::filesystem::remove(path);

  auto j = to_json(s);
  j["inclusions"].push_back({{"shape", {{"kind", "sphere"}, {"center_mm", {0, 0, 0}}, {"radius_mm", 1.0}}},
                             {"material", "no-such-material"}});
  CHECK_THROWS_AS(phantom_from_json(j), ConfigError);

  PhantomSpec bad = plain_cylinder();
  bad.materials.push_back(MaterialSpectrum::flat("x", OpticalProperties::from_reduced(0.1, 1.0, 0.7, 1.4)));
  bad.inclusions.push_back({ShapePrimitive::sphere({20.0, 0.0, 0.0}, 2.0), "x"});  // outside the background
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("volume files round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "qpat_test_io";
  std::filesystem::create_directories(dir);
  const auto spec = plain_cylinder();
  const auto lm = rasterize(spec, VoxelGrid::centered_cube(16, 2.0));
  io::write_labels(dir / "labels.bin", lm.labels);
  const auto back = io::read_volume(dir / "labels.bin");
  CHECK(back.grid == lm.labels.grid);
  for (std::size_t v = 0; v < back.values.size(); ++v) CHECK(back.values[v] == lm.labels.data[v]);
  CHECK(back.sidecar.at("dtype") == "uint8");
  CHECK(back.sidecar.at("order") == "C");
  std::filesystem::remove_all(dir);
}
