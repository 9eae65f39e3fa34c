#include "qpat/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "qpat/io.hpp"
#include "qpat/rng.hpp"

#ifndef QPAT_DATA_DIR
#define QPAT_DATA_DIR "data"
#endif

namespace qpat {

namespace {

bool finite_all(std::initializer_list<double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

} // namespace

void OpticalProperties::validate() const {
  if (!finite_all({mu_a, mu_s, g, n})) throw ConfigError("optical properties must be finite");
  if (mu_a < 0.0) throw ConfigError("mu_a must be >= 0");
  if (mu_s < 0.0) throw ConfigError("mu_s must be >= 0");
  if (!(g > -1.0 && g < 1.0)) throw ConfigError("anisotropy g must lie in (-1, 1)");
  if (n < 1.0) throw ConfigError("refractive index must be >= 1");
}

void AcousticProperties::validate() const {
  if (!(sound_speed > 0.0) || !(density > 0.0) || !(gruneisen > 0.0))
    throw ConfigError("acoustic properties must be strictly positive");
}

void MaterialSpectrum::validate() const {
  if (name.empty()) throw ConfigError("material without a name");
  if (samples.empty()) throw ConfigError("material '" + name + "' has no spectrum samples");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i].optical.validate();
    if (i > 0 && !(samples[i].wavelength_nm > samples[i - 1].wavelength_nm))
      throw ConfigError("material '" + name + "': wavelengths must be strictly increasing");
  }
  acoustic.validate();
}

OpticalProperties MaterialSpectrum::at(double wavelength_nm) const {
  if (samples.empty()) throw ConfigError("material '" + name + "' has no spectrum samples");
  if (wavelength_nm < min_wavelength() || wavelength_nm > max_wavelength()) {
    std::ostringstream os;
    os << "wavelength " << wavelength_nm << " nm outside the sampled range [" << min_wavelength() << ", "
       << max_wavelength() << "] of material '" << name << "'";
    throw DomainError(os.str());
  }
  auto hi = std::lower_bound(samples.begin(), samples.end(), wavelength_nm,
                             [](const SpectrumSample& s, double w) { return s.wavelength_nm < w; });
  if (hi->wavelength_nm == wavelength_nm) return hi->optical;
  auto lo = hi - 1;
  const double t = (wavelength_nm - lo->wavelength_nm) / (hi->wavelength_nm - lo->wavelength_nm);
  auto lerp = [t](double a, double b) { return a + t * (b - a); };
  const auto& a = lo->optical;
  const auto& b = hi->optical;
  return {lerp(a.mu_a, b.mu_a), lerp(a.mu_s, b.mu_s), lerp(a.g, b.g), lerp(a.n, b.n)};
}

MaterialSpectrum MaterialSpectrum::flat(std::string name, const OpticalProperties& props, double lo_nm,
                                        double hi_nm, double step_nm) {
  MaterialSpectrum m;
  m.name = std::move(name);
  const int steps = static_cast<int>(std::lround((hi_nm - lo_nm) / step_nm));
  for (int i = 0; i <= steps; ++i) m.samples.push_back({lo_nm + i * step_nm, props});
  return m;
}

// Shapes ----------------------------------------------------------------------

bool ShapePrimitive::contains(const Vec3& p) const {
  const Vec3 d = p - center;
  if (kind == ShapeKind::sphere) return d.dot(d) <= radius * radius;
  const double along = d.dot(axis);
  if (std::abs(along) > half_length) return false;
  const Vec3 radial = d - axis * along;
  return radial.dot(radial) <= radius * radius;
}

void ShapePrimitive::validate() const {
  if (!(radius > 0.0)) throw ConfigError("shape radius must be positive");
  if (kind == ShapeKind::cylinder) {
    if (std::abs(axis.norm() - 1.0) > 1e-9) throw ConfigError("cylinder axis must be a unit vector");
    if (!(half_length > 0.0)) throw ConfigError("cylinder half_length must be positive");
  }
}

ShapePrimitive ShapePrimitive::cylinder(Vec3 c, double r, double half_length, Vec3 axis) {
  return {ShapeKind::cylinder, c, r, axis.normalized(), half_length};
}

ShapePrimitive ShapePrimitive::sphere(Vec3 c, double r) { return {ShapeKind::sphere, c, r, {0, 0, 1}, r}; }

namespace {

/// True when `inner` lies entirely inside `outer`. Exact for the shape pairs
/// the sampler produces (coaxial cylinders, spheres); conservative otherwise.
bool shape_inside(const ShapePrimitive& inner, const ShapePrimitive& outer) {
  const Vec3 d = inner.center - outer.center;
  if (outer.kind == ShapeKind::sphere) {
    const double reach = inner.kind == ShapeKind::sphere
                             ? inner.radius
                             : std::sqrt(inner.radius * inner.radius + inner.half_length * inner.half_length);
    return d.norm() + reach <= outer.radius + 1e-9;
  }
  const double along = d.dot(outer.axis);
  const double radial = (d - outer.axis * along).norm();
  double axial_reach, radial_reach;
  if (inner.kind == ShapeKind::sphere) {
    axial_reach = radial_reach = inner.radius;
  } else {
    const double c = std::abs(inner.axis.dot(outer.axis));
    const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
    axial_reach = inner.half_length * c + inner.radius * s;
    radial_reach = inner.half_length * s + inner.radius * c;
  }
  return radial + radial_reach <= outer.radius + 1e-9 && std::abs(along) + axial_reach <= outer.half_length + 1e-9;
}

} // namespace

const MaterialSpectrum& PhantomSpec::material(const std::string& name) const {
  for (const auto& m : materials)
    if (m.name == name) return m;
  throw ConfigError("unresolved material name '" + name + "'");
}

void PhantomSpec::validate() const {
  for (const auto& m : materials) m.validate();
  background_shape.validate();
  material(background_material);
  material(couplant_material);
  for (std::size_t k = 0; k < inclusions.size(); ++k) {
    const auto& inc = inclusions[k];
    inc.shape.validate();
    material(inc.material);
    if (!shape_inside(inc.shape, background_shape))
      throw ConfigError("inclusion " + std::to_string(k) + " is not inside the background shape");
  }
  if (inclusions.size() > 253) throw ConfigError("at most 253 inclusions are supported");
}

// Rasterization ---------------------------------------------------------------

namespace {

std::uint8_t label_at(const PhantomSpec& spec, const Vec3& p) {
  for (std::size_t k = spec.inclusions.size(); k-- > 0;)
    if (spec.inclusions[k].shape.contains(p)) return LabelMap::inclusion(k);
  if (spec.background_shape.contains(p)) return LabelMap::background;
  return LabelMap::couplant;
}

LabelMap make_label_map(const PhantomSpec& spec, const VoxelGrid& grid) {
  spec.validate();
  grid.validate();
  LabelMap out;
  out.labels = Volume<std::uint8_t>(grid, LabelMap::couplant);
  out.materials.push_back(spec.couplant_material);
  out.materials.push_back(spec.background_material);
  for (const auto& inc : spec.inclusions) out.materials.push_back(inc.material);
  return out;
}

} // namespace

namespace serial {

LabelMap rasterize(const PhantomSpec& spec, const VoxelGrid& grid) {
  LabelMap out = make_label_map(spec, grid);
  for (std::size_t k = 0; k < grid.dims[2]; ++k)
    for (std::size_t j = 0; j < grid.dims[1]; ++j)
      for (std::size_t i = 0; i < grid.dims[0]; ++i) out.labels.at(i, j, k) = label_at(spec, grid.center(i, j, k));
  return out;
}

} // namespace serial

LabelMap rasterize(const PhantomSpec& spec, const VoxelGrid& grid) {
  LabelMap out = make_label_map(spec, grid);
  const auto nz = static_cast<std::ptrdiff_t>(grid.dims[2]);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t k = 0; k < nz; ++k)
    for (std::size_t j = 0; j < grid.dims[1]; ++j)
      for (std::size_t i = 0; i < grid.dims[0]; ++i)
        out.labels.at(i, j, static_cast<std::size_t>(k)) = label_at(spec, grid.center(i, j, static_cast<std::size_t>(k)));
  return out;
}

Image2D<std::uint8_t> rasterize_plane(const PhantomSpec& spec, const PlaneGrid& plane, double z_mm) {
  spec.validate();
  Image2D<std::uint8_t> out(plane, LabelMap::couplant);
  for (std::size_t j = 0; j < plane.ny; ++j)
    for (std::size_t i = 0; i < plane.nx; ++i) out.at(i, j) = label_at(spec, {plane.x(i), plane.y(j), z_mm});
  return out;
}

PropertyVolumes assign_properties(const LabelMap& labels, const std::vector<MaterialSpectrum>& materials,
                                  double wavelength_nm) {
  const std::size_t n_labels = labels.materials.size();
  std::vector<OpticalProperties> optical(n_labels);
  std::vector<AcousticProperties> acoustic(n_labels);
  for (std::size_t l = 0; l < n_labels; ++l) {
    auto it = std::find_if(materials.begin(), materials.end(),
                           [&](const MaterialSpectrum& m) { return m.name == labels.materials[l]; });
    if (it == materials.end()) throw ConfigError("unresolved material name '" + labels.materials[l] + "'");
    optical[l] = it->at(wavelength_nm);
    acoustic[l] = it->acoustic;
  }
  const auto& grid = labels.labels.grid;
  PropertyVolumes out{Volume<float>(grid), Volume<float>(grid), Volume<float>(grid), Volume<float>(grid),
                      Volume<float>(grid), Volume<float>(grid), Volume<float>(grid)};
  for (std::size_t v = 0; v < grid.size(); ++v) {
    const std::uint8_t l = labels.labels.data[v];
    if (l >= n_labels) throw ConfigError("label " + std::to_string(l) + " has no declared material");
    out.mu_a.data[v] = static_cast<float>(optical[l].mu_a);
    out.mu_s.data[v] = static_cast<float>(optical[l].mu_s);
    out.g.data[v] = static_cast<float>(optical[l].g);
    out.n.data[v] = static_cast<float>(optical[l].n);
    out.sound_speed.data[v] = static_cast<float>(acoustic[l].sound_speed);
    out.density.data[v] = static_cast<float>(acoustic[l].density);
    out.gruneisen.data[v] = static_cast<float>(acoustic[l].gruneisen);
  }
  return out;
}

// Sampling --------------------------------------------------------------------

void PropertyRanges::validate() const {
  auto ordered = [](double lo, double hi) { return lo > 0.0 && hi >= lo; };
  if (!ordered(mu_a_min_per_cm, mu_a_max_per_cm) || !ordered(mus_prime_min_per_cm, mus_prime_max_per_cm) ||
      !ordered(inclusion_radius_min_mm, inclusion_radius_max_mm))
    throw ConfigError("property ranges must be positive and ordered");
  if (min_inclusions < 0 || max_inclusions < min_inclusions) throw ConfigError("invalid inclusion count range");
  if (!(background_radius_mm > 0.0) || !(half_length_mm > 0.0)) throw ConfigError("invalid background geometry");
  if (!(g > -1.0 && g < 1.0) || n < 1.0) throw ConfigError("invalid g or n");
}

PhantomSpec sample_phantom(std::uint64_t seed, const PropertyRanges& ranges, const MaterialSpectrum& water) {
  ranges.validate();
  RngStream rng(seed, 0x9a4f0);

  auto draw_material = [&](std::string name) {
    const double mu_a = rng.uniform(ranges.mu_a_min_per_cm, ranges.mu_a_max_per_cm) / 10.0;
    const double mus_prime = rng.uniform(ranges.mus_prime_min_per_cm, ranges.mus_prime_max_per_cm) / 10.0;
    return MaterialSpectrum::flat(std::move(name),
                                  OpticalProperties::from_reduced(mu_a, mus_prime, ranges.g, ranges.n));
  };

  PhantomSpec spec;
  spec.seed = seed;
  spec.background_shape = ShapePrimitive::cylinder({}, ranges.background_radius_mm, ranges.half_length_mm);
  spec.background_material = "background";
  spec.couplant_material = water.name;
  spec.materials.push_back(water);
  spec.materials.push_back(draw_material("background"));

  const int span = ranges.max_inclusions - ranges.min_inclusions + 1;
  int wanted = ranges.min_inclusions + static_cast<int>(rng.next() % static_cast<std::uint64_t>(span));

  // Placement: inclusion centers uniform over the disc that keeps the whole
  // inclusion (plus margin) inside the background; pairwise gap >= margin.
  constexpr int max_attempts = 200;
  struct Disc {
    double x, y, r;
  };
  std::vector<Disc> placed;
  while (static_cast<int>(placed.size()) < wanted) {
    bool ok = false;
    for (int attempt = 0; attempt < max_attempts && !ok; ++attempt) {
      const double r = rng.uniform(ranges.inclusion_radius_min_mm, ranges.inclusion_radius_max_mm);
      const double reach = ranges.background_radius_mm - r - ranges.placement_margin_mm;
      if (reach < 0.0) continue;
      const double rho = reach * std::sqrt(rng.uniform());
      const double phi = 2.0 * std::numbers::pi * rng.uniform();
      const Disc d{rho * std::cos(phi), rho * std::sin(phi), r};
      ok = std::all_of(placed.begin(), placed.end(), [&](const Disc& o) {
        return std::hypot(d.x - o.x, d.y - o.y) >= d.r + o.r + ranges.placement_margin_mm;
      });
      if (ok) placed.push_back(d);
    }
    if (!ok) --wanted;  // crowded: settle for fewer inclusions
  }

  for (std::size_t k = 0; k < placed.size(); ++k) {
    const std::string name = "inclusion" + std::to_string(k + 1);
    spec.materials.push_back(draw_material(name));
    spec.inclusions.push_back(
        {ShapePrimitive::cylinder({placed[k].x, placed[k].y, 0.0}, placed[k].r, ranges.half_length_mm), name});
  }
  spec.validate();
  return spec;
}

// Reference spectra -----------------------------------------------------------

std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("QPAT_DATA_DIR")) return env;
  return QPAT_DATA_DIR;
}

std::vector<std::pair<double, double>> read_spectrum_csv(const std::filesystem::path& path) {
  const auto table = io::read_csv(path);
  if (table.header.size() < 2) throw IoError("spectrum CSV needs two columns: " + path.string());
  std::vector<std::pair<double, double>> out;
  for (const auto& row : table.rows) {
    if (row.size() < 2) throw IoError("malformed spectrum row in " + path.string());
    out.emplace_back(std::stod(row[0]), std::stod(row[1]));
  }
  return out;
}

MaterialSpectrum water_spectrum(const std::filesystem::path& csv) {
  MaterialSpectrum m;
  m.name = "water";
  for (const auto& [wl, mu_a_per_cm] : read_spectrum_csv(csv)) m.samples.push_back({wl, {mu_a_per_cm / 10.0, 0.0, 0.0, 1.33}});
  m.acoustic = {1.497, 1000.0, 1.0};
  m.validate();
  return m;
}

MaterialSpectrum water_spectrum() { return water_spectrum(default_data_dir() / "water_absorption.csv"); }

// Serialization ---------------------------------------------------------------

namespace {

using nlohmann::json;

json vec_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

Vec3 vec_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }))
      throw ConfigError(std::string("unknown key '") + it.key() + "' in " + where);
  }
}

json shape_json(const ShapePrimitive& s) {
  json j{{"kind", s.kind == ShapeKind::cylinder ? "cylinder" : "sphere"},
         {"center_mm", vec_json(s.center)},
         {"radius_mm", s.radius}};
  if (s.kind == ShapeKind::cylinder) {
    j["axis"] = vec_json(s.axis);
    j["half_length_mm"] = s.half_length;
  }
  return j;
}

ShapePrimitive shape_from(const json& j) {
  reject_unknown(j, {"kind", "center_mm", "radius_mm", "axis", "half_length_mm"}, "shape");
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "sphere") return ShapePrimitive::sphere(vec_from(j.at("center_mm")), j.at("radius_mm").get<double>());
  if (kind != "cylinder") throw ConfigError("unknown shape kind '" + kind + "'");
  return ShapePrimitive::cylinder(vec_from(j.at("center_mm")), j.at("radius_mm").get<double>(),
                                  j.at("half_length_mm").get<double>(), vec_from(j.value("axis", json{0, 0, 1})));
}

json material_json(const MaterialSpectrum& m) {
  json samples = json::array();
  for (const auto& s : m.samples)
    samples.push_back({{"wavelength_nm", s.wavelength_nm},
                       {"mu_a_per_mm", s.optical.mu_a},
                       {"mu_s_per_mm", s.optical.mu_s},
                       {"g", s.optical.g},
                       {"n", s.optical.n}});
  return {{"name", m.name},
          {"samples", samples},
          {"acoustic",
           {{"sound_speed_mm_per_us", m.acoustic.sound_speed},
            {"density_kg_per_m3", m.acoustic.density},
            {"gruneisen", m.acoustic.gruneisen}}}};
}

MaterialSpectrum material_from(const json& j) {
  reject_unknown(j, {"name", "samples", "acoustic"}, "material");
  MaterialSpectrum m;
  m.name = j.at("name").get<std::string>();
  for (const auto& s : j.at("samples")) {
    reject_unknown(s, {"wavelength_nm", "mu_a_per_mm", "mu_s_per_mm", "g", "n"}, "spectrum sample");
    m.samples.push_back({s.at("wavelength_nm").get<double>(),
                         {s.at("mu_a_per_mm").get<double>(), s.at("mu_s_per_mm").get<double>(),
                          s.value("g", 0.0), s.value("n", 1.0)}});
  }
  if (j.contains("acoustic")) {
    const auto& a = j["acoustic"];
    reject_unknown(a, {"sound_speed_mm_per_us", "density_kg_per_m3", "gruneisen"}, "acoustic");
    m.acoustic.sound_speed = a.value("sound_speed_mm_per_us", 1.497);
    m.acoustic.density = a.value("density_kg_per_m3", 1000.0);
    m.acoustic.gruneisen = a.value("gruneisen", 1.0);
  }
  return m;
}

} // namespace

nlohmann::json to_json(const PhantomSpec& spec) {
  json inclusions = json::array();
  for (const auto& inc : spec.inclusions) inclusions.push_back({{"shape", shape_json(inc.shape)}, {"material", inc.material}});
  json materials = json::array();
  for (const auto& m : spec.materials) materials.push_back(material_json(m));
  json j{{"background", {{"shape", shape_json(spec.background_shape)}, {"material", spec.background_material}}},
         {"inclusions", inclusions},
         {"couplant_material", spec.couplant_material},
         {"materials", materials}};
  if (spec.seed) j["seed"] = *spec.seed;
  return j;
}

PhantomSpec phantom_from_json(const nlohmann::json& j) {
  try {
    reject_unknown(j, {"background", "inclusions", "couplant_material", "materials", "seed"}, "phantom");
    PhantomSpec spec;
    const auto& bg = j.at("background");
    reject_unknown(bg, {"shape", "material"}, "background");
    spec.background_shape = shape_from(bg.at("shape"));
    spec.background_material = bg.at("material").get<std::string>();
    spec.couplant_material = j.value("couplant_material", std::string("water"));
    for (const auto& inc : j.value("inclusions", json::array())) {
      reject_unknown(inc, {"shape", "material"}, "inclusion");
      spec.inclusions.push_back({shape_from(inc.at("shape")), inc.at("material").get<std::string>()});
    }
    for (const auto& m : j.at("materials")) spec.materials.push_back(material_from(m));
    if (j.contains("seed")) spec.seed = j["seed"].get<std::uint64_t>();
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("phantom document: ") + e.what());
  }
}

PhantomSpec load_phantom(const std::filesystem::path& path) { return phantom_from_json(io::read_json(path)); }

void save_phantom(const std::filesystem::path& path, const PhantomSpec& spec) { io::write_json(path, to_json(spec)); }

} // namespace qpat
