#include "qpat/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "qpat/io.hpp"
#include "qpat/rng.hpp"

namespace qpat {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Strict JSON access --------------------------------------------------------

void allow_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <class T>
void get_if(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

void get_vec3(const json& j, const char* key, Vec3& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != 3) throw ConfigError(where + "." + key + ": expected [x, y, z]");
  out = {a[0].get<double>(), a[1].get<double>(), a[2].get<double>()};
}

json ranges_json(const PropertyRanges& r) {
  return {{"mu_a_min_per_cm", r.mu_a_min_per_cm},
          {"mu_a_max_per_cm", r.mu_a_max_per_cm},
          {"mus_prime_min_per_cm", r.mus_prime_min_per_cm},
          {"mus_prime_max_per_cm", r.mus_prime_max_per_cm},
          {"background_radius_mm", r.background_radius_mm},
          {"half_length_mm", r.half_length_mm},
          {"min_inclusions", r.min_inclusions},
          {"max_inclusions", r.max_inclusions},
          {"inclusion_radius_min_mm", r.inclusion_radius_min_mm},
          {"inclusion_radius_max_mm", r.inclusion_radius_max_mm},
          {"placement_margin_mm", r.placement_margin_mm},
          {"g", r.g},
          {"n", r.n}};
}

PropertyRanges ranges_from(const json& j) {
  const std::string w = "phantoms.ranges";
  allow_keys(j, {"mu_a_min_per_cm", "mu_a_max_per_cm", "mus_prime_min_per_cm", "mus_prime_max_per_cm",
                 "background_radius_mm", "half_length_mm", "min_inclusions", "max_inclusions",
                 "inclusion_radius_min_mm", "inclusion_radius_max_mm", "placement_margin_mm", "g", "n"},
             w);
  PropertyRanges r;
  get_if(j, "mu_a_min_per_cm", r.mu_a_min_per_cm, w);
  get_if(j, "mu_a_max_per_cm", r.mu_a_max_per_cm, w);
  get_if(j, "mus_prime_min_per_cm", r.mus_prime_min_per_cm, w);
  get_if(j, "mus_prime_max_per_cm", r.mus_prime_max_per_cm, w);
  get_if(j, "background_radius_mm", r.background_radius_mm, w);
  get_if(j, "half_length_mm", r.half_length_mm, w);
  get_if(j, "min_inclusions", r.min_inclusions, w);
  get_if(j, "max_inclusions", r.max_inclusions, w);
  get_if(j, "inclusion_radius_min_mm", r.inclusion_radius_min_mm, w);
  get_if(j, "inclusion_radius_max_mm", r.inclusion_radius_max_mm, w);
  get_if(j, "placement_margin_mm", r.placement_margin_mm, w);
  get_if(j, "g", r.g, w);
  get_if(j, "n", r.n, w);
  return r;
}

json illumination_json(const IlluminationGeometry& i) {
  return {{"bundle_pairs", i.bundle_pairs},
          {"ring_radius_mm", i.ring_radius},
          {"axial_offset_mm", i.axial_offset},
          {"divergence_half_angle_deg", i.beam_divergence_half_angle_deg},
          {"spot_radius_mm", i.spot_radius},
          {"target_point_mm", {i.target_point.x, i.target_point.y, i.target_point.z}},
          {"ring_z_mm", i.ring_z},
          {"first_azimuth_deg", i.first_azimuth_deg}};
}

IlluminationGeometry illumination_from(const json& j) {
  const std::string w = "optics.illumination";
  allow_keys(j, {"bundle_pairs", "ring_radius_mm", "axial_offset_mm", "divergence_half_angle_deg", "spot_radius_mm",
                 "target_point_mm", "ring_z_mm", "first_azimuth_deg"},
             w);
  IlluminationGeometry i;
  get_if(j, "bundle_pairs", i.bundle_pairs, w);
  get_if(j, "ring_radius_mm", i.ring_radius, w);
  get_if(j, "axial_offset_mm", i.axial_offset, w);
  get_if(j, "divergence_half_angle_deg", i.beam_divergence_half_angle_deg, w);
  get_if(j, "spot_radius_mm", i.spot_radius, w);
  get_vec3(j, "target_point_mm", i.target_point, w);
  get_if(j, "ring_z_mm", i.ring_z, w);
  get_if(j, "first_azimuth_deg", i.first_azimuth_deg, w);
  return i;
}

json detectors_json(const DetectorArray& d) {
  return {{"n_elements", d.n_elements},      {"arc_span_deg", d.arc_span_deg},
          {"radius_mm", d.radius},           {"center_mm", {d.center_x, d.center_y}},
          {"arc_center_deg", d.arc_center_deg}};
}

DetectorArray detectors_from(const json& j) {
  const std::string w = "acoustics.detectors";
  allow_keys(j, {"n_elements", "arc_span_deg", "radius_mm", "center_mm", "arc_center_deg"}, w);
  DetectorArray d;
  get_if(j, "n_elements", d.n_elements, w);
  get_if(j, "arc_span_deg", d.arc_span_deg, w);
  get_if(j, "radius_mm", d.radius, w);
  get_if(j, "arc_center_deg", d.arc_center_deg, w);
  if (j.contains("center_mm")) {
    const auto& c = j.at("center_mm");
    if (!c.is_array() || c.size() != 2) throw ConfigError(w + ".center_mm: expected [x, y]");
    d.center_x = c[0].get<double>();
    d.center_y = c[1].get<double>();
  }
  return d;
}

json map_json(const LinearMap& m) { return {{"slope", m.slope}, {"intercept", m.intercept}}; }

LinearMap map_from(const json& j, const std::string& w) {
  allow_keys(j, {"slope", "intercept"}, w);
  LinearMap m;
  get_if(j, "slope", m.slope, w);
  get_if(j, "intercept", m.intercept, w);
  return m;
}

std::string hex_key(const json& j) {
  const std::string s = j.dump();
  return io::sha256_hex(s.data(), s.size());
}

std::string fmt_wl(double wl) {
  std::ostringstream os;
  os << std::setprecision(6) << wl;
  return os.str();
}

/// Rounds through float32 so in-memory results equal what a later run reads
/// back from disk.
void quantize(std::vector<double>& v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

std::uint64_t derived_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  RngStream r(base, (a << 20) ^ b);
  return r.next();
}

// Stage bookkeeping --------------------------------------------------------

class StageCache {
public:
  StageCache(fs::path root, const RunManifest* previous) : root_(std::move(root)) {
    if (previous)
      for (const auto& a : previous->artifacts) prev_[a.path] = a;
  }

  /// True if every output was recorded under `key` and is unchanged on disk.
  bool reusable(const std::string& key, const std::vector<std::string>& outputs) const {
    for (const auto& rel : outputs) {
      auto it = prev_.find(rel);
      if (it == prev_.end() || it->second.stage_key != key) return false;
      const fs::path p = root_ / rel;
      if (!fs::exists(p) || io::sha256_file(p) != it->second.sha256) return false;
    }
    return true;
  }

  void record(RunManifest& m, const std::string& key, const std::vector<std::string>& outputs) const {
    for (const auto& rel : outputs) m.artifacts.push_back({rel, io::sha256_file(root_ / rel), key});
  }

  fs::path path(const std::string& rel) const { return root_ / rel; }

private:
  fs::path root_;
  std::map<std::string, ArtifactRecord> prev_;
};

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

std::vector<double> reference_per_label(const PhantomSpec& spec, const std::vector<std::string>& materials, double wl) {
  std::vector<double> ref;
  for (const auto& name : materials) ref.push_back(spec.material(name).at(wl).mu_a * 10.0);
  return ref;
}

std::vector<std::string> label_materials(const PhantomSpec& spec) {
  std::vector<std::string> m{spec.couplant_material, spec.background_material};
  for (const auto& inc : spec.inclusions) m.push_back(inc.material);
  return m;
}

Medium2D acoustic_medium(const PhantomSpec& spec, const PlaneGrid& grid, double z) {
  const auto labels = rasterize_plane(spec, grid, z);
  const auto names = label_materials(spec);
  Medium2D m{grid, std::vector<double>(grid.size()), std::vector<double>(grid.size())};
  for (std::size_t v = 0; v < grid.size(); ++v) {
    const auto& ac = spec.material(names[labels.data[v]]).acoustic;
    m.sound_speed[v] = ac.sound_speed;
    m.density[v] = ac.density;
  }
  return m;
}

Image2D<std::uint8_t> region_mask(const Image2D<std::uint8_t>& labels, std::uint8_t label) {
  Image2D<std::uint8_t> m(labels.grid);
  for (std::size_t v = 0; v < m.data.size(); ++v) m.data[v] = labels.data[v] == label;
  return m;
}

std::vector<CalibrationSample> calibration_samples(const std::vector<ImagedPhantom>& images, bool fluence_corrected,
                                                   double floor_fraction = 1e-6) {
  std::vector<CalibrationSample> out;
  for (const auto& img : images)
    out.push_back({fluence_corrected ? fluence_normalize(img.signal, img.phi, floor_fraction) : img.signal, img.labels,
                   img.reference_mu_a, fluence_corrected ? img.signal : Image2D<double>{}});
  return out;
}

json images_index_entry(const ImagedPhantom& img, const std::string& dir) {
  return {{"phantom_id", img.phantom_id},
          {"wavelength_nm", img.wavelength_nm},
          {"signal", dir + "/recon.bin"},
          {"phi", dir + "/phi_image.bin"},
          {"labels", dir + "/labels_image.bin"},
          {"reference_mu_a_per_cm", img.reference_mu_a},
          {"background_radius_mm", img.spec.background_shape.radius}};
}

} // namespace

// Config -------------------------------------------------------------------

PipelineConfig PipelineConfig::from_json(const json& j) {
  allow_keys(j, {"phantoms", "grid", "optics", "acoustics", "recon", "estimate", "output_dir", "data_dir", "threads"},
             "config");
  PipelineConfig c;
  if (j.contains("phantoms")) {
    const auto& p = j.at("phantoms");
    allow_keys(p, {"files", "sampler_seed", "count", "ranges"}, "phantoms");
    if (p.contains("files"))
      for (const auto& f : p.at("files")) c.phantom_files.emplace_back(f.get<std::string>());
    get_if(p, "sampler_seed", c.sampler_seed, "phantoms");
    get_if(p, "count", c.sampler_count, "phantoms");
    if (p.contains("ranges")) c.ranges = ranges_from(p.at("ranges"));
  }
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    allow_keys(g, {"n", "spacing_mm"}, "grid");
    get_if(g, "n", c.grid_n, "grid");
    get_if(g, "spacing_mm", c.grid_spacing_mm, "grid");
  }
  if (j.contains("optics")) {
    const auto& o = j.at("optics");
    allow_keys(o, {"wavelengths_nm", "photons", "seed", "illumination"}, "optics");
    get_if(o, "wavelengths_nm", c.wavelengths_nm, "optics");
    if (o.contains("photons")) {
      const double n = o.at("photons").get<double>();
      if (!(n >= 1.0)) throw ConfigError("optics.photons must be >= 1");
      c.photons = static_cast<std::uint64_t>(n);
    }
    get_if(o, "seed", c.optics_seed, "optics");
    if (o.contains("illumination")) c.illumination = illumination_from(o.at("illumination"));
  }
  if (j.contains("acoustics")) {
    const auto& a = j.at("acoustics");
    allow_keys(a, {"detectors", "dt_us", "n_steps", "c_ref_mm_per_us", "pml_size", "pml_alpha", "max_cfl", "dx_mm"},
               "acoustics");
    if (a.contains("detectors")) c.detectors = detectors_from(a.at("detectors"));
    get_if(a, "dt_us", c.acoustic.dt, "acoustics");
    get_if(a, "n_steps", c.acoustic.n_steps, "acoustics");
    get_if(a, "c_ref_mm_per_us", c.acoustic.c_ref, "acoustics");
    get_if(a, "pml_size", c.acoustic.pml_size, "acoustics");
    get_if(a, "pml_alpha", c.acoustic.pml_alpha, "acoustics");
    get_if(a, "max_cfl", c.acoustic.max_cfl, "acoustics");
    get_if(a, "dx_mm", c.acoustic_dx_mm, "acoustics");
  }
  if (j.contains("recon")) {
    const auto& r = j.at("recon");
    allow_keys(r, {"n_pixels", "fov_mm", "center_mm", "sound_speed_mm_per_us", "crop_to", "lo_hz", "hi_hz",
                   "filter_order", "time_factor", "element_factor"},
               "recon");
    get_if(r, "n_pixels", c.recon.n_pixels, "recon");
    get_if(r, "fov_mm", c.recon.fov_mm, "recon");
    if (r.contains("center_mm")) {
      c.recon.center_x = r.at("center_mm")[0].get<double>();
      c.recon.center_y = r.at("center_mm")[1].get<double>();
    }
    get_if(r, "sound_speed_mm_per_us", c.recon.sound_speed, "recon");
    get_if(r, "crop_to", c.recon.crop_to, "recon");
    get_if(r, "lo_hz", c.preprocess.lo_hz, "recon");
    get_if(r, "hi_hz", c.preprocess.hi_hz, "recon");
    get_if(r, "filter_order", c.preprocess.filter_order, "recon");
    get_if(r, "time_factor", c.preprocess.time_factor, "recon");
    get_if(r, "element_factor", c.preprocess.element_factor, "recon");
  }
  if (j.contains("estimate")) {
    const auto& e = j.at("estimate");
    allow_keys(e, {"method", "fit_maps", "cal", "gtphi", "depth_threshold_mm", "calibration_fraction"}, "estimate");
    if (e.contains("method")) {
      const auto m = e.at("method").get<std::string>();
      if (m == "cal")
        c.estimator = Estimator::cal;
      else if (m == "gtphi")
        c.estimator = Estimator::gtphi;
      else
        throw ConfigError("estimate.method must be 'cal' or 'gtphi'");
    }
    get_if(e, "fit_maps", c.fit_maps, "estimate");
    if (e.contains("cal")) c.cal_map = map_from(e.at("cal"), "estimate.cal");
    if (e.contains("gtphi")) c.gtphi_map = map_from(e.at("gtphi"), "estimate.gtphi");
    get_if(e, "depth_threshold_mm", c.depth_threshold_mm, "estimate");
    get_if(e, "calibration_fraction", c.calibration_fraction, "estimate");
  }
  if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  if (j.contains("data_dir")) c.data_dir = j.at("data_dir").get<std::string>();
  get_if(j, "threads", c.threads, "config");
  c.validate();
  return c;
}

json PipelineConfig::to_json() const {
  json files = json::array();
  for (const auto& f : phantom_files) files.push_back(f.string());
  return {
      {"phantoms", {{"files", files}, {"sampler_seed", sampler_seed}, {"count", sampler_count}, {"ranges", ranges_json(ranges)}}},
      {"grid", {{"n", grid_n}, {"spacing_mm", grid_spacing_mm}}},
      {"optics",
       {{"wavelengths_nm", wavelengths_nm},
        {"photons", photons},
        {"seed", optics_seed},
        {"illumination", illumination_json(illumination)}}},
      {"acoustics",
       {{"detectors", detectors_json(detectors)},
        {"dt_us", acoustic.dt},
        {"n_steps", acoustic.n_steps},
        {"c_ref_mm_per_us", acoustic.c_ref},
        {"pml_size", acoustic.pml_size},
        {"pml_alpha", acoustic.pml_alpha},
        {"max_cfl", acoustic.max_cfl},
        {"dx_mm", acoustic_dx_mm}}},
      {"recon",
       {{"n_pixels", recon.n_pixels},
        {"fov_mm", recon.fov_mm},
        {"center_mm", {recon.center_x, recon.center_y}},
        {"sound_speed_mm_per_us", recon.sound_speed},
        {"crop_to", recon.crop_to},
        {"lo_hz", preprocess.lo_hz},
        {"hi_hz", preprocess.hi_hz},
        {"filter_order", preprocess.filter_order},
        {"time_factor", preprocess.time_factor},
        {"element_factor", preprocess.element_factor}}},
      {"estimate",
       {{"method", estimator == Estimator::cal ? "cal" : "gtphi"},
        {"fit_maps", fit_maps},
        {"cal", map_json(cal_map)},
        {"gtphi", map_json(gtphi_map)},
        {"depth_threshold_mm", depth_threshold_mm},
        {"calibration_fraction", calibration_fraction}}},
      {"output_dir", output_dir.string()},
      {"data_dir", data_dir.string()},
      {"threads", threads}};
}

void PipelineConfig::validate() const {
  if (phantom_files.empty() && sampler_count <= 0) throw ConfigError("no phantoms: give phantoms.files or phantoms.count");
  if (sampler_count < 0) throw ConfigError("phantoms.count must be >= 0");
  ranges.validate();
  if (grid_n < 4 || !(grid_spacing_mm > 0.0)) throw ConfigError("grid: n >= 4 and spacing_mm > 0 required");
  if (wavelengths_nm.empty()) throw ConfigError("optics.wavelengths_nm must not be empty");
  if (photons < 1) throw ConfigError("optics.photons must be >= 1");
  detectors.validate();
  if (!(acoustic_dx_mm > 0.0)) throw ConfigError("acoustics.dx_mm must be positive");
  if (!(depth_threshold_mm >= 0.0)) throw ConfigError("estimate.depth_threshold_mm must be >= 0");
  if (!(calibration_fraction > 0.0 && calibration_fraction <= 1.0))
    throw ConfigError("estimate.calibration_fraction must lie in (0, 1]");
  if (!fit_maps) {
    cal_map.validate();
    gtphi_map.validate();
  }
}

std::string PipelineConfig::hash() const {
  json j = to_json();
  // Neither changes any numerical output.
  j.erase("output_dir");
  j.erase("threads");
  j["toolkit_version"] = toolkit_version;
  return hex_key(j);
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  PipelineConfig c = PipelineConfig::from_json(io::read_json(path));
  // Relative phantom paths resolve against the config file.
  for (auto& f : c.phantom_files)
    if (f.is_relative()) f = path.parent_path() / f;
  return c;
}

// Manifest -----------------------------------------------------------------

json RunManifest::to_json() const {
  json st = json::array(), ar = json::array();
  for (const auto& s : stages) st.push_back({{"name", s.name}, {"wall_seconds", s.wall_seconds}, {"reused", s.reused}});
  for (const auto& a : artifacts) ar.push_back({{"path", a.path}, {"sha256", a.sha256}, {"stage_key", a.stage_key}});
  return {{"config_hash", config_hash}, {"toolkit_version", toolkit_version}, {"sampler_seed", sampler_seed},
          {"optics_seed", optics_seed}, {"outputs_hash", outputs_hash()}, {"stages", st}, {"artifacts", ar}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  try {
    m.config_hash = j.at("config_hash").get<std::string>();
    m.toolkit_version = j.at("toolkit_version").get<std::string>();
    m.sampler_seed = j.value("sampler_seed", std::uint64_t{0});
    m.optics_seed = j.value("optics_seed", std::uint64_t{0});
    for (const auto& s : j.at("stages"))
      m.stages.push_back({s.at("name").get<std::string>(), s.at("wall_seconds").get<double>(), s.at("reused").get<bool>()});
    for (const auto& a : j.at("artifacts"))
      m.artifacts.push_back(
          {a.at("path").get<std::string>(), a.at("sha256").get<std::string>(), a.at("stage_key").get<std::string>()});
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed run manifest: ") + e.what());
  }
  return m;
}

std::string RunManifest::outputs_hash() const {
  auto sorted = artifacts;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  std::string acc;
  for (const auto& a : sorted) acc += a.path + ':' + a.sha256 + '\n';
  return io::sha256_hex(acc.data(), acc.size());
}

// Phantoms -----------------------------------------------------------------

std::vector<PhantomSpec> resolve_phantoms(const PipelineConfig& config) {
  std::vector<PhantomSpec> out;
  for (const auto& f : config.phantom_files) out.push_back(load_phantom(f));
  if (config.sampler_count > 0) {
    const fs::path dir = config.data_dir.empty() ? default_data_dir() : config.data_dir;
    const MaterialSpectrum water = water_spectrum(dir / "water_absorption.csv");
    RngStream seeds(config.sampler_seed, 0x5eedULL);
    for (int i = 0; i < config.sampler_count; ++i) out.push_back(sample_phantom(seeds.next(), config.ranges, water));
  }
  return out;
}

// Evaluation ---------------------------------------------------------------

std::vector<MetricRow> evaluate_phantom(const ImagedPhantom& img, const Image2D<double>& mu_a_estimate,
                                        const std::string& method, double depth_threshold_mm) {
  std::vector<MetricRow> rows;
  for (std::size_t label = LabelMap::background; label < img.reference_mu_a.size(); ++label) {
    RegionSpec region{region_mask(img.labels, static_cast<std::uint8_t>(label)),
                      label == LabelMap::background ? RegionKind::background : RegionKind::inclusion,
                      depth_threshold_mm};
    if (std::none_of(region.mask.data.begin(), region.mask.data.end(), [](std::uint8_t v) { return v != 0; }))
      continue;  // region misses the imaging plane or field of view
    const double est = aggregate_region(mu_a_estimate, region);
    rows.push_back(make_row(img.phantom_id, img.wavelength_nm, static_cast<int>(label),
                            region.kind == RegionKind::background ? "background" : "inclusion", method, est,
                            img.reference_mu_a[label]));
  }
  return rows;
}

Image2D<double> gtphi_estimate(const ImagedPhantom& img, const LinearMap& map) {
  auto fc = fluence_correct(img.signal, img.phi, map);
  for (std::size_t v = 0; v < fc.mu_a.data.size(); ++v)
    if (!fc.valid.data[v]) fc.mu_a.data[v] = std::numeric_limits<double>::quiet_NaN();
  return std::move(fc.mu_a);
}

std::vector<double> inclusion_gcnr(const ImagedPhantom& img, const Image2D<double>& mu_a_estimate) {
  std::vector<double> bg;
  for (std::size_t v = 0; v < img.labels.data.size(); ++v)
    if (img.labels.data[v] == LabelMap::background && std::isfinite(mu_a_estimate.data[v]))
      bg.push_back(mu_a_estimate.data[v]);
  std::vector<double> out;
  if (bg.empty()) return out;
  for (std::size_t label = 2; label < img.reference_mu_a.size(); ++label) {
    std::vector<double> inc;
    for (std::size_t v = 0; v < img.labels.data.size(); ++v)
      if (img.labels.data[v] == label && std::isfinite(mu_a_estimate.data[v])) inc.push_back(mu_a_estimate.data[v]);
    if (!inc.empty()) out.push_back(gcnr(inc, bg));
  }
  return out;
}

// Depth correlation --------------------------------------------------------

namespace {

double annulus_mean(const Image2D<double>& signal, const Image2D<std::uint8_t>& labels, double d, double w) {
  Image2D<std::uint8_t> inside(labels.grid);
  for (std::size_t v = 0; v < inside.data.size(); ++v) inside.data[v] = labels.data[v] != LabelMap::couplant;
  const auto depth = inward_depth(inside);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t v = 0; v < signal.data.size(); ++v)
    if (inside.data[v] && depth.data[v] >= d - 0.5 * w && depth.data[v] < d + 0.5 * w) {
      sum += signal.data[v];
      ++n;
    }
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

std::vector<DepthCorrelation> correlate(const std::vector<const Image2D<double>*>& signals,
                                        const std::vector<const Image2D<std::uint8_t>*>& labels,
                                        const std::vector<double>& reference, const std::vector<double>& depths,
                                        double w) {
  std::vector<DepthCorrelation> out;
  for (double d : depths) {
    std::vector<double> xs, ys;
    for (std::size_t i = 0; i < signals.size(); ++i) {
      const double m = annulus_mean(*signals[i], *labels[i], d, w);
      if (std::isnan(m)) continue;
      xs.push_back(reference[i]);
      ys.push_back(m);
    }
    DepthCorrelation c{d, std::numeric_limits<double>::quiet_NaN(), xs.size()};
    if (xs.size() >= 2) {
      try {
        c.pearson_r = pearson_r(xs, ys);
      } catch (const DomainError&) {
      }
    }
    out.push_back(c);
  }
  return out;
}

} // namespace

std::vector<DepthCorrelation> depth_correlation(const std::vector<ImagedPhantom>& images,
                                                const std::vector<double>& depths_mm, double bin_width_mm) {
  std::vector<const Image2D<double>*> s;
  std::vector<const Image2D<std::uint8_t>*> l;
  std::vector<double> ref;
  for (const auto& img : images) {
    s.push_back(&img.signal);
    l.push_back(&img.labels);
    ref.push_back(img.reference_mu_a.at(LabelMap::background));
  }
  return correlate(s, l, ref, depths_mm, bin_width_mm);
}

std::vector<DepthCorrelation> depth_correlation_from_disk(const fs::path& output_dir,
                                                          const std::vector<double>& depths_mm, double bin_width_mm) {
  const json index = io::read_json(output_dir / "images.json");
  std::vector<Image2D<double>> signals;
  std::vector<Image2D<std::uint8_t>> labels;
  std::vector<double> ref;
  for (const auto& e : index) {
    signals.push_back(io::read_image(output_dir / e.at("signal").get<std::string>()));
    labels.push_back(io::read_mask(output_dir / e.at("labels").get<std::string>()));
    ref.push_back(e.at("reference_mu_a_per_cm").at(LabelMap::background).get<double>());
  }
  std::vector<const Image2D<double>*> s;
  std::vector<const Image2D<std::uint8_t>*> l;
  for (std::size_t i = 0; i < signals.size(); ++i) {
    s.push_back(&signals[i]);
    l.push_back(&labels[i]);
  }
  return correlate(s, l, ref, depths_mm, bin_width_mm);
}

void write_depth_csv(const fs::path& path, const std::vector<DepthCorrelation>& curve) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "depth_mm,pearson_r,n_phantoms\n" << std::setprecision(17);
  for (const auto& c : curve) out << c.depth_mm << ',' << c.pearson_r << ',' << c.n_phantoms << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

// Pipeline -----------------------------------------------------------------

PipelineResult run_pipeline(const PipelineConfig& config) {
  config.validate();
  const fs::path root = config.output_dir;
  fs::create_directories(root);

  std::optional<RunManifest> previous;
  if (fs::exists(root / "manifest.json")) {
    try {
      previous = RunManifest::from_json(io::read_json(root / "manifest.json"));
    } catch (const Error&) {
      previous.reset();  // unreadable manifest: recompute everything
    }
  }
  StageCache cache(root, previous ? &*previous : nullptr);

  PipelineResult result;
  RunManifest& man = result.manifest;
  man.config_hash = config.hash();
  man.toolkit_version = toolkit_version;
  man.sampler_seed = config.sampler_seed;
  man.optics_seed = config.optics_seed;
  auto stage = [&](const std::string& name, double secs, bool reused) { man.stages.push_back({name, secs, reused}); };

  const auto phantoms = resolve_phantoms(config);
  const VoxelGrid grid = VoxelGrid::centered_cube(config.grid_n, config.grid_spacing_mm);
  const PlaneGrid agrid = acoustic_grid_for(config.detectors, config.acoustic_dx_mm, config.acoustic.pml_size);
  const std::size_t kz = grid.dims[2] / 2;
  const double z_slice = grid.center(0, 0, kz).z;
  const json index_base = {{"grid", {{"n", config.grid_n}, {"spacing_mm", config.grid_spacing_mm}}},
                           {"version", toolkit_version}};

  json images_index = json::array();
  for (std::size_t pi = 0; pi < phantoms.size(); ++pi) {
    const PhantomSpec& spec = phantoms[pi];
    std::ostringstream idss;
    idss << 'p' << std::setw(3) << std::setfill('0') << pi;
    const std::string pid = idss.str();
    fs::create_directories(root / pid);

    // phantom
    Timer t_ph;
    const std::string phantom_key = hex_key({{"spec", to_json(spec)}, {"base", index_base}});
    save_phantom(root / pid / "phantom.json", spec);
    const LabelMap labels = rasterize(spec, grid);
    io::write_labels(root / pid / "labels.bin", labels.labels);
    cache.record(man, phantom_key, {pid + "/phantom.json", pid + "/labels.bin"});
    stage(pid + "/phantom", t_ph.seconds(), false);

    for (std::size_t wi = 0; wi < config.wavelengths_nm.size(); ++wi) {
      const double wl = config.wavelengths_nm[wi];
      const std::string dir = pid + "/wl" + fmt_wl(wl);
      fs::create_directories(root / dir);
      const PropertyVolumes props = assign_properties(labels, spec.materials, wl);

      // fluence
      Timer t_fl;
      TransportConfig tc;
      tc.n_photons = config.photons;
      tc.seed = derived_seed(config.optics_seed, pi, wi);
      tc.threads = config.threads;
      const std::string fluence_key =
          hex_key({{"phantom", phantom_key}, {"wl", wl}, {"photons", tc.n_photons}, {"seed", tc.seed},
                   {"illumination", illumination_json(config.illumination)}});
      const std::vector<std::string> fl_out{dir + "/fluence.bin"};
      FluenceVolume phi;
      bool reused = cache.reusable(fluence_key, fl_out);
      if (reused) {
        auto vf = io::read_volume(cache.path(fl_out[0]));
        phi.grid = vf.grid;
        phi.phi = std::move(vf.values);
      } else {
        phi = simulate_fluence(OpticalMedium::from_properties(props), config.illumination, tc);
        quantize(phi.phi);
        io::write_volume(cache.path(fl_out[0]), phi.grid, phi.phi,
                         {{"quantity", "fluence_per_mm2"},
                          {"energy_balance",
                           {{"launched", phi.balance.launched},
                            {"absorbed", phi.balance.absorbed},
                            {"escaped", phi.balance.escaped},
                            {"roulette_net", phi.balance.roulette_net}}}});
      }
      cache.record(man, fluence_key, fl_out);
      stage(dir + "/fluence", t_fl.seconds(), reused);

      // p0 and acoustics
      Timer t_ac;
      const std::string acoustic_key =
          hex_key({{"fluence", fluence_key},
                   {"acoustics", config.to_json()["acoustics"]}});
      const std::vector<std::string> ac_out{dir + "/p0_slice.bin", dir + "/timeseries.bin"};
      TimeSeries ts;
      reused = cache.reusable(acoustic_key, ac_out);
      if (reused) {
        ts = io::read_timeseries(cache.path(ac_out[1]));
      } else {
        const PressureField p0 = compute_p0(props.mu_a, phi, props.gruneisen);
        const Image2D<double> slice = central_slice(p0.grid, p0.p0);
        io::write_image(cache.path(ac_out[0]), slice, {{"z_mm", z_slice}});
        const Image2D<double> p0_ac = resample(slice, agrid);
        ts = simulate_forward(p0_ac, acoustic_medium(spec, agrid, z_slice), config.detectors, config.acoustic);
        quantize(ts.data);
        io::write_timeseries(cache.path(ac_out[1]), ts);
      }
      cache.record(man, acoustic_key, ac_out);
      stage(dir + "/acoustic", t_ac.seconds(), reused);

      // reconstruction
      Timer t_rc;
      const std::string recon_key = hex_key({{"acoustic", acoustic_key}, {"recon", config.to_json()["recon"]}});
      const std::vector<std::string> rc_out{dir + "/recon.bin"};
      Image2D<double> signal;
      reused = cache.reusable(recon_key, rc_out);
      if (reused) {
        signal = io::read_image(cache.path(rc_out[0]));
      } else {
        ReconImage img = reconstruct(ts, config.recon, config.preprocess);
        signal = std::move(img.pixels);
        quantize(signal.data);
        io::write_image(cache.path(rc_out[0]), signal);
        io::write_pgm(root / dir / "recon.pgm", signal);
      }
      cache.record(man, recon_key, rc_out);
      stage(dir + "/recon", t_rc.seconds(), reused);

      // per-image ground truth on the reconstruction grid
      ImagedPhantom im;
      im.phantom_id = pid;
      im.wavelength_nm = wl;
      im.spec = spec;
      im.signal = std::move(signal);
      im.phi = resample(central_slice(phi.grid, phi.phi), im.signal.grid);
      quantize(im.phi.data);
      im.labels = rasterize_plane(spec, im.signal.grid, z_slice);
      im.reference_mu_a = reference_per_label(spec, label_materials(spec), wl);
      io::write_image(root / dir / "phi_image.bin", im.phi);
      io::write_mask(root / dir / "labels_image.bin", im.labels);
      cache.record(man, recon_key, {dir + "/phi_image.bin", dir + "/labels_image.bin"});
      images_index.push_back(images_index_entry(im, dir));
      result.images.push_back(std::move(im));
    }
  }
  io::write_json(root / "images.json", images_index);

  // estimate
  Timer t_est;
  if (config.fit_maps) {
    const auto cal = calibration_samples(result.images, false);
    const auto gt = calibration_samples(result.images, true);
    result.cal_map = fit_linear_calibration(cal, config.calibration_fraction);
    result.gtphi_map = fit_linear_calibration(gt, config.calibration_fraction);
  } else {
    result.cal_map = config.cal_map;
    result.gtphi_map = config.gtphi_map;
  }
  io::write_json(root / "maps.json", {{"cal", {{"slope", result.cal_map.slope},
                                               {"intercept", result.cal_map.intercept},
                                               {"fit_r", result.cal_map.fit_r}}},
                                      {"gtphi", {{"slope", result.gtphi_map.slope},
                                                 {"intercept", result.gtphi_map.intercept},
                                                 {"fit_r", result.gtphi_map.fit_r}}}});
  std::vector<std::string> est_out{"maps.json", "images.json"};
  for (const auto& img : result.images) {
    const std::string dir = img.phantom_id + "/wl" + fmt_wl(img.wavelength_nm);
    const auto cal = apply_calibration(img.signal, result.cal_map);
    const auto gt = gtphi_estimate(img, result.gtphi_map);
    io::write_image(root / dir / "mu_a_cal.bin", cal, {{"unit", "1/cm"}});
    io::write_image(root / dir / "mu_a_gtphi.bin", gt, {{"unit", "1/cm"}, {"invalid", "NaN"}});
    est_out.push_back(dir + "/mu_a_cal.bin");
    est_out.push_back(dir + "/mu_a_gtphi.bin");
    auto rc = evaluate_phantom(img, cal, "cal", config.depth_threshold_mm);
    auto rg = evaluate_phantom(img, gt, "gtphi", config.depth_threshold_mm);
    result.rows.insert(result.rows.end(), rc.begin(), rc.end());
    result.rows.insert(result.rows.end(), rg.begin(), rg.end());
  }
  cache.record(man, man.config_hash, est_out);
  stage("estimate", t_est.seconds(), false);

  // evaluate
  Timer t_ev;
  write_report_csv(root / "report.csv", result.rows);
  {
    std::ofstream s(root / "summary.csv");
    s << "method,kind,count,rel_err_median,rel_err_half_iqr,abs_err_median,abs_err_half_iqr\n" << std::setprecision(17);
    for (const auto& [key, g] : summarize(result.rows))
      s << key.first << ',' << key.second << ',' << g.rel_err.count << ',' << g.rel_err.median << ','
        << g.rel_err.half_iqr << ',' << g.abs_err.median << ',' << g.abs_err.half_iqr << '\n';
  }
  cache.record(man, man.config_hash, {"report.csv", "summary.csv"});
  stage("evaluate", t_ev.seconds(), false);

  io::write_json(root / "manifest.json", man.to_json());
  return result;
}

ScenarioResult scenario_depth_decorrelation(int n_phantoms, std::uint64_t seed, PipelineConfig base) {
  if (n_phantoms < 2) throw ConfigError("depth scenario needs at least two phantoms");
  base.phantom_files.clear();
  base.sampler_count = n_phantoms;
  base.sampler_seed = seed;
  base.ranges.min_inclusions = 0;
  base.ranges.max_inclusions = 0;
  ScenarioResult out;
  out.pipeline = run_pipeline(base);
  std::vector<double> depths;
  for (int d = 1; d <= 13; ++d) depths.push_back(d);
  out.curve = depth_correlation(out.pipeline.images, depths);
  write_depth_csv(fs::path(base.output_dir) / "depth_correlation.csv", out.curve);
  return out;
}

} // namespace qpat
