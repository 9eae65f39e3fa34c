// qpat command-line front end. Each subcommand wraps one stage; `pipeline`
// and `scenario` run the whole chain from a JSON config.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>

#include "qpat/io.hpp"
#include "qpat/pipeline.hpp"
#include "qpat/slab.hpp"

namespace fs = std::filesystem;
using namespace qpat;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string out;
};

PipelineConfig base_config(const Globals& g) {
  PipelineConfig c;
  if (!g.config.empty()) {
    const nlohmann::json j = io::read_json(g.config);
    // single-stage subcommands bring their own phantom
    nlohmann::json patched = j;
    if (!patched.contains("phantoms")) patched["phantoms"] = {{"count", 1}};
    c = PipelineConfig::from_json(patched);
    for (auto& f : c.phantom_files)
      if (f.is_relative()) f = fs::path(g.config).parent_path() / f;
    if (!j.contains("phantoms")) c.sampler_count = 0;
  }
  if (g.threads > 0) c.threads = g.threads;
  if (!g.out.empty()) c.output_dir = g.out;
  return c;
}

fs::path require_out(const Globals& g, const std::string& fallback) {
  return g.out.empty() ? fs::path(fallback) : fs::path(g.out);
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> v;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      v.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw ConfigError("not a number: '" + tok + "'");
    }
  }
  return v;
}

/// An image file, or the central z-slice of a volume file.
Image2D<double> load_plane(const fs::path& p) {
  const auto v = io::read_volume(p);
  return central_slice(v.grid, v.values);
}

void print_manifest(const RunManifest& m) {
  std::cout << "config_hash  " << m.config_hash << "\noutputs_hash " << m.outputs_hash() << '\n';
  for (const auto& s : m.stages)
    std::cout << "  " << std::left << std::setw(28) << s.name << std::right << std::fixed << std::setprecision(2)
              << std::setw(9) << s.wall_seconds << " s" << (s.reused ? "  (reused)" : "") << '\n';
}

void print_summary(const std::vector<MetricRow>& rows) {
  for (const auto& [key, g] : summarize(rows))
    std::cout << std::left << std::setw(6) << key.first << std::setw(11) << key.second << " rel_err "
              << g.rel_err.format(1) << " %   abs_err " << g.abs_err.format(3) << " 1/cm  (n=" << g.rel_err.count
              << ")\n";
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"qpat: digital-twin photoacoustic quantification toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON pipeline config");
  app.add_option("--seed", g.seed, "random seed");
  app.add_option("--threads", g.threads, "worker threads (0 = OpenMP default)");
  app.add_option("--out", g.out, "output file or directory");

  // phantom
  auto* c_ph = app.add_subcommand("phantom", "sample or load a phantom spec and rasterize it");
  std::string ph_spec;
  std::size_t ph_n = 64;
  double ph_spacing = 0.5, ph_wl = 800.0;
  int ph_inclusions = -1;
  c_ph->add_option("--spec", ph_spec, "existing spec JSON (otherwise sampled from --seed)");
  c_ph->add_option("--grid-n", ph_n, "voxels per side");
  c_ph->add_option("--spacing", ph_spacing, "voxel size, mm");
  c_ph->add_option("--wavelength", ph_wl, "wavelength for the property volumes, nm");
  c_ph->add_option("--max-inclusions", ph_inclusions, "override the sampler's inclusion cap");

  // fluence
  auto* c_fl = app.add_subcommand("fluence", "Monte Carlo light transport");
  std::string fl_phantom, fl_p0;
  double fl_wl = 800.0, fl_photons = 1e6;
  std::size_t fl_n = 64;
  double fl_spacing = 0.5;
  c_fl->add_option("--phantom", fl_phantom, "phantom spec JSON")->required();
  c_fl->add_option("--wavelength", fl_wl, "nm");
  c_fl->add_option("--photons", fl_photons, "photon packets");
  c_fl->add_option("--grid-n", fl_n, "voxels per side");
  c_fl->add_option("--spacing", fl_spacing, "voxel size, mm");
  c_fl->add_option("--p0", fl_p0, "also write the initial pressure volume here");

  // acoustic
  auto* c_ac = app.add_subcommand("acoustic", "k-space forward acoustic simulation");
  std::string ac_p0;
  double ac_dx = 0.25, ac_noise = 0.0;
  std::size_t ac_steps = 2560;
  c_ac->add_option("--p0", ac_p0, "initial pressure (volume: central slice is used)")->required();
  c_ac->add_option("--dx", ac_dx, "acoustic grid spacing, mm");
  c_ac->add_option("--steps", ac_steps, "time samples");
  c_ac->add_option("--noise", ac_noise, "additive Gaussian noise sigma");

  // reconstruct
  auto* c_rc = app.add_subcommand("reconstruct", "bandpass, interpolation, Hilbert envelope, delay-and-sum");
  std::string rc_ts, rc_pgm;
  double rc_sos = 1.497;
  c_rc->add_option("--ts", rc_ts, "time series")->required();
  c_rc->add_option("--sos", rc_sos, "speed of sound, mm/us");
  c_rc->add_option("--pgm", rc_pgm, "optional PGM preview");

  // estimate
  auto* c_es = app.add_subcommand("estimate", "absorption estimate from a reconstruction");
  std::string es_method = "gtphi", es_signal, es_phi, es_labels, es_ref, es_report;
  std::optional<double> es_slope, es_intercept;
  double es_depth = 1.28;
  c_es->add_option("--method", es_method, "cal | gtphi")->check(CLI::IsMember({"cal", "gtphi"}));
  c_es->add_option("--signal", es_signal, "reconstructed image")->required();
  c_es->add_option("--phi", es_phi, "fluence image on the same grid (gtphi)");
  c_es->add_option("--slope", es_slope, "calibration slope");
  c_es->add_option("--intercept", es_intercept, "calibration intercept");
  c_es->add_option("--labels", es_labels, "label image for per-region rows");
  c_es->add_option("--reference", es_ref, "reference mu_a per label, 1/cm, comma separated");
  c_es->add_option("--report", es_report, "append region rows to this CSV");
  c_es->add_option("--depth-threshold", es_depth, "inclusion depth threshold, mm");

  // unmix
  auto* c_um = app.add_subcommand("unmix", "linear spectral unmixing to sO2");
  std::vector<std::string> um_images;
  std::string um_wls;
  c_um->add_option("--mu-a", um_images, "absorption image per wavelength")->required();
  c_um->add_option("--wavelengths", um_wls, "comma separated, nm, same order")->required();

  // iad
  auto* c_iad = app.add_subcommand("iad", "inverse adding-doubling from R/T measurements");
  std::string iad_meas;
  double iad_d = 3.0, iad_g = 0.7, iad_n = 1.4;
  c_iad->add_option("--meas", iad_meas, "CSV with wavelength_nm,R,T")->required();
  c_iad->add_option("--thickness", iad_d, "mm");
  c_iad->add_option("--g", iad_g, "anisotropy");
  c_iad->add_option("--n", iad_n, "refractive index");

  // evaluate
  auto* c_ev = app.add_subcommand("evaluate", "per-region errors and gCNR against a reference image");
  std::string ev_pred, ev_ref, ev_masks, ev_id = "phantom", ev_method = "pred";
  double ev_wl = 0.0, ev_depth = 1.28;
  c_ev->add_option("--pred", ev_pred, "estimated mu_a image")->required();
  c_ev->add_option("--ref", ev_ref, "reference mu_a image")->required();
  c_ev->add_option("--masks", ev_masks, "directory of region masks; background*.bin is the background")->required();
  c_ev->add_option("--phantom-id", ev_id);
  c_ev->add_option("--method", ev_method);
  c_ev->add_option("--wavelength", ev_wl);
  c_ev->add_option("--depth-threshold", ev_depth);

  // pipeline / scenario
  auto* c_pl = app.add_subcommand("pipeline", "run every stage from --config");
  auto* c_sc = app.add_subcommand("scenario", "depth decorrelation on homogeneous phantoms");
  int sc_n = 25;
  c_sc->add_option("--phantoms", sc_n, "number of homogeneous phantoms");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*c_ph) {
      PhantomSpec spec;
      if (!ph_spec.empty()) {
        spec = load_phantom(ph_spec);
      } else {
        PipelineConfig c = base_config(g);
        if (ph_inclusions >= 0) c.ranges.max_inclusions = ph_inclusions;
        c.ranges.min_inclusions = std::min(c.ranges.min_inclusions, c.ranges.max_inclusions);
        spec = sample_phantom(g.seed.value_or(1), c.ranges, water_spectrum());
      }
      const fs::path out = require_out(g, "phantom");
      fs::create_directories(out);
      save_phantom(out / "phantom.json", spec);
      const LabelMap labels = rasterize(spec, VoxelGrid::centered_cube(ph_n, ph_spacing));
      io::write_labels(out / "labels.bin", labels.labels);
      const auto props = assign_properties(labels, spec.materials, ph_wl);
      io::write_volume(out / "mu_a.bin", props.mu_a, {{"unit", "1/mm"}, {"wavelength_nm", ph_wl}});
      io::write_volume(out / "mu_s.bin", props.mu_s, {{"unit", "1/mm"}, {"wavelength_nm", ph_wl}});
      std::cout << "wrote " << out.string() << " (" << spec.inclusions.size() << " inclusions)\n";
    } else if (*c_fl) {
      const PhantomSpec spec = load_phantom(fl_phantom);
      const PipelineConfig c = base_config(g);
      const LabelMap labels = rasterize(spec, VoxelGrid::centered_cube(fl_n, fl_spacing));
      const auto props = assign_properties(labels, spec.materials, fl_wl);
      TransportConfig tc;
      tc.n_photons = static_cast<std::uint64_t>(fl_photons);
      tc.seed = g.seed.value_or(42);
      tc.threads = c.threads;
      const auto phi = simulate_fluence(OpticalMedium::from_properties(props), c.illumination, tc);
      const fs::path out = require_out(g, "phi.bin");
      io::write_volume(out, phi.grid, phi.phi,
                       {{"quantity", "fluence_per_mm2"}, {"wavelength_nm", fl_wl}, {"photons", tc.n_photons}});
      if (!fl_p0.empty()) {
        const auto p0 = compute_p0(props.mu_a, phi, props.gruneisen);
        io::write_volume(fl_p0, p0.grid, p0.p0, {{"quantity", "p0"}});
      }
      std::cout << "energy balance defect " << std::scientific << phi.balance.relative_defect() << '\n';
    } else if (*c_ac) {
      PipelineConfig c = base_config(g);
      c.acoustic.n_steps = ac_steps;
      const Image2D<double> p0 = load_plane(ac_p0);
      const PlaneGrid agrid = acoustic_grid_for(c.detectors, ac_dx, c.acoustic.pml_size);
      auto ts = simulate_forward(resample(p0, agrid), Medium2D::homogeneous(agrid), c.detectors, c.acoustic);
      if (ac_noise > 0.0) ts = add_noise(ts, ac_noise, g.seed.value_or(7));
      io::write_timeseries(require_out(g, "ts.bin"), ts);
    } else if (*c_rc) {
      PipelineConfig c = base_config(g);
      c.recon.sound_speed = rc_sos;
      const auto img = reconstruct(io::read_timeseries(rc_ts), c.recon, c.preprocess);
      io::write_image(require_out(g, "img.bin"), img.pixels);
      if (!rc_pgm.empty()) io::write_pgm(rc_pgm, img.pixels);
    } else if (*c_es) {
      const auto signal = io::read_image(es_signal);
      LinearMap map = es_method == "cal" ? LinearMap::paper_calibration() : LinearMap::paper_fluence_corrected();
      if (es_slope) map.slope = *es_slope;
      if (es_intercept) map.intercept = *es_intercept;
      map.validate();
      Image2D<double> mu_a;
      if (es_method == "cal") {
        mu_a = apply_calibration(signal, map);
      } else {
        if (es_phi.empty()) throw ConfigError("--method gtphi needs --phi");
        mu_a = fluence_correct(signal, io::read_image(es_phi), map).mu_a;
      }
      io::write_image(require_out(g, "mu_a.bin"), mu_a, {{"unit", "1/cm"}, {"method", es_method}});
      if (!es_labels.empty()) {
        ImagedPhantom img;
        img.phantom_id = fs::path(es_signal).stem().string();
        img.labels = io::read_mask(es_labels);
        img.reference_mu_a = parse_list(es_ref);
        if (img.labels.grid.size() != mu_a.grid.size()) throw DimensionError("labels and signal grids differ");
        const auto rows = evaluate_phantom(img, mu_a, es_method, es_depth);
        if (!es_report.empty()) write_report_csv(es_report, rows, true);
        print_summary(rows);
      }
    } else if (*c_um) {
      const auto wls = parse_list(um_wls);
      if (wls.size() != um_images.size()) throw ConfigError("one wavelength per --mu-a image");
      std::vector<Image2D<double>> imgs;
      for (const auto& p : um_images) imgs.push_back(io::read_image(p));
      const auto basis = load_hemoglobin_basis().select(wls);
      const auto so2 = linear_unmix_so2(imgs, basis);
      io::write_image(require_out(g, "so2.bin"), so2.so2, {{"quantity", "sO2"}});
    } else if (*c_iad) {
      const auto t = io::read_csv(iad_meas);
      const auto cw = t.column("wavelength_nm"), cr = t.column("R"), ct = t.column("T");
      std::ostream* os = &std::cout;
      std::ofstream f;
      if (!g.out.empty()) {
        f.open(g.out);
        if (!f) throw IoError("cannot open for writing: " + g.out);
        os = &f;
      }
      *os << "wavelength,mu_a,mu_s_prime,residual\n" << std::setprecision(10);
      for (const auto& r : t.rows) {
        DisMeasurement m{std::stod(r.at(cr)), std::stod(r.at(ct)), std::stod(r.at(cw))};
        const auto res = ad_inverse(m, iad_d, iad_g, iad_n);
        // per cm, as optical properties are usually tabulated
        *os << m.wavelength_nm << ',' << res.mu_a * 10.0 << ',' << res.mu_s_prime * 10.0 << ',' << res.residual
            << '\n';
      }
    } else if (*c_ev) {
      const auto pred = io::read_image(ev_pred);
      const auto ref = io::read_image(ev_ref);
      if (!(pred.grid == ref.grid)) throw DimensionError("--pred and --ref grids differ");
      std::vector<fs::path> masks;
      for (const auto& e : fs::directory_iterator(ev_masks))
        if (e.path().extension() == ".bin") masks.push_back(e.path());
      std::sort(masks.begin(), masks.end());
      std::vector<MetricRow> rows;
      std::vector<double> bg_pixels;
      std::vector<std::pair<int, std::vector<double>>> inc_pixels;
      int region = 0;
      for (const auto& mp : masks) {
        const auto mask = io::read_mask(mp);
        if (!(mask.grid == pred.grid)) throw DimensionError("mask grid differs: " + mp.string());
        const bool bg = mp.stem().string().rfind("background", 0) == 0;
        std::vector<double> rv, pv;
        for (std::size_t v = 0; v < mask.data.size(); ++v)
          if (mask.data[v]) {
            rv.push_back(ref.data[v]);
            pv.push_back(pred.data[v]);
          }
        ++region;
        if (rv.empty()) continue;
        const double reference = std::accumulate(rv.begin(), rv.end(), 0.0) / static_cast<double>(rv.size());
        const double est = aggregate_region(pred, {mask, bg ? RegionKind::background : RegionKind::inclusion, ev_depth});
        rows.push_back(make_row(ev_id, ev_wl, region, bg ? "background" : "inclusion", ev_method, est, reference));
        if (bg)
          bg_pixels.insert(bg_pixels.end(), pv.begin(), pv.end());
        else
          inc_pixels.emplace_back(region, pv);
      }
      write_report_csv(require_out(g, "report.csv"), rows, true);
      print_summary(rows);
      if (!bg_pixels.empty())
        for (const auto& [id, pv] : inc_pixels)
          std::cout << "region " << id << " gCNR " << std::fixed << std::setprecision(3) << gcnr(pv, bg_pixels) << '\n';
    } else if (*c_pl) {
      if (g.config.empty()) throw ConfigError("pipeline needs --config");
      PipelineConfig c = load_pipeline_config(g.config);
      if (g.seed) c.optics_seed = *g.seed;
      if (g.threads > 0) c.threads = g.threads;
      if (!g.out.empty()) c.output_dir = g.out;
      const auto r = run_pipeline(c);
      print_manifest(r.manifest);
      print_summary(r.rows);
    } else if (*c_sc) {
      PipelineConfig c = base_config(g);
      const auto r = scenario_depth_decorrelation(sc_n, g.seed.value_or(c.sampler_seed), c);
      print_manifest(r.pipeline.manifest);
      std::cout << "depth_mm  pearson_r\n";
      for (const auto& p : r.curve)
        std::cout << std::setw(8) << p.depth_mm << "  " << std::fixed << std::setprecision(3) << p.pearson_r << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "qpat: " << e.what() << '\n';
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "qpat: malformed JSON: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "qpat: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "qpat: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
