#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "qpat/io.hpp"
#include "qpat/pipeline.hpp"

using namespace qpat;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Coarse everywhere so a full run takes seconds.
json tiny_config(const fs::path& out) {
  return {{"phantoms", {{"sampler_seed", 3}, {"count", 3}}},
          {"grid", {{"n", 24}, {"spacing_mm", 1.25}}},
          {"optics", {{"wavelengths_nm", {750.0, 800.0}}, {"photons", 3000}, {"seed", 5}}},
          {"acoustics",
           {{"detectors", {{"n_elements", 32}, {"radius_mm", 20.0}}},
            {"dt_us", 0.05},
            {"n_steps", 520},
            {"dx_mm", 0.5}}},
          {"recon", {{"n_pixels", 60}, {"crop_to", 56}}},
          {"output_dir", out.string()}};
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

} // namespace

TEST_CASE("config parsing rejects unknown keys") {
  auto j = tiny_config("x");
  CHECK_NOTHROW(PipelineConfig::from_json(j));
  auto top = j;
  top["photons"] = 10;
  CHECK_THROWS_AS(PipelineConfig::from_json(top), ConfigError);
  auto nested = j;
  nested["optics"]["photon_count"] = 10;
  CHECK_THROWS_AS(PipelineConfig::from_json(nested), ConfigError);
  auto bad = j;
  bad["estimate"] = {{"method", "dl"}};
  CHECK_THROWS_AS(PipelineConfig::from_json(bad), ConfigError);
  auto neg = j;
  neg["optics"]["photons"] = 0;
  CHECK_THROWS_AS(PipelineConfig::from_json(neg), ConfigError);
}

TEST_CASE("config hash") {
  const auto a = PipelineConfig::from_json(tiny_config("a"));
  CHECK(a.hash() == PipelineConfig::from_json(tiny_config("a")).hash());
  CHECK(a.hash().size() == 64);
  // output location and thread count do not change results, so not the hash
  auto moved = tiny_config("elsewhere");
  moved["threads"] = 3;
  CHECK(PipelineConfig::from_json(moved).hash() == a.hash());
  auto more = tiny_config("a");
  more["optics"]["photons"] = 3001;
  CHECK(PipelineConfig::from_json(more).hash() != a.hash());
  // the canonical form parses back to the same configuration
  CHECK(PipelineConfig::from_json(a.to_json()).hash() == a.hash());
}

TEST_CASE("small end-to-end run, reuse and determinism") {
  const auto dir = fresh_dir("qpat_test_pipeline_a");
  const auto cfg = PipelineConfig::from_json(tiny_config(dir));
  const auto first = run_pipeline(cfg);

  // 2 wavelengths x 3 phantoms
  CHECK(first.images.size() == 6);
  CHECK(resolve_phantoms(cfg).size() == 3);
  for (const auto& img : first.images) {
    const auto sub = dir / img.phantom_id / ("wl" + std::to_string(static_cast<int>(img.wavelength_nm)));
    CHECK(fs::exists(sub / "recon.bin"));
    CHECK(fs::exists(sub / "fluence.bin"));
    CHECK(fs::exists(sub / "timeseries.bin"));
    CHECK(img.signal.grid.nx == 56);
  }
  for (const char* f : {"manifest.json", "report.csv", "summary.csv", "maps.json", "images.json"})
    CHECK(fs::exists(dir / f));
  CHECK(read_report_csv(dir / "report.csv").size() == first.rows.size());
  CHECK_FALSE(first.rows.empty());
  for (const auto& s : first.manifest.stages) CHECK_FALSE(s.reused);

  SUBCASE("second run reuses every heavy stage and reproduces the outputs") {
    const auto again = run_pipeline(cfg);
    for (const auto& s : again.manifest.stages)
      if (s.name.find("/fluence") != std::string::npos || s.name.find("/acoustic") != std::string::npos ||
          s.name.find("/recon") != std::string::npos)
        CHECK(s.reused);
    CHECK(again.manifest.outputs_hash() == first.manifest.outputs_hash());
    REQUIRE(again.rows.size() == first.rows.size());
    for (std::size_t i = 0; i < again.rows.size(); ++i) CHECK(again.rows[i].estimate == first.rows[i].estimate);
  }
  SUBCASE("fresh directory with another thread count gives identical outputs") {
    auto j = tiny_config(fresh_dir("qpat_test_pipeline_b"));
    j["threads"] = 2;
    const auto other = run_pipeline(PipelineConfig::from_json(j));
    CHECK(other.manifest.outputs_hash() == first.manifest.outputs_hash());
    fs::remove_all(j["output_dir"].get<std::string>());
  }
  SUBCASE("depth curve recomputed from disk matches the in-memory one") {
    const std::vector<double> depths{1, 2, 3, 5, 8};
    const auto mem = depth_correlation(first.images, depths);
    const auto disk = depth_correlation_from_disk(dir, depths);
    REQUIRE(mem.size() == disk.size());
    for (std::size_t i = 0; i < mem.size(); ++i) {
      CHECK(disk[i].depth_mm == mem[i].depth_mm);
      CHECK(disk[i].n_phantoms == mem[i].n_phantoms);
      if (std::isfinite(mem[i].pearson_r)) CHECK(std::abs(disk[i].pearson_r - mem[i].pearson_r) < 1e-12);
    }
  }
  SUBCASE("changing the photon count invalidates fluence and everything after it") {
    auto j = tiny_config(dir);
    j["optics"]["photons"] = 3500;
    const auto changed = run_pipeline(PipelineConfig::from_json(j));
    for (const auto& s : changed.manifest.stages)
      if (s.name.find("/fluence") != std::string::npos) CHECK_FALSE(s.reused);
    CHECK(changed.manifest.outputs_hash() != first.manifest.outputs_hash());
  }
  fs::remove_all(dir);
}

TEST_CASE("loading a config file resolves phantom paths against it") {
  const auto dir = fresh_dir("qpat_test_pipeline_cfg");
  fs::create_directories(dir / "specs");
  save_phantom(dir / "specs" / "one.json", sample_phantom(4, PropertyRanges{}, water_spectrum()));
  auto j = tiny_config(dir / "out");
  j["phantoms"] = {{"files", {"specs/one.json"}}};
  {
    std::ofstream f(dir / "run.json");
    f << j.dump(2);
  }
  const auto cfg = load_pipeline_config(dir / "run.json");
  REQUIRE(cfg.phantom_files.size() == 1);
  CHECK(fs::exists(cfg.phantom_files[0]));
  CHECK(resolve_phantoms(cfg).size() == 1);
  fs::remove_all(dir);
}
