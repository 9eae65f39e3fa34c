#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "qpat/acoustics.hpp"
#include "qpat/eval.hpp"
#include "qpat/phantom.hpp"
#include "qpat/photon.hpp"
#include "qpat/quant.hpp"
#include "qpat/recon.hpp"

namespace qpat {

inline constexpr const char* toolkit_version = "0.3.0";

enum class Estimator { cal, gtphi };

/// Every stage's parameters. Parsed from one JSON document with sections
/// phantoms / grid / optics / acoustics / recon / estimate; unknown keys are
/// rejected.
struct PipelineConfig {
  // phantoms: explicit spec files, or sampled from a seed
  std::vector<std::filesystem::path> phantom_files;
  std::uint64_t sampler_seed = 1;
  int sampler_count = 0;
  PropertyRanges ranges{};

  // grid
  std::size_t grid_n = 160;
  double grid_spacing_mm = 0.25;

  // optics
  std::vector<double> wavelengths_nm{800.0};
  std::uint64_t photons = 1'000'000;
  std::uint64_t optics_seed = 42;
  IlluminationGeometry illumination{};

  // acoustics
  DetectorArray detectors{};
  AcousticConfig acoustic{};
  double acoustic_dx_mm = 0.25;

  // recon
  ReconGeometry recon{};
  PreprocessConfig preprocess{};

  // estimate
  Estimator estimator = Estimator::gtphi;
  bool fit_maps = true;  ///< fit Cal./GT-phi maps on this run's phantoms
  LinearMap cal_map = LinearMap::paper_calibration();
  LinearMap gtphi_map = LinearMap::paper_fluence_corrected();
  double depth_threshold_mm = 1.28;
  double calibration_fraction = 0.02;

  std::filesystem::path output_dir = "qpat_out";
  std::filesystem::path data_dir{};
  int threads = 0;

  static PipelineConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;
  /// SHA-256 over the canonical JSON form plus the toolkit version.
  std::string hash() const;
};

PipelineConfig load_pipeline_config(const std::filesystem::path& path);

struct StageRecord {
  std::string name;
  double wall_seconds = 0.0;
  bool reused = false;
};

struct ArtifactRecord {
  std::string path;  ///< relative to output_dir
  std::string sha256;
  std::string stage_key;
};

struct RunManifest {
  std::string config_hash;
  std::string toolkit_version;
  std::uint64_t sampler_seed = 0;
  std::uint64_t optics_seed = 0;
  std::vector<StageRecord> stages;
  std::vector<ArtifactRecord> artifacts;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  /// Hash over artifact digests; equal when every output is bit-identical.
  std::string outputs_hash() const;
};

/// Everything the estimate/evaluate stages need for one (phantom, wavelength).
struct ImagedPhantom {
  std::string phantom_id;
  double wavelength_nm = 0.0;
  PhantomSpec spec;
  Image2D<double> signal;               ///< cropped DAS envelope
  Image2D<double> phi;                  ///< fluence resampled onto the image grid
  Image2D<std::uint8_t> labels;         ///< region labels on the image grid
  std::vector<double> reference_mu_a;   ///< per label, 1/cm
};

struct PipelineResult {
  RunManifest manifest;
  std::vector<ImagedPhantom> images;
  std::vector<MetricRow> rows;
  LinearMap cal_map;
  LinearMap gtphi_map;
};

/// phantom -> fluence -> p0 -> acoustics -> recon -> estimate -> evaluate.
/// Stage outputs are written under config.output_dir; a stage is skipped when
/// its outputs exist and match the digests recorded in a previous manifest
/// for the same stage key.
PipelineResult run_pipeline(const PipelineConfig& config);

/// Phantom specs the config resolves to, in order.
std::vector<PhantomSpec> resolve_phantoms(const PipelineConfig& config);

/// Region rows for one imaged phantom under one estimator.
std::vector<MetricRow> evaluate_phantom(const ImagedPhantom& img, const Image2D<double>& mu_a_estimate,
                                        const std::string& method, double depth_threshold_mm);

/// Fluence-corrected estimate with pixels under the fluence floor set to NaN.
Image2D<double> gtphi_estimate(const ImagedPhantom& img, const LinearMap& map);

/// Pooled inclusion gCNR of an estimate: inclusion pixels vs background pixels.
std::vector<double> inclusion_gcnr(const ImagedPhantom& img, const Image2D<double>& mu_a_estimate);

struct DepthCorrelation {
  double depth_mm = 0.0;
  double pearson_r = 0.0;
  std::size_t n_phantoms = 0;
};

/// Mean signal in annuli [d - w/2, d + w/2) below the background surface,
/// correlated against background mu_a across phantoms.
std::vector<DepthCorrelation> depth_correlation(const std::vector<ImagedPhantom>& images,
                                                const std::vector<double>& depths_mm, double bin_width_mm = 1.0);

struct ScenarioResult {
  PipelineResult pipeline;
  std::vector<DepthCorrelation> curve;
};

/// Homogeneous (inclusion-free) phantoms imaged through the full chain, then
/// depth_correlation at 1..13 mm. Writes depth_correlation.csv.
ScenarioResult scenario_depth_decorrelation(int n_phantoms, std::uint64_t seed, PipelineConfig base);

/// Recomputes the curve from the images persisted by a pipeline run.
std::vector<DepthCorrelation> depth_correlation_from_disk(const std::filesystem::path& output_dir,
                                                          const std::vector<double>& depths_mm,
                                                          double bin_width_mm = 1.0);

void write_depth_csv(const std::filesystem::path& path, const std::vector<DepthCorrelation>& curve);

} // namespace qpat
