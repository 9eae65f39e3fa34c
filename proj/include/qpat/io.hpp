#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "qpat/acoustics.hpp"
#include "qpat/grid.hpp"

namespace qpat::io {

namespace fs = std::filesystem;

/// `volume.bin` -> `volume.json`.
fs::path sidecar_path(const fs::path& bin);

/// Flat little-endian float32 (or uint8 for labels/masks), C order with z
/// slowest, plus a JSON sidecar {dims, spacing_mm, origin_mm, dtype, order}.
/// `extra` keys are merged into the sidecar.
void write_volume(const fs::path& path, const VoxelGrid& grid, const std::vector<double>& values,
                  const nlohmann::json& extra = {});
void write_volume(const fs::path& path, const Volume<float>& v, const nlohmann::json& extra = {});
void write_labels(const fs::path& path, const Volume<std::uint8_t>& v, const nlohmann::json& extra = {});

struct VolumeFile {
  VoxelGrid grid;
  std::vector<double> values;
  nlohmann::json sidecar;
};

VolumeFile read_volume(const fs::path& path);

/// 2D images use the volume format with nz = 1 and add fov_mm / pixel_pitch_mm.
void write_image(const fs::path& path, const Image2D<double>& img, const nlohmann::json& extra = {});
void write_mask(const fs::path& path, const Image2D<std::uint8_t>& mask, const nlohmann::json& extra = {});
Image2D<double> read_image(const fs::path& path, nlohmann::json* sidecar = nullptr);
Image2D<std::uint8_t> read_mask(const fs::path& path, nlohmann::json* sidecar = nullptr);

/// float32 (n_elements, n_samples) with sidecar {dt_us, t0_us, element_positions_mm, ...}.
void write_timeseries(const fs::path& path, const TimeSeries& ts);
TimeSeries read_timeseries(const fs::path& path);

/// 8-bit greyscale preview scaled to the image maximum.
void write_pgm(const fs::path& path, const Image2D<double>& img);

nlohmann::json read_json(const fs::path& path);
void write_json(const fs::path& path, const nlohmann::json& j);

/// Header + rows of a comma-separated file; '#' lines are skipped.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
};
CsvTable read_csv(const fs::path& path);

/// Lowercase hex SHA-256 of a byte buffer / file.
std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_file(const fs::path& path);

} // namespace qpat::io
