#include "qpat/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

namespace qpat::io {

using nlohmann::json;

namespace {

static_assert(sizeof(float) == 4);

std::uint32_t swap32(std::uint32_t v) {
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

void write_f32(const fs::path& path, const std::vector<float>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
  } else {
    for (float f : values) {
      std::uint32_t u = swap32(std::bit_cast<std::uint32_t>(f));
      out.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<double> decode(const std::vector<char>& bytes, const std::string& dtype, std::size_t count,
                           const fs::path& path) {
  std::vector<double> out(count);
  if (dtype == "float32") {
    if (bytes.size() != count * 4) throw IoError("size mismatch between data and sidecar: " + path.string());
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t u;
      std::memcpy(&u, bytes.data() + 4 * i, 4);
      if constexpr (std::endian::native == std::endian::big) u = swap32(u);
      out[i] = static_cast<double>(std::bit_cast<float>(u));
    }
  } else if (dtype == "uint8") {
    if (bytes.size() != count) throw IoError("size mismatch between data and sidecar: " + path.string());
    for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<unsigned char>(bytes[i]);
  } else {
    throw IoError("unsupported dtype '" + dtype + "' in " + path.string());
  }
  return out;
}

json grid_json(const VoxelGrid& g, const std::string& dtype) {
  return {{"dims", {g.dims[0], g.dims[1], g.dims[2]}},
          {"spacing_mm", {g.spacing.x, g.spacing.y, g.spacing.z}},
          {"origin_mm", {g.origin.x, g.origin.y, g.origin.z}},
          {"dtype", dtype},
          {"order", "C"},
          {"endianness", "little"}};
}

VoxelGrid image_as_volume(const PlaneGrid& p) { return {{p.nx, p.ny, 1}, {p.dx, p.dy, 1.0}, {p.x0, p.y0, 0.0}}; }

PlaneGrid volume_as_image(const VoxelGrid& g, const fs::path& path) {
  if (g.dims[2] != 1) throw DimensionError("expected a 2D image (nz = 1): " + path.string());
  return {g.dims[0], g.dims[1], g.spacing.x, g.spacing.y, g.origin.x, g.origin.y};
}

} // namespace

fs::path sidecar_path(const fs::path& bin) {
  fs::path p = bin;
  p.replace_extension(".json");
  return p;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

void write_volume(const fs::path& path, const VoxelGrid& grid, const std::vector<double>& values, const json& extra) {
  if (values.size() != grid.size()) throw DimensionError("write_volume: value count does not match grid");
  std::vector<float> f(values.begin(), values.end());
  write_f32(path, f);
  json side = grid_json(grid, "float32");
  if (extra.is_object()) side.update(extra);
  write_json(sidecar_path(path), side);
}

void write_volume(const fs::path& path, const Volume<float>& v, const json& extra) {
  write_f32(path, v.data);
  json side = grid_json(v.grid, "float32");
  if (extra.is_object()) side.update(extra);
  write_json(sidecar_path(path), side);
}

void write_labels(const fs::path& path, const Volume<std::uint8_t>& v, const json& extra) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.data.size()));
  json side = grid_json(v.grid, "uint8");
  if (extra.is_object()) side.update(extra);
  write_json(sidecar_path(path), side);
}

VolumeFile read_volume(const fs::path& path) {
  VolumeFile vf;
  vf.sidecar = read_json(sidecar_path(path));
  try {
    const auto& d = vf.sidecar.at("dims");
    const auto& s = vf.sidecar.at("spacing_mm");
    const auto& o = vf.sidecar.at("origin_mm");
    vf.grid.dims = {d[0].get<std::size_t>(), d[1].get<std::size_t>(), d[2].get<std::size_t>()};
    vf.grid.spacing = {s[0].get<double>(), s[1].get<double>(), s[2].get<double>()};
    vf.grid.origin = {o[0].get<double>(), o[1].get<double>(), o[2].get<double>()};
    if (vf.sidecar.value("order", "C") != "C") throw IoError("only C order is supported: " + path.string());
    vf.values = decode(read_bytes(path), vf.sidecar.value("dtype", "float32"), vf.grid.size(), path);
  } catch (const json::exception& e) {
    throw IoError("malformed sidecar for " + path.string() + ": " + e.what());
  }
  return vf;
}

void write_image(const fs::path& path, const Image2D<double>& img, const json& extra) {
  json side{{"fov_mm", {img.grid.dx * img.grid.nx, img.grid.dy * img.grid.ny}},
            {"pixel_pitch_mm", {img.grid.dx, img.grid.dy}}};
  if (extra.is_object()) side.update(extra);
  write_volume(path, image_as_volume(img.grid), img.data, side);
}

void write_mask(const fs::path& path, const Image2D<std::uint8_t>& mask, const json& extra) {
  Volume<std::uint8_t> v;
  v.grid = image_as_volume(mask.grid);
  v.data = mask.data;
  write_labels(path, v, extra);
}

Image2D<double> read_image(const fs::path& path, json* sidecar) {
  auto vf = read_volume(path);
  Image2D<double> img(volume_as_image(vf.grid, path));
  img.data = std::move(vf.values);
  if (sidecar) *sidecar = std::move(vf.sidecar);
  return img;
}

Image2D<std::uint8_t> read_mask(const fs::path& path, json* sidecar) {
  auto vf = read_volume(path);
  Image2D<std::uint8_t> img(volume_as_image(vf.grid, path));
  std::transform(vf.values.begin(), vf.values.end(), img.data.begin(),
                 [](double v) { return static_cast<std::uint8_t>(std::lround(v)); });
  if (sidecar) *sidecar = std::move(vf.sidecar);
  return img;
}

void write_timeseries(const fs::path& path, const TimeSeries& ts) {
  ts.validate();
  std::vector<float> f(ts.data.begin(), ts.data.end());
  write_f32(path, f);
  json pos = json::array();
  for (const auto& p : ts.positions) pos.push_back({p[0], p[1]});
  write_json(sidecar_path(path), {{"shape", {ts.n_elements, ts.n_samples}},
                                  {"dtype", "float32"},
                                  {"order", "C"},
                                  {"endianness", "little"},
                                  {"dt_us", ts.dt},
                                  {"t0_us", ts.t0},
                                  {"array_center_mm", {ts.array_center[0], ts.array_center[1]}},
                                  {"element_positions_mm", pos}});
}

TimeSeries read_timeseries(const fs::path& path) {
  const json side = read_json(sidecar_path(path));
  TimeSeries ts;
  try {
    ts.n_elements = side.at("shape")[0].get<std::size_t>();
    ts.n_samples = side.at("shape")[1].get<std::size_t>();
    ts.dt = side.at("dt_us").get<double>();
    ts.t0 = side.value("t0_us", 0.0);
    if (side.contains("array_center_mm"))
      ts.array_center = {side["array_center_mm"][0].get<double>(), side["array_center_mm"][1].get<double>()};
    for (const auto& p : side.at("element_positions_mm")) ts.positions.push_back({p[0].get<double>(), p[1].get<double>()});
    ts.data = decode(read_bytes(path), side.value("dtype", "float32"), ts.n_elements * ts.n_samples, path);
  } catch (const json::exception& e) {
    throw IoError("malformed time-series sidecar for " + path.string() + ": " + e.what());
  }
  ts.validate();
  return ts;
}

void write_pgm(const fs::path& path, const Image2D<double>& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const double peak = std::max(1e-300, *std::max_element(img.data.begin(), img.data.end()));
  out << "P5\n" << img.grid.nx << ' ' << img.grid.ny << "\n255\n";
  // PGM rows run top to bottom; our row 0 is the lowest y.
  for (std::size_t j = img.grid.ny; j-- > 0;)
    for (std::size_t i = 0; i < img.grid.nx; ++i) {
      const double v = std::clamp(img.at(i, j) / peak, 0.0, 1.0);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v))));
    }
}

std::size_t CsvTable::column(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw IoError("CSV column '" + name + "' not found");
  return static_cast<std::size_t>(it - header.begin());
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      const auto b = cell.find_first_not_of(" \t\r");
      const auto e = cell.find_last_not_of(" \t\r");
      cells.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
    }
    return cells;
  };
  CsvTable t;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (!have_header) {
      t.header = split(line);
      have_header = true;
    } else {
      t.rows.push_back(split(line));
    }
  }
  if (!have_header) throw IoError("empty CSV: " + path.string());
  return t;
}

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, md, &len, EVP_sha256(), nullptr) != 1) throw IoError("SHA-256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

std::string sha256_file(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return sha256_hex(bytes.data(), bytes.size());
}

} // namespace qpat::io
