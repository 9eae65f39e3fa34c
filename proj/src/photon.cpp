#include "qpat/photon.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <omp.h>

namespace qpat {

double hg_inverse_cdf(double g, double xi) {
  if (std::abs(g) < 1e-9) return 2.0 * xi - 1.0;
  const double t = (1.0 - g * g) / (1.0 - g + 2.0 * g * xi);
  return std::clamp((1.0 + g * g - t * t) / (2.0 * g), -1.0, 1.0);
}

HgDeflection scatter_hg(double g, RngStream& rng) {
  const double ct = hg_inverse_cdf(g, rng.uniform());
  return {ct, 2.0 * std::numbers::pi * rng.uniform()};
}

Vec3 deflect(const Vec3& d, double cos_theta, double azimuth) {
  const double st = std::sqrt(std::max(0.0, 1.0 - cos_theta * cos_theta));
  const double cp = std::cos(azimuth);
  const double sp = std::sin(azimuth);
  Vec3 out;
  if (std::abs(d.z) > 0.99999) {
    out = {st * cp, st * sp, cos_theta * (d.z > 0 ? 1.0 : -1.0)};
  } else {
    const double tmp = std::sqrt(1.0 - d.z * d.z);
    out = {st * (d.x * d.z * cp - d.y * sp) / tmp + d.x * cos_theta,
           st * (d.y * d.z * cp + d.x * sp) / tmp + d.y * cos_theta, -st * cp * tmp + d.z * cos_theta};
  }
  return out.normalized();
}

void IlluminationGeometry::validate(double phantom_radius) const {
  if (bundle_pairs < 1) throw ConfigError("illumination needs at least one bundle pair");
  if (!(ring_radius > phantom_radius)) throw ConfigError("illumination ring must lie outside the phantom");
  if (!(beam_divergence_half_angle_deg >= 0.0 && beam_divergence_half_angle_deg < 90.0))
    throw ConfigError("beam divergence half-angle must lie in [0, 90) degrees");
  if (spot_radius < 0.0) throw ConfigError("spot radius must be >= 0");
}

namespace {

/// Uniform point on the disc of radius r perpendicular to unit axis `a`.
Vec3 disc_offset(const Vec3& a, double r, RngStream& rng) {
  if (r <= 0.0) return {};
  const Vec3 helper = std::abs(a.z) < 0.9 ? Vec3{0, 0, 1} : Vec3{1, 0, 0};
  const Vec3 e1 = a.cross(helper).normalized();
  const Vec3 e2 = a.cross(e1);
  const double rho = r * std::sqrt(rng.uniform());
  const double phi = 2.0 * std::numbers::pi * rng.uniform();
  return e1 * (rho * std::cos(phi)) + e2 * (rho * std::sin(phi));
}

} // namespace

PhotonLaunch launch_photon(const LightSource& source, RngStream& rng) {
  if (const auto* beam = std::get_if<PencilBeam>(&source)) {
    const Vec3 dir = beam->direction.normalized();
    return {beam->position + disc_offset(dir, beam->spot_radius, rng), dir};
  }
  const auto& ring = std::get<IlluminationGeometry>(source);
  const int members = 2 * ring.bundle_pairs;
  const int m = std::min(members - 1, static_cast<int>(rng.uniform() * members));
  const int pair = m / 2;
  const double side = (m % 2 == 0) ? 1.0 : -1.0;
  const double az = (ring.first_azimuth_deg + 360.0 * pair / ring.bundle_pairs) * std::numbers::pi / 180.0;
  const Vec3 fibre{ring.ring_radius * std::cos(az), ring.ring_radius * std::sin(az),
                   ring.ring_z + side * ring.axial_offset};
  const Vec3 axis = (ring.target_point - fibre).normalized();
  const double cos_max = std::cos(ring.beam_divergence_half_angle_deg * std::numbers::pi / 180.0);
  const double ct = 1.0 - rng.uniform() * (1.0 - cos_max);
  const Vec3 dir = deflect(axis, ct, 2.0 * std::numbers::pi * rng.uniform());
  return {fibre + disc_offset(axis, ring.spot_radius, rng), dir};
}

OpticalMedium OpticalMedium::from_properties(const PropertyVolumes& props) {
  return {props.mu_a.grid, props.mu_a.data, props.mu_s.data, props.g.data};
}

OpticalMedium OpticalMedium::homogeneous(const VoxelGrid& grid, double mu_a, double mu_s, double g) {
  return {grid, std::vector<float>(grid.size(), static_cast<float>(mu_a)),
          std::vector<float>(grid.size(), static_cast<float>(mu_s)),
          std::vector<float>(grid.size(), static_cast<float>(g))};
}

void OpticalMedium::validate() const {
  grid.validate();
  const std::size_t n = grid.size();
  if (mu_a.size() != n || mu_s.size() != n || g.size() != n)
    throw DimensionError("optical property volumes are not aligned with the grid");
  for (std::size_t v = 0; v < n; ++v) {
    if (!std::isfinite(mu_a[v]) || !std::isfinite(mu_s[v]) || !std::isfinite(g[v]))
      throw ConfigError("non-finite optical property at voxel " + std::to_string(v));
    if (mu_a[v] < 0.0f || mu_s[v] < 0.0f || !(g[v] > -1.0f && g[v] < 1.0f))
      throw ConfigError("optical property out of range at voxel " + std::to_string(v));
  }
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Fixed-point scale: leaves ~2^(63-58) = 32 units of weight per photon of
/// headroom in any single voxel while resolving deposits down to
/// 2^-(58 - log2 n).
double tally_scale(std::uint64_t n_photons) {
  int bits = 0;
  while ((std::uint64_t{1} << bits) < n_photons + 1 && bits < 62) ++bits;
  return std::ldexp(1.0, 58 - bits);
}

struct Accumulator {
  std::vector<std::int64_t> absorbed;
  std::vector<std::int64_t> track;
  std::int64_t escaped = 0;
  std::int64_t killed = 0;
  std::int64_t created = 0;

  Accumulator(std::size_t n, bool with_track) : absorbed(n, 0), track(with_track ? n : 0, 0) {}

  void merge_into(TransportTallies& t) const {
    for (std::size_t v = 0; v < absorbed.size(); ++v) t.absorbed[v] += absorbed[v];
    for (std::size_t v = 0; v < track.size(); ++v) t.track[v] += track[v];
    t.escaped += escaped;
    t.roulette_killed += killed;
    t.roulette_created += created;
  }
};

inline std::int64_t fixed(double w, double scale) { return std::llround(w * scale); }

/// Distance along `dir` from `pos` into the box [lo, hi]; negative if
/// already inside, +inf if the ray misses.
double ray_box_entry(const Vec3& pos, const Vec3& dir, const Vec3& lo, const Vec3& hi) {
  double t0 = -kInf, t1 = kInf;
  for (int a = 0; a < 3; ++a) {
    if (dir[a] == 0.0) {
      if (pos[a] < lo[a] || pos[a] > hi[a]) return kInf;
      continue;
    }
    double ta = (lo[a] - pos[a]) / dir[a];
    double tb = (hi[a] - pos[a]) / dir[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t1 < std::max(t0, 0.0)) return kInf;
  return t0;
}

/// One photon history: launch, voxel-by-voxel transport with continuous
/// absorption weighting, HG scattering, Russian roulette.
void trace_photon(const OpticalMedium& m, const LightSource& source, const TransportConfig& cfg, double scale,
                  std::uint64_t photon_index, Accumulator& acc) {
  RngStream rng(cfg.seed, photon_index);
  const auto& grid = m.grid;
  auto [pos, dir] = launch_photon(source, rng);
  double w = 1.0;

  const Vec3 lo = grid.origin;
  const Vec3 hi = grid.origin + grid.extent();
  const double t_enter = ray_box_entry(pos, dir, lo, hi);
  if (t_enter == kInf) {
    acc.escaped += fixed(w, scale);
    return;
  }
  if (t_enter > 0.0) pos = pos + dir * t_enter;

  const long n[3] = {static_cast<long>(grid.dims[0]), static_cast<long>(grid.dims[1]),
                     static_cast<long>(grid.dims[2])};
  long idx[3];
  for (int a = 0; a < 3; ++a)
    idx[a] = std::clamp(static_cast<long>(std::floor((pos[a] - lo[a]) / grid.spacing[a])), 0L, n[a] - 1);

  double s_rem = -std::log(rng.uniform_open0());
  for (;;) {
    const std::size_t v = grid.index(static_cast<std::size_t>(idx[0]), static_cast<std::size_t>(idx[1]),
                                     static_cast<std::size_t>(idx[2]));
    const double mu_a = m.mu_a[v];
    const double mu_s = m.mu_s[v];

    double t_bound = kInf;
    int exit_axis = 0;
    for (int a = 0; a < 3; ++a) {
      double t;
      if (dir[a] > 0.0)
        t = (lo[a] + static_cast<double>(idx[a] + 1) * grid.spacing[a] - pos[a]) / dir[a];
      else if (dir[a] < 0.0)
        t = (lo[a] + static_cast<double>(idx[a]) * grid.spacing[a] - pos[a]) / dir[a];
      else
        continue;
      t = std::max(t, 0.0);
      if (t < t_bound) {
        t_bound = t;
        exit_axis = a;
      }
    }
    const double t_scatter = mu_s > 0.0 ? s_rem / mu_s : kInf;
    const bool scatters = t_scatter < t_bound;
    const double step = scatters ? t_scatter : t_bound;

    if (mu_a > 0.0) {
      const double dw = w * -std::expm1(-mu_a * step);
      acc.absorbed[v] += fixed(dw, scale);
      w -= dw;
    } else if (!acc.track.empty()) {
      acc.track[v] += fixed(w * step, scale);
    }
    pos = pos + dir * step;

    if (scatters) {
      const auto hg = scatter_hg(m.g[v], rng);
      dir = deflect(dir, hg.cos_theta, hg.azimuth);
      s_rem = -std::log(rng.uniform_open0());
    } else {
      s_rem -= mu_s * step;
      const long step_dir = dir[exit_axis] > 0.0 ? 1 : -1;
      idx[exit_axis] += step_dir;
      if (idx[exit_axis] < 0 || idx[exit_axis] >= n[exit_axis]) {
        acc.escaped += fixed(w, scale);
        return;
      }
      pos[exit_axis] = lo[exit_axis] + static_cast<double>(step_dir > 0 ? idx[exit_axis] : idx[exit_axis] + 1) *
                                           grid.spacing[exit_axis];
    }

    if (w < cfg.roulette_threshold) {
      if (rng.uniform() < cfg.roulette_survival) {
        const double boosted = w / cfg.roulette_survival;
        acc.created += fixed(boosted - w, scale);
        w = boosted;
      } else {
        acc.killed += fixed(w, scale);
        return;
      }
    }
  }
}

void check_inputs(const OpticalMedium& medium, const LightSource& source, const TransportConfig& cfg) {
  if (cfg.n_photons < 1) throw ConfigError("n_photons must be >= 1");
  if (!(cfg.roulette_threshold > 0.0) || !(cfg.roulette_survival > 0.0 && cfg.roulette_survival <= 1.0))
    throw ConfigError("invalid Russian roulette parameters");
  medium.validate();
  if (const auto* ring = std::get_if<IlluminationGeometry>(&source)) ring->validate(0.0);
}

bool needs_track(const OpticalMedium& m) {
  return std::any_of(m.mu_a.begin(), m.mu_a.end(), [](float v) { return v == 0.0f; });
}

FluenceVolume finish(const OpticalMedium& m, const TransportConfig& cfg, TransportTallies tallies) {
  FluenceVolume out;
  out.grid = m.grid;
  out.phi.assign(m.grid.size(), 0.0);
  const double norm = 1.0 / (tallies.scale * m.grid.voxel_volume() * static_cast<double>(cfg.n_photons));
  double absorbed = 0.0;
  for (std::size_t v = 0; v < out.phi.size(); ++v) {
    absorbed += static_cast<double>(tallies.absorbed[v]);
    if (m.mu_a[v] > 0.0f)
      out.phi[v] = static_cast<double>(tallies.absorbed[v]) * norm / static_cast<double>(m.mu_a[v]);
    else if (!tallies.track.empty())
      out.phi[v] = static_cast<double>(tallies.track[v]) * norm;
  }
  out.balance.launched = static_cast<double>(cfg.n_photons);
  out.balance.absorbed = absorbed / tallies.scale;
  out.balance.escaped = static_cast<double>(tallies.escaped) / tallies.scale;
  out.balance.roulette_net =
      static_cast<double>(tallies.roulette_created - tallies.roulette_killed) / tallies.scale;
  out.tallies = std::move(tallies);
  return out;
}

TransportTallies empty_tallies(const OpticalMedium& m, const TransportConfig& cfg, bool with_track) {
  TransportTallies t;
  t.scale = tally_scale(cfg.n_photons);
  t.absorbed.assign(m.grid.size(), 0);
  if (with_track) t.track.assign(m.grid.size(), 0);
  t.launched = cfg.n_photons;
  return t;
}

} // namespace

namespace serial {

FluenceVolume simulate_fluence(const OpticalMedium& medium, const LightSource& source, const TransportConfig& config) {
  check_inputs(medium, source, config);
  const bool with_track = needs_track(medium);
  TransportTallies tallies = empty_tallies(medium, config, with_track);
  Accumulator acc(medium.grid.size(), with_track);
  for (std::uint64_t p = 0; p < config.n_photons; ++p) trace_photon(medium, source, config, tallies.scale, p, acc);
  acc.merge_into(tallies);
  return finish(medium, config, std::move(tallies));
}

} // namespace serial

FluenceVolume simulate_fluence(const OpticalMedium& medium, const LightSource& source, const TransportConfig& config) {
  check_inputs(medium, source, config);
  const bool with_track = needs_track(medium);
  TransportTallies tallies = empty_tallies(medium, config, with_track);
  const auto n = static_cast<std::int64_t>(config.n_photons);
  const int threads = config.threads > 0 ? config.threads : omp_get_max_threads();

#pragma omp parallel num_threads(threads)
  {
    Accumulator acc(medium.grid.size(), with_track);
#pragma omp for schedule(dynamic, 4096)
    for (std::int64_t p = 0; p < n; ++p)
      trace_photon(medium, source, config, tallies.scale, static_cast<std::uint64_t>(p), acc);
    // Integer sums commute, so the merge order does not affect the result.
#pragma omp critical(qpat_fluence_merge)
    acc.merge_into(tallies);
  }
  return finish(medium, config, std::move(tallies));
}

PressureField compute_p0(const Volume<float>& mu_a, const FluenceVolume& phi, const Volume<float>& gruneisen) {
  if (!(mu_a.grid == phi.grid) || !(gruneisen.grid == phi.grid) || phi.phi.size() != phi.grid.size())
    throw DimensionError("compute_p0: mu_a, fluence and Grueneisen grids differ");
  PressureField out{phi.grid, std::vector<double>(phi.grid.size(), 0.0)};
  for (std::size_t v = 0; v < out.p0.size(); ++v)
    out.p0[v] = static_cast<double>(gruneisen.data[v]) * static_cast<double>(mu_a.data[v]) * phi.phi[v];
  return out;
}

} // namespace qpat
