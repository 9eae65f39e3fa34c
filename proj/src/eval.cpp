#include "qpat/eval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "qpat/error.hpp"
#include "qpat/io.hpp"

namespace qpat {

double rel_error(double x, double xhat) {
  if (!(x > 0.0)) throw DomainError("relative error needs a positive reference");
  return std::abs(x - xhat) / x * 100.0;
}

double abs_error(double x, double xhat) { return std::abs(x - xhat); }

double gcnr(std::span<const double> inclusion, std::span<const double> background, int n_bins) {
  if (inclusion.empty() || background.empty()) throw DomainError("gCNR needs two non-empty samples");
  if (n_bins < 1) throw ConfigError("gCNR needs at least one bin");
  double lo = inclusion[0], hi = inclusion[0];
  for (auto s : {inclusion, background})
    for (double v : s) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const auto bins = static_cast<std::size_t>(n_bins);
  std::vector<double> hi_h(bins, 0.0), hb_h(bins, 0.0);
  auto fill = [&](std::span<const double> s, std::vector<double>& h) {
    const double w = 1.0 / static_cast<double>(s.size());
    for (double v : s) {
      std::size_t k = 0;
      if (hi > lo) k = std::min(bins - 1, static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins)));
      h[k] += w;
    }
  };
  fill(inclusion, hi_h);
  fill(background, hb_h);
  double overlap = 0.0;
  for (std::size_t k = 0; k < bins; ++k) overlap += std::min(hi_h[k], hb_h[k]);
  return std::clamp(1.0 - overlap, 0.0, 1.0);
}

double pearson_r(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw DimensionError("pearson_r: samples differ in length");
  if (xs.size() < 2) throw DomainError("pearson_r needs at least two points");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (!(sxx > 0.0 && syy > 0.0)) throw DomainError("pearson_r: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

namespace {

/// Midranks (1-based) of the pooled sample a ++ b.
std::vector<double> midranks(std::span<const double> a, std::span<const double> b, double* tie_term) {
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return pooled[i] < pooled[j]; });
  std::vector<double> rank(pooled.size());
  double ties = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && pooled[order[j + 1]] == pooled[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    const double t = static_cast<double>(j - i + 1);
    ties += t * t * t - t;
    i = j + 1;
  }
  if (tie_term) *tie_term = ties;
  return rank;
}

double u_statistic(const std::vector<double>& rank, std::size_t na) {
  double ra = 0.0;
  for (std::size_t i = 0; i < na; ++i) ra += rank[i];
  return ra - static_cast<double>(na * (na + 1)) / 2.0;
}

void require_nonempty(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw DomainError("Mann-Whitney U needs two non-empty samples");
}

} // namespace

double mann_whitney_p_normal(std::span<const double> a, std::span<const double> b) {
  require_nonempty(a, b);
  double ties = 0.0;
  const auto rank = midranks(a, b, &ties);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double N = na + nb;
  const double U = u_statistic(rank, a.size());
  const double mu = na * nb / 2.0;
  double var = na * nb / 12.0 * (N + 1.0);
  if (N > 1.0) var -= na * nb / 12.0 * ties / (N * (N - 1.0));
  if (!(var > 0.0)) return 1.0;
  const double dev = std::abs(U - mu) - 0.5;
  if (dev <= 0.0) return 1.0;
  return std::min(1.0, std::erfc(dev / std::sqrt(var) / std::sqrt(2.0)));
}

double mann_whitney_p_exact(std::span<const double> a, std::span<const double> b) {
  require_nonempty(a, b);
  const std::size_t N = a.size() + b.size();
  if (N > 24) throw DomainError("exact Mann-Whitney enumeration limited to 24 pooled observations");
  const auto rank = midranks(a, b, nullptr);
  const std::size_t na = a.size();
  const double mu = static_cast<double>(na * b.size()) / 2.0;
  const double observed = std::abs(u_statistic(rank, na) - mu);
  const double base = static_cast<double>(na * (na + 1)) / 2.0;
  std::uint64_t total = 0, extreme = 0;
  for (std::uint32_t mask = 0; mask < (1u << N); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) != na) continue;
    double ra = 0.0;
    for (std::size_t i = 0; i < N; ++i)
      if (mask & (1u << i)) ra += rank[i];
    ++total;
    if (std::abs(ra - base - mu) >= observed - 1e-9) ++extreme;
  }
  return static_cast<double>(extreme) / static_cast<double>(total);
}

MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b) {
  require_nonempty(a, b);
  MannWhitneyResult r;
  r.U = u_statistic(midranks(a, b, nullptr), a.size());
  r.exact = a.size() <= 8 && b.size() <= 8;
  r.p = r.exact ? mann_whitney_p_exact(a, b) : mann_whitney_p_normal(a, b);
  return r;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw DomainError("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw DomainError("quantile level must lie in [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

MetricRow make_row(std::string phantom_id, double wavelength_nm, int region_id, std::string kind, std::string method,
                   double estimate, double reference) {
  return {std::move(phantom_id), wavelength_nm, region_id, std::move(kind), std::move(method), estimate, reference,
          rel_error(reference, estimate), abs_error(reference, estimate)};
}

std::string Summary::format(int precision) const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << median << " ± " << half_iqr;
  return os.str();
}

Summary summarize_values(std::span<const double> values) {
  std::vector<double> v(values.begin(), values.end());
  if (v.empty()) return {};
  return {quantile(v, 0.5), 0.5 * (quantile(v, 0.75) - quantile(v, 0.25)), v.size()};
}

std::map<std::pair<std::string, std::string>, GroupSummary> summarize(std::span<const MetricRow> rows) {
  std::map<std::pair<std::string, std::string>, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const auto& r : rows) {
    auto& g = groups[{r.method, r.kind}];
    g.first.push_back(r.rel_err);
    g.second.push_back(r.abs_err);
  }
  std::map<std::pair<std::string, std::string>, GroupSummary> out;
  for (const auto& [key, vals] : groups) out[key] = {summarize_values(vals.first), summarize_values(vals.second)};
  return out;
}

void write_report_csv(const std::filesystem::path& path, std::span<const MetricRow> rows, bool append) {
  const bool header = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  if (header) {
    out << "# quantiles: linear interpolation between order statistics; rel_err in percent, abs_err in 1/cm\n";
    out << "phantom_id,wavelength_nm,region_id,kind,method,estimate,reference,rel_err,abs_err\n";
  }
  out << std::setprecision(17);
  for (const auto& r : rows)
    out << r.phantom_id << ',' << r.wavelength_nm << ',' << r.region_id << ',' << r.kind << ',' << r.method << ','
        << r.estimate << ',' << r.reference << ',' << r.rel_err << ',' << r.abs_err << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<MetricRow> read_report_csv(const std::filesystem::path& path) {
  const auto t = io::read_csv(path);
  const auto c_id = t.column("phantom_id"), c_wl = t.column("wavelength_nm"), c_reg = t.column("region_id"),
             c_kind = t.column("kind"), c_m = t.column("method"), c_est = t.column("estimate"),
             c_ref = t.column("reference"), c_rel = t.column("rel_err"), c_abs = t.column("abs_err");
  std::vector<MetricRow> rows;
  try {
    for (const auto& r : t.rows)
      rows.push_back({r.at(c_id), std::stod(r.at(c_wl)), std::stoi(r.at(c_reg)), r.at(c_kind), r.at(c_m),
                      std::stod(r.at(c_est)), std::stod(r.at(c_ref)), std::stod(r.at(c_rel)), std::stod(r.at(c_abs))});
  } catch (const std::exception& e) {
    throw IoError("malformed report " + path.string() + ": " + e.what());
  }
  return rows;
}

} // namespace qpat
