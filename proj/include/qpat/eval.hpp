#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace qpat {

/// |x - xhat| / x * 100. Throws DomainError for x <= 0.
double rel_error(double x, double xhat);
double abs_error(double x, double xhat);

/// 1 - sum_k min(h_i(k), h_b(k)) with both histograms over the pooled
/// min-max range and normalized to unit sum.
double gcnr(std::span<const double> inclusion, std::span<const double> background, int n_bins = 256);

double pearson_r(std::span<const double> xs, std::span<const double> ys);

struct MannWhitneyResult {
  double U = 0.0;  ///< for sample a: rank sum of a minus n_a(n_a+1)/2
  double p = 1.0;  ///< two-sided
  bool exact = false;
};

/// Exact enumeration when both groups have <= 8 members, otherwise the
/// tie-corrected normal approximation with continuity correction.
MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b);

/// Two-sided p from the normal approximation, whatever the sample size.
double mann_whitney_p_normal(std::span<const double> a, std::span<const double> b);

/// Two-sided p from enumerating every split of the pooled midranks.
double mann_whitney_p_exact(std::span<const double> a, std::span<const double> b);

/// Linear interpolation between order statistics (q in [0, 1]).
double quantile(std::vector<double> values, double q);
double median(std::vector<double> values);

struct MetricRow {
  std::string phantom_id;
  double wavelength_nm = 0.0;
  int region_id = 0;
  std::string kind;    ///< "background" | "inclusion"
  std::string method;  ///< "cal" | "gtphi" | ...
  double estimate = 0.0;
  double reference = 0.0;
  double rel_err = 0.0;  ///< percent
  double abs_err = 0.0;  ///< 1/cm
};

MetricRow make_row(std::string phantom_id, double wavelength_nm, int region_id, std::string kind,
                   std::string method, double estimate, double reference);

struct Summary {
  double median = 0.0;
  double half_iqr = 0.0;
  std::size_t count = 0;

  /// "median ± IQR/2"
  std::string format(int precision = 2) const;
};

struct GroupSummary {
  Summary rel_err;
  Summary abs_err;
};

/// Median and IQR/2 of rel_err and abs_err per (method, kind).
std::map<std::pair<std::string, std::string>, GroupSummary> summarize(std::span<const MetricRow> rows);
Summary summarize_values(std::span<const double> values);

void write_report_csv(const std::filesystem::path& path, std::span<const MetricRow> rows, bool append = false);
std::vector<MetricRow> read_report_csv(const std::filesystem::path& path);

} // namespace qpat
