#include "qpat/slab.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace qpat {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void SlabSample::validate() const {
  if (!(std::isfinite(mu_a) && std::isfinite(mu_s_prime) && std::isfinite(thickness) && std::isfinite(n)))
    throw DomainError("slab: non-finite property");
  if (mu_a < 0.0 || mu_s_prime < 0.0) throw DomainError("slab: coefficients must be >= 0");
  if (!(g > -1.0 && g < 1.0)) throw DomainError("slab: anisotropy must lie in (-1, 1)");
  if (!(n >= 1.0)) throw DomainError("slab: refractive index must be >= 1");
  if (!(thickness > 0.0)) throw DomainError("slab: thickness must be positive");
}

void DisMeasurement::validate() const {
  if (!(std::isfinite(R) && std::isfinite(T)) || R < 0.0 || T < 0.0 || R + T > 1.0 + 1e-9)
    throw DomainError("measurement must satisfy R, T >= 0 and R + T <= 1");
}

void gauss_legendre(int n, double a, double b, VectorXd& nodes, VectorXd& weights) {
  if (n < 1) throw ConfigError("Gauss-Legendre order must be >= 1");
  nodes.resize(n);
  weights.resize(n);
  const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
  for (int i = 0; i < n; ++i) {
    // Newton on P_n from the Chebyshev-like initial guess.
    double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 1.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      if (n == 1) p0 = 1.0;
      dp = n * (x * p1 - p0) / (x * x - 1.0);
      const double dx = p1 / dp;
      x -= dx;
      if (std::abs(dx) < 1e-16) break;
    }
    // ascending order on [a, b]
    nodes(n - 1 - i) = mid + half * x;
    weights(n - 1 - i) = half * 2.0 / ((1.0 - x * x) * dp * dp);
  }
}

namespace {

/// Unpolarised Fresnel reflectance for light inside medium n hitting air at
/// incidence cosine mu.
double fresnel_internal(double n, double mu) {
  if (n == 1.0) return 0.0;
  const double sin2 = 1.0 - mu * mu;
  const double st2 = n * n * sin2;
  if (st2 >= 1.0) return 1.0;
  const double ct = std::sqrt(1.0 - st2);
  const double rs = (n * mu - ct) / (n * mu + ct);
  const double rp = (mu - n * ct) / (mu + n * ct);
  return 0.5 * (rs * rs + rp * rp);
}

struct Quadrature {
  VectorXd mu, w;  // N quadrature points + collimated (mu = 1, w = 0)
};

Quadrature make_quadrature(int order, double n) {
  if (order < 4 || order % 2 != 0) throw ConfigError("quadrature order must be even and >= 4");
  Quadrature q;
  q.mu.resize(order + 1);
  q.w.resize(order + 1);
  VectorXd x, w;
  if (n > 1.0) {
    const double mu_c = std::sqrt(1.0 - 1.0 / (n * n));
    gauss_legendre(order / 2, 0.0, mu_c, x, w);
    q.mu.head(order / 2) = x;
    q.w.head(order / 2) = w;
    gauss_legendre(order / 2, mu_c, 1.0, x, w);
    q.mu.segment(order / 2, order / 2) = x;
    q.w.segment(order / 2, order / 2) = w;
  } else {
    gauss_legendre(order, 0.0, 1.0, x, w);
    q.mu.head(order) = x;
    q.w.head(order) = w;
  }
  q.mu(order) = 1.0;
  q.w(order) = 0.0;
  return q;
}

/// Fractions of energy from direction j scattered forward (same hemisphere)
/// and backward into quadrature direction i, from the azimuthally averaged
/// HG phase function; columns renormalised so each sums to one.
void redistribution(const Quadrature& q, double g, MatrixXd& fwd, MatrixXd& bwd) {
  const auto m = q.mu.size();
  int L = 1;
  if (g != 0.0) L = std::clamp(static_cast<int>(std::ceil(std::log(1e-15) / std::log(std::abs(g)))), 1, 2000);
  // P_l at every direction
  MatrixXd P(L + 1, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    P(0, i) = 1.0;
    if (L >= 1) P(1, i) = q.mu(i);
    for (int l = 2; l <= L; ++l) P(l, i) = ((2.0 * l - 1.0) * q.mu(i) * P(l - 1, i) - (l - 1.0) * P(l - 2, i)) / l;
  }
  fwd = MatrixXd::Zero(m, m);
  bwd = MatrixXd::Zero(m, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    for (Eigen::Index i = 0; i < m; ++i) {
      if (q.w(i) == 0.0) continue;
      double hf = 0.0, hb = 0.0, gl = 1.0;
      for (int l = 0; l <= L; ++l) {
        const double term = 0.5 * (2.0 * l + 1.0) * gl * P(l, i) * P(l, j);
        hf += term;
        hb += (l % 2 == 0) ? term : -term;
        gl *= g;
      }
      fwd(i, j) = q.w(i) * std::max(0.0, hf);
      bwd(i, j) = q.w(i) * std::max(0.0, hb);
    }
    const double s = fwd.col(j).sum() + bwd.col(j).sum();
    if (s > 0.0) {
      fwd.col(j) /= s;
      bwd.col(j) /= s;
    }
  }
}

/// R + T D R T and T D T with D = (I - R R)^-1 for two identical layers.
void double_layer(MatrixXd& R, MatrixXd& T) {
  const auto m = R.rows();
  const MatrixXd I = MatrixXd::Identity(m, m);
  const Eigen::PartialPivLU<MatrixXd> lu(I - R * R);
  const MatrixXd DT = lu.solve(T);
  const MatrixXd R2 = R + T * R * DT;
  const MatrixXd T2 = T * DT;
  R = R2;
  T = T2;
}

} // namespace

SlabOperators slab_operators(const SlabSample& sample, const AdConfig& config) {
  sample.validate();
  if (!(config.max_thin_layer_tau > 0.0)) throw ConfigError("thin-layer optical thickness must be positive");
  const Quadrature q = make_quadrature(config.quadrature_order, sample.n);
  const auto m = q.mu.size();
  SlabOperators ops;
  ops.mu = q.mu;
  ops.weights = q.w;

  const double mu_s = sample.mu_s();
  const double mu_t = sample.mu_a + mu_s;
  const double tau = mu_t * sample.thickness;
  if (tau == 0.0) {
    ops.R = MatrixXd::Zero(m, m);
    ops.T = MatrixXd::Identity(m, m);
    return ops;
  }
  const double albedo = mu_s / mu_t;

  // Thin starting layer: at least 2^10 doublings, and no thicker than max_thin_layer_tau.
  int k = 10;
  while (tau / std::ldexp(1.0, k) > config.max_thin_layer_tau) ++k;
  const double dtau = tau / std::ldexp(1.0, k);

  MatrixXd fwd, bwd;
  redistribution(q, sample.g, fwd, bwd);
  ops.R = MatrixXd::Zero(m, m);
  ops.T = MatrixXd::Zero(m, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    // Energy that interacts within the layer: exact for the direct beam, and
    // the scattered part redistributed once. Conserves energy when albedo = 1.
    const double interact = -std::expm1(-dtau / q.mu(j));
    ops.T(j, j) = 1.0 - interact;
    ops.T.col(j) += albedo * interact * fwd.col(j);
    ops.R.col(j) = albedo * interact * bwd.col(j);
  }
  for (int d = 0; d < k; ++d) double_layer(ops.R, ops.T);
  ops.doublings = k;
  return ops;
}

DisMeasurement ad_forward(const SlabSample& sample, const AdConfig& config) {
  const SlabOperators ops = slab_operators(sample, config);
  const auto m = ops.mu.size();
  const Eigen::Index c = m - 1;
  const MatrixXd I = MatrixXd::Identity(m, m);

  VectorXd bdiag(m);
  for (Eigen::Index i = 0; i < m; ++i) bdiag(i) = fresnel_internal(sample.n, ops.mu(i));
  const double r0 = bdiag(c);
  const MatrixXd B = bdiag.asDiagonal();
  const MatrixXd IB = I - B;

  // Slab plus the lower boundary, seen from inside the top surface.
  const Eigen::PartialPivLU<MatrixXd> lu_bot(I - ops.R * B);
  const MatrixXd Y = lu_bot.solve(ops.T);
  const MatrixXd R_sb = ops.R + ops.T * B * Y;
  const MatrixXd T_sb = IB * Y;

  // Top boundary: collimated beam enters with 1 - r0; upward light is partly
  // reflected back down.
  VectorXd x = VectorXd::Zero(m);
  x(c) = 1.0 - r0;
  const VectorXd u = Eigen::PartialPivLU<MatrixXd>(I - R_sb * B).solve(R_sb * x);
  DisMeasurement out;
  out.R = r0 + (IB * u).sum();
  out.T = (T_sb * (x + B * u)).sum();
  return out;
}

namespace {

struct Objective {
  DisMeasurement target;
  double thickness, g, n;
  AdConfig forward;
  int evaluations = 0;

  /// (R - Rm, T - Tm) at log-space parameters.
  Eigen::Vector2d residuals(const Eigen::Vector2d& x) {
    ++evaluations;
    SlabSample s{std::exp(x(0)), std::exp(x(1)), g, n, thickness};
    const auto m = ad_forward(s, forward);
    return {m.R - target.R, m.T - target.T};
  }
  double operator()(const Eigen::Vector2d& x) { return residuals(x).norm(); }
};

} // namespace

InverseResult ad_inverse(const DisMeasurement& meas, double thickness, double g, double n, const InverseConfig& cfg) {
  meas.validate();
  if (!(thickness > 0.0)) throw DomainError("slab thickness must be positive");
  if (cfg.grid_points < 2) throw ConfigError("inverse search needs at least two grid points per axis");
  if (!(cfg.mu_a_lo > 0.0 && cfg.mu_a_hi > cfg.mu_a_lo && cfg.mus_prime_lo > 0.0 && cfg.mus_prime_hi > cfg.mus_prime_lo))
    throw ConfigError("inverse search bounds must be positive and ordered");

  Objective f{meas, thickness, g, n, cfg.forward};
  const double log_floor = std::log(1e-9);
  const double log_ceiling = std::log(1e3);

  // Coarse log grid.
  const double la0 = std::log(cfg.mu_a_lo), la1 = std::log(cfg.mu_a_hi);
  const double ls0 = std::log(cfg.mus_prime_lo), ls1 = std::log(cfg.mus_prime_hi);
  const int G = cfg.grid_points;
  Eigen::Vector2d best(la0, ls0);
  double best_r = std::numeric_limits<double>::infinity();
  for (int i = 0; i < G; ++i)
    for (int j = 0; j < G; ++j) {
      const Eigen::Vector2d x(la0 + (la1 - la0) * i / (G - 1), ls0 + (ls1 - ls0) * j / (G - 1));
      const double r = f(x);
      if (r < best_r) {
        best_r = r;
        best = x;
      }
    }

  // Coordinate descent with step expansion on success and halving on failure.
  Eigen::Vector2d h(0.5 * (la1 - la0) / (G - 1), 0.5 * (ls1 - ls0) / (G - 1));
  while (h.maxCoeff() > cfg.relative_tolerance && best_r > 0.0) {
    for (int c = 0; c < 2; ++c) {
      bool moved = false;
      for (double sgn : {1.0, -1.0}) {
        Eigen::Vector2d x = best;
        x(c) = std::clamp(x(c) + sgn * h(c), log_floor, log_ceiling);
        if (x(c) == best(c)) continue;
        const double r = f(x);
        if (r < best_r) {
          best_r = r;
          best = x;
          moved = true;
          break;
        }
      }
      h(c) = moved ? std::min(2.0 * h(c), 1.0) : 0.5 * h(c);
    }
    if (f.evaluations > 20000) break;
  }

  // Gauss-Newton polish on the square 2x2 system.
  for (int it = 0; it < 20 && best_r > 0.0; ++it) {
    const Eigen::Vector2d r0 = f.residuals(best);
    Eigen::Matrix2d J;
    for (int c = 0; c < 2; ++c) {
      Eigen::Vector2d xp = best;
      const double step = 1e-6;
      xp(c) += step;
      J.col(c) = (f.residuals(xp) - r0) / step;
    }
    if (std::abs(J.determinant()) < 1e-300) break;
    Eigen::Vector2d dx = -J.partialPivLu().solve(r0);
    bool improved = false;
    for (int ls = 0; ls < 30; ++ls) {
      Eigen::Vector2d x = best + dx;
      x = x.cwiseMax(log_floor).cwiseMin(log_ceiling);
      const double r = f(x);
      if (r < best_r) {
        best_r = r;
        best = x;
        improved = true;
        break;
      }
      dx *= 0.5;
    }
    if (!improved || dx.cwiseAbs().maxCoeff() < cfg.relative_tolerance) break;
  }

  InverseResult res{std::exp(best(0)), std::exp(best(1)), best_r, f.evaluations};
  if (!(best_r <= cfg.residual_floor))
    throw NoConvergenceError("inverse adding-doubling did not reach the residual floor (residual " +
                                 std::to_string(best_r) + ")",
                             res);
  return res;
}

std::pair<ThicknessSensitivity, ThicknessSensitivity> one_sided_thickness_errors(const SlabSample& sample,
                                                                                double h, const InverseConfig& cfg) {
  sample.validate();
  if (!(h >= 0.0 && h <= 0.1)) throw DomainError("thickness perturbation must lie in [0, 0.1]");
  DisMeasurement m = ad_forward(sample, cfg.forward);
  const auto at = [&](double d) { return ad_inverse(m, d, sample.g, sample.n, cfg); };
  const auto mid = at(sample.thickness);
  const auto up = at(sample.thickness * (1.0 + h));
  const auto dn = at(sample.thickness * (1.0 - h));
  return {{(up.mu_a - mid.mu_a) / mid.mu_a, (up.mu_s_prime - mid.mu_s_prime) / mid.mu_s_prime},
          {(mid.mu_a - dn.mu_a) / mid.mu_a, (mid.mu_s_prime - dn.mu_s_prime) / mid.mu_s_prime}};
}

ThicknessSensitivity propagate_thickness_error(const SlabSample& sample, double h, const InverseConfig& cfg) {
  sample.validate();
  if (!(h >= 0.0 && h <= 0.1)) throw DomainError("thickness perturbation must lie in [0, 0.1]");
  if (h == 0.0) return {};
  DisMeasurement m = ad_forward(sample, cfg.forward);
  const auto mid = ad_inverse(m, sample.thickness, sample.g, sample.n, cfg);
  const auto up = ad_inverse(m, sample.thickness * (1.0 + h), sample.g, sample.n, cfg);
  const auto dn = ad_inverse(m, sample.thickness * (1.0 - h), sample.g, sample.n, cfg);
  return {std::abs(up.mu_a - dn.mu_a) / (2.0 * mid.mu_a),
          std::abs(up.mu_s_prime - dn.mu_s_prime) / (2.0 * mid.mu_s_prime)};
}

} // namespace qpat
