#pragma once

#include <Eigen/Dense>

#include "qpat/error.hpp"

namespace qpat {

/// Homogeneous slab between air half-spaces. Coefficients in 1/mm.
struct SlabSample {
  double mu_a = 0.0;
  double mu_s_prime = 0.0;
  double g = 0.7;
  double n = 1.4;
  double thickness = 3.0;  ///< mm

  double mu_s() const { return mu_s_prime / (1.0 - g); }
  void validate() const;
};

/// Total reflectance (specular included) and total transmittance (unscattered
/// included) for collimated normal incidence.
struct DisMeasurement {
  double R = 0.0;
  double T = 0.0;
  double wavelength_nm = 0.0;

  void validate() const;
};

struct AdConfig {
  int quadrature_order = 8;
  /// Upper bound on the optical thickness of the starting layer.
  double max_thin_layer_tau = 1e-5;
};

/// Flux-form reflection and transmission operators of the slab interior (no
/// boundaries). Column j holds the fate of unit flux arriving in direction j.
/// Directions 0..N-1 are the quadrature cosines; direction N is the
/// collimated normal beam, which carries zero quadrature weight so nothing is
/// scattered back into it.
struct SlabOperators {
  Eigen::VectorXd mu;       ///< direction cosines (last = 1)
  Eigen::VectorXd weights;  ///< quadrature weights (last = 0)
  Eigen::MatrixXd R;
  Eigen::MatrixXd T;
  int doublings = 0;
};

/// Gauss-Legendre nodes/weights on [a, b].
void gauss_legendre(int n, double a, double b, Eigen::VectorXd& nodes, Eigen::VectorXd& weights);

SlabOperators slab_operators(const SlabSample& sample, const AdConfig& config = {});

/// Adding-doubling forward model.
DisMeasurement ad_forward(const SlabSample& sample, const AdConfig& config = {});

struct InverseConfig {
  AdConfig forward{};
  int grid_points = 12;
  double mu_a_lo = 1e-3, mu_a_hi = 1.0;          ///< coarse search, 1/mm
  double mus_prime_lo = 0.1, mus_prime_hi = 3.0; ///< coarse search, 1/mm
  double relative_tolerance = 1e-7;
  double residual_floor = 1e-3;
};

struct InverseResult {
  double mu_a = 0.0;
  double mu_s_prime = 0.0;
  double residual = 0.0;  ///< sqrt((R - Rm)^2 + (T - Tm)^2)
  int evaluations = 0;
};

class NoConvergenceError : public NumericalError {
public:
  NoConvergenceError(const std::string& what, InverseResult best) : NumericalError(what), best_(best) {}
  const InverseResult& best() const { return best_; }

private:
  InverseResult best_;
};

/// Recovers (mu_a, mu_s') from (R, T) for a slab of known thickness, g and n:
/// coarse log grid, coordinate descent in log space, Gauss-Newton polish.
InverseResult ad_inverse(const DisMeasurement& meas, double thickness, double g, double n,
                         const InverseConfig& config = {});

struct ThicknessSensitivity {
  double mu_a_rel = 0.0;
  double mu_s_prime_rel = 0.0;
};

/// Relative error in the recovered (mu_a, mu_s') caused by a relative
/// thickness error, from a central difference of the inversion.
ThicknessSensitivity propagate_thickness_error(const SlabSample& sample, double thickness_rel_err,
                                               const InverseConfig& config = {});

/// Both one-sided errors, (mu(d(1+h)) - mu(d)) / mu(d) and (mu(d) - mu(d(1-h))) / mu(d).
std::pair<ThicknessSensitivity, ThicknessSensitivity> one_sided_thickness_errors(const SlabSample& sample,
                                                                                double thickness_rel_err,
                                                                                const InverseConfig& config = {});

} // namespace qpat
