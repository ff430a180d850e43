#pragma once

#include <optional>
#include <string>

#include "pmedit/types.hpp"

namespace pmedit {

enum class Method { ROME, MEMIT, EMMET };

std::string method_name(Method m);
Method method_from_name(const std::string& name);

struct SolverConfig {
  Method method = Method::EMMET;
  double lambda = 0.1;                      // preservation weight (MEMIT)
  double alpha = 0.1;                       // D-regularizer (EMMET)
  double condition_warn_threshold = 1e8;
};

// lambda must be > 0 for MEMIT, alpha >= 0; throws ConfigError.
void validate_solver_config(const SolverConfig& config);

struct CovarianceResult {
  Matrix c0;             // d_k x d_k, symmetric PSD
  Index rank = 0;        // numerical rank of K0 (singular values > 1e-10 * max)
  bool rank_deficient = false;
};

// C0 = K0 * K0^T. Rank deficiency (fewer independent keys than d_k) is
// flagged, not an error: a deficient C0 only becomes fatal when a solver
// needs to factor it.
CovarianceResult accumulate_covariance(const Matrix& k0);

struct UpdateResult {
  Matrix delta;                         // d_v x d_k
  Matrix new_weights;                   // W0 + delta
  double memorization_residual = 0.0;   // ||W_hat K_E - V_E||_F
  double preservation_residual = 0.0;   // ||(W_hat - W0) K0||_F via C0
  double condition_c0 = 0.0;
  std::optional<double> condition_d;    // EMMET: condition of D + alpha I
  bool d_ill_conditioned = false;       // EMMET: condition_d above threshold
};

// Rank-one update forcing W_hat k_e = v_e while minimizing preservation
// error over C0:
//   delta = (v_e - W0 k_e) (k_e^T C0^-1) / (k_e^T C0^-1 k_e)
// residual_divisor > 1 is the edit-distribution hook: it divides the
// residual v_e - W0 k_e before the update (1 leaves it untouched, exactly).
UpdateResult rome_update(const Matrix& w0, const Matrix& c0, const Vector& k_e,
                         const Vector& v_e, double residual_divisor = 1.0);

// Least-squares batched update:
//   delta = (V_E - W0 K_E) K_E^T (lambda C0 + K_E K_E^T)^-1
UpdateResult memit_update(const Matrix& w0, const Matrix& c0, const Matrix& k_e,
                          const Matrix& v_e, double lambda,
                          double residual_divisor = 1.0);

// Equality-constrained batched update with D = K_E^T C0^-1 K_E:
//   delta = (V_E - W0 K_E) (D + alpha I)^-1 K_E^T C0^-1
// alpha == 0 demands E <= d_k and a full-column-rank K_E (exact
// memorization); alpha > 0 always yields an invertible system and trades a
// bounded memorization residual for stability.
UpdateResult emmet_update(const Matrix& w0, const Matrix& c0, const Matrix& k_e,
                          const Matrix& v_e, double alpha,
                          double condition_warn_threshold = 1e8,
                          double residual_divisor = 1.0);

// Multipliers of the equality-constrained solve:
//   Lambda = (V_E - W0 K_E) (K_E^T C0^-1 K_E)^-1
// satisfying (W_hat - W0) C0 = Lambda K_E^T.
Matrix lagrange_multipliers(const Matrix& w0, const Matrix& c0,
                            const Matrix& k_e, const Matrix& v_e);

// sigma_max / sigma_min; +inf once sigma_min drops below 1e-300.
double condition_number(const Matrix& m, bool symmetric = false);

// Method dispatch behind one call; validates the config. ROME requires a
// single-column batch.
UpdateResult apply_update(const SolverConfig& config, const Matrix& w0,
                          const Matrix& c0, const Matrix& k_e, const Matrix& v_e);

}  // namespace pmedit
