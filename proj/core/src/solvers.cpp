#include "pmedit/solvers.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "pmedit/errors.hpp"

namespace pmedit {

namespace {

constexpr double kRankThreshold = 1e-10;   // relative to sigma_max
constexpr double kDegenerateKey = 1e-14;

Index svd_rank(const Matrix& m) {
  Eigen::JacobiSVD<Matrix> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0) return 0;
  const double cutoff = kRankThreshold * sv[0];
  Index rank = 0;
  for (Index i = 0; i < sv.size(); ++i) {
    if (sv[i] > cutoff) ++rank;
  }
  return rank;
}

// Columns that are linear combinations of earlier ones, from the pivots a
// column-pivoted QR leaves beyond the numerical rank.
std::vector<Index> dependent_columns(const Matrix& m, Index rank) {
  Eigen::ColPivHouseholderQR<Matrix> qr(m);
  std::vector<Index> dependent;
  const auto& perm = qr.colsPermutation().indices();
  for (Index i = rank; i < m.cols(); ++i) {
    dependent.push_back(static_cast<Index>(perm[i]));
  }
  std::sort(dependent.begin(), dependent.end());
  return dependent;
}

void check_finite(const Matrix& m, const char* name) {
  if (!m.allFinite()) throw InputError(std::string(name) + " contains non-finite entries");
}

void check_update_dims(const Matrix& w0, const Matrix& c0, Index key_dim,
                       Index value_dim) {
  if (c0.rows() != c0.cols()) throw DimensionError("C0 must be square");
  if (w0.cols() != c0.rows()) throw DimensionError("W0 cols != C0 dimension");
  if (key_dim != w0.cols()) throw DimensionError("edit keys have wrong dimension");
  if (value_dim != w0.rows()) throw DimensionError("edit values have wrong dimension");
}

double preservation_residual_from_c0(const Matrix& delta, const Matrix& c0) {
  // ||delta K0||_F^2 = trace(delta C0 delta^T)
  const double sq = (delta * c0).cwiseProduct(delta).sum();
  return std::sqrt(std::max(sq, 0.0));
}

UpdateResult finish_update(const Matrix& w0, Matrix delta, const Matrix& c0,
                           const Matrix& k_e, const Matrix& v_e) {
  UpdateResult r;
  r.new_weights = w0 + delta;
  r.memorization_residual = (r.new_weights * k_e - v_e).norm();
  r.preservation_residual = preservation_residual_from_c0(delta, c0);
  r.condition_c0 = condition_number(c0, /*symmetric=*/true);
  r.delta = std::move(delta);
  return r;
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::ROME: return "ROME";
    case Method::MEMIT: return "MEMIT";
    case Method::EMMET: return "EMMET";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  if (name == "ROME" || name == "rome") return Method::ROME;
  if (name == "MEMIT" || name == "memit") return Method::MEMIT;
  if (name == "EMMET" || name == "emmet") return Method::EMMET;
  throw ConfigError("unknown method '" + name + "' (expected ROME, MEMIT or EMMET)");
}

void validate_solver_config(const SolverConfig& config) {
  if (config.method == Method::MEMIT && !(config.lambda > 0.0)) {
    throw ConfigError("MEMIT requires lambda > 0");
  }
  if (config.alpha < 0.0) throw ConfigError("alpha must be >= 0");
  if (!(config.condition_warn_threshold > 0.0)) {
    throw ConfigError("condition_warn_threshold must be > 0");
  }
}

UpdateResult apply_update(const SolverConfig& config, const Matrix& w0,
                          const Matrix& c0, const Matrix& k_e, const Matrix& v_e) {
  validate_solver_config(config);
  switch (config.method) {
    case Method::ROME:
      if (k_e.cols() != 1) throw ConfigError("ROME edits one fact at a time");
      return rome_update(w0, c0, k_e.col(0), v_e.col(0));
    case Method::MEMIT:
      return memit_update(w0, c0, k_e, v_e, config.lambda);
    case Method::EMMET:
      return emmet_update(w0, c0, k_e, v_e, config.alpha,
                          config.condition_warn_threshold);
  }
  throw ConfigError("unknown method");
}

CovarianceResult accumulate_covariance(const Matrix& k0) {
  if (k0.cols() < 1) throw InputError("K0 must contain at least one key");
  check_finite(k0, "K0");
  CovarianceResult out;
  out.c0 = Matrix::Zero(k0.rows(), k0.rows());
  out.c0.selfadjointView<Eigen::Lower>().rankUpdate(k0);
  out.c0.triangularView<Eigen::StrictlyUpper>() =
      out.c0.transpose().triangularView<Eigen::StrictlyUpper>();
  out.rank = svd_rank(k0);
  out.rank_deficient = out.rank < k0.rows();
  return out;
}

UpdateResult rome_update(const Matrix& w0, const Matrix& c0, const Vector& k_e,
                         const Vector& v_e, double residual_divisor) {
  check_update_dims(w0, c0, k_e.size(), v_e.size());
  check_finite(k_e, "k_e");
  check_finite(v_e, "v_e");

  Eigen::LLT<Matrix> llt(c0);
  if (llt.info() != Eigen::Success) {
    throw FactorizationError("C0 factorization failed: matrix is singular or indefinite");
  }
  const Vector c0_inv_key = llt.solve(k_e);
  const double denom = k_e.dot(c0_inv_key);
  if (!(denom > kDegenerateKey)) {
    throw DegenerateKeyError("k_e^T C0^-1 k_e = " + std::to_string(denom) +
                             " is degenerate (<= 1e-14)");
  }
  const Vector residual = (v_e - w0 * k_e) / residual_divisor;
  Matrix delta = residual * (c0_inv_key / denom).transpose();
  return finish_update(w0, std::move(delta), c0, k_e, v_e);
}

UpdateResult memit_update(const Matrix& w0, const Matrix& c0, const Matrix& k_e,
                          const Matrix& v_e, double lambda,
                          double residual_divisor) {
  if (k_e.cols() < 1) throw InputError("K_E must contain at least one edit");
  if (k_e.cols() != v_e.cols()) throw DimensionError("K_E and V_E column counts differ");
  check_update_dims(w0, c0, k_e.rows(), v_e.rows());
  check_finite(k_e, "K_E");
  check_finite(v_e, "V_E");
  if (lambda < 0.0) throw InputError("lambda must be >= 0");

  Matrix system = lambda * c0;
  system.selfadjointView<Eigen::Lower>().rankUpdate(k_e);
  system.triangularView<Eigen::StrictlyUpper>() =
      system.transpose().triangularView<Eigen::StrictlyUpper>();

  Eigen::LLT<Matrix> llt(system);
  if (llt.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "MEMIT system lambda*C0 + K_E K_E^T is not positive definite"
        << " (lambda=" << lambda << ", rank(C0)=" << svd_rank(c0)
        << ", rank(K_E)=" << svd_rank(k_e) << ")";
    throw FactorizationError(msg.str());
  }
  const Matrix residual = (v_e - w0 * k_e) / residual_divisor;
  // delta = R K_E^T system^-1; solve on the transpose since system = system^T.
  Matrix delta = llt.solve((residual * k_e.transpose()).transpose()).transpose();
  return finish_update(w0, std::move(delta), c0, k_e, v_e);
}

namespace {

struct EmmetSystem {
  Matrix c0_inv_keys;   // C0^-1 K_E
  Matrix d_reg;         // K_E^T C0^-1 K_E + alpha I
};

EmmetSystem build_emmet_system(const Matrix& c0, const Matrix& k_e, double alpha,
                               bool require_full_rank) {
  Eigen::LLT<Matrix> llt(c0);
  if (llt.info() != Eigen::Success) {
    throw FactorizationError("C0 factorization failed: matrix is singular or indefinite");
  }
  if (require_full_rank) {
    const Index rank = svd_rank(k_e);
    if (rank < k_e.cols()) {
      std::vector<Index> dep = dependent_columns(k_e, rank);
      std::ostringstream msg;
      msg << "K_E is rank deficient (rank " << rank << " of " << k_e.cols()
          << "); dependent key columns:";
      for (Index c : dep) msg << ' ' << c;
      throw RankError(msg.str(), std::move(dep));
    }
  }
  EmmetSystem sys;
  sys.c0_inv_keys = llt.solve(k_e);
  sys.d_reg = k_e.transpose() * sys.c0_inv_keys;
  if (alpha > 0.0) sys.d_reg.diagonal().array() += alpha;
  return sys;
}

}  // namespace

UpdateResult emmet_update(const Matrix& w0, const Matrix& c0, const Matrix& k_e,
                          const Matrix& v_e, double alpha,
                          double condition_warn_threshold, double residual_divisor) {
  if (k_e.cols() < 1) throw InputError("K_E must contain at least one edit");
  if (k_e.cols() != v_e.cols()) throw DimensionError("K_E and V_E column counts differ");
  check_update_dims(w0, c0, k_e.rows(), v_e.rows());
  check_finite(k_e, "K_E");
  check_finite(v_e, "V_E");
  if (alpha < 0.0) throw InputError("alpha must be >= 0");
  if (alpha == 0.0 && k_e.cols() > k_e.rows()) {
    throw InfeasibleBatchError(
        "cannot memorize " + std::to_string(k_e.cols()) + " edits exactly with key dimension " +
        std::to_string(k_e.rows()) + "; the equality system is infeasible");
  }

  EmmetSystem sys = build_emmet_system(c0, k_e, alpha, /*require_full_rank=*/alpha == 0.0);

  const double cond_d = condition_number(sys.d_reg, /*symmetric=*/true);
  Eigen::LLT<Matrix> llt_d(sys.d_reg);
  if (llt_d.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "D" << (alpha > 0.0 ? " + alpha I" : "")
        << " factorization failed (alpha=" << alpha << ", cond=" << cond_d << ")";
    throw FactorizationError(msg.str());
  }

  const Matrix residual = (v_e - w0 * k_e) / residual_divisor;
  Matrix delta = residual * llt_d.solve(sys.c0_inv_keys.transpose());
  UpdateResult r = finish_update(w0, std::move(delta), c0, k_e, v_e);
  r.condition_d = cond_d;
  r.d_ill_conditioned = cond_d > condition_warn_threshold;
  return r;
}

Matrix lagrange_multipliers(const Matrix& w0, const Matrix& c0,
                            const Matrix& k_e, const Matrix& v_e) {
  if (k_e.cols() < 1) throw InputError("K_E must contain at least one edit");
  if (k_e.cols() != v_e.cols()) throw DimensionError("K_E and V_E column counts differ");
  check_update_dims(w0, c0, k_e.rows(), v_e.rows());
  if (k_e.cols() > k_e.rows()) {
    throw InfeasibleBatchError("more multipliers than key dimensions");
  }

  EmmetSystem sys = build_emmet_system(c0, k_e, /*alpha=*/0.0, /*require_full_rank=*/true);
  Eigen::LLT<Matrix> llt_d(sys.d_reg);
  if (llt_d.info() != Eigen::Success) {
    throw FactorizationError("D factorization failed while solving for multipliers");
  }
  const Matrix residual = v_e - w0 * k_e;
  return llt_d.solve(residual.transpose()).transpose();
}

double condition_number(const Matrix& m, bool symmetric) {
  if (m.rows() != m.cols()) throw DimensionError("condition number needs a square matrix");
  if (m.size() == 0) throw DimensionError("condition number of an empty matrix");

  double sigma_max = 0.0;
  double sigma_min = 0.0;
  if (symmetric) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(m, Eigen::EigenvaluesOnly);
    const Vector mags = eig.eigenvalues().cwiseAbs();
    sigma_max = mags.maxCoeff();
    sigma_min = mags.minCoeff();
  } else {
    Eigen::JacobiSVD<Matrix> svd(m);
    sigma_max = svd.singularValues().maxCoeff();
    sigma_min = svd.singularValues().minCoeff();
  }
  if (sigma_min < 1e-300) return std::numeric_limits<double>::infinity();
  return sigma_max / sigma_min;
}

}  // namespace pmedit
