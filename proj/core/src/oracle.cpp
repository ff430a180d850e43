#include "pmedit/oracle.hpp"

#include <Eigen/LU>
#include <cmath>
#include <sstream>

#include "pmedit/errors.hpp"

namespace pmedit {

OracleResult kkt_solve(const Matrix& w0, const Matrix& k0, const Matrix& k_e,
                       const Matrix& v_e) {
  const Index d_k = w0.cols();
  const Index d_v = w0.rows();
  const Index n_edits = k_e.cols();
  if (k0.rows() != d_k || k_e.rows() != d_k) {
    throw DimensionError("key matrices disagree with W0 column count");
  }
  if (v_e.rows() != d_v || v_e.cols() != n_edits) {
    throw DimensionError("V_E shape disagrees with W0 rows / K_E columns");
  }

  const Matrix gram = k0 * k0.transpose();

  // One KKT system shared by every output row:
  //   [ 2 C0   -K_E ] [ w  ]   [ 2 C0 w0_r ]
  //   [ K_E^T    0  ] [ mu ] = [ v_r       ]
  const Index n = d_k + n_edits;
  Matrix kkt = Matrix::Zero(n, n);
  kkt.topLeftCorner(d_k, d_k) = 2.0 * gram;
  kkt.topRightCorner(d_k, n_edits) = -k_e;
  kkt.bottomLeftCorner(n_edits, d_k) = k_e.transpose();

  Eigen::FullPivLU<Matrix> lu(kkt);
  if (!lu.isInvertible()) {
    std::ostringstream msg;
    msg << "singular KKT system: rank " << lu.rank() << " of " << n
        << " (2*C0 block rank " << Eigen::FullPivLU<Matrix>(2.0 * gram).rank()
        << ", K_E rank " << Eigen::FullPivLU<Matrix>(k_e).rank() << ")";
    throw FactorizationError(msg.str());
  }

  OracleResult out;
  out.weights.resize(d_v, d_k);
  Vector rhs(n);
  for (Index r = 0; r < d_v; ++r) {
    rhs.head(d_k) = 2.0 * gram * w0.row(r).transpose();
    rhs.tail(n_edits) = v_e.row(r).transpose();
    const Vector sol = lu.solve(rhs);
    out.weights.row(r) = sol.head(d_k).transpose();
  }
  out.objective_value = (out.weights * k0 - w0 * k0).squaredNorm();
  out.iterations = d_v;
  out.converged =
      (out.weights * k_e - v_e).norm() <= 1e-8 * (1.0 + v_e.norm());
  return out;
}

double memit_objective(const Matrix& w, const Matrix& w0, const Matrix& k0,
                       const Matrix& k_e, const Matrix& v_e, double lambda) {
  return lambda * (w * k0 - w0 * k0).squaredNorm() + (w * k_e - v_e).squaredNorm();
}

Matrix memit_gradient(const Matrix& w, const Matrix& w0, const Matrix& k0,
                      const Matrix& k_e, const Matrix& v_e, double lambda) {
  return 2.0 * lambda * ((w - w0) * k0) * k0.transpose() +
         2.0 * (w * k_e - v_e) * k_e.transpose();
}

OracleResult gd_minimize(const Matrix& w0, const Matrix& k0, const Matrix& k_e,
                         const Matrix& v_e, double lambda, long steps,
                         double step_size) {
  if (steps < 1) throw InputError("gd_minimize requires steps >= 1");
  if (step_size <= 0.0) throw InputError("gd_minimize requires step_size > 0");

  const Matrix gram0 = k0 * k0.transpose();
  const Matrix gram_e = k_e * k_e.transpose();
  const Matrix w0_gram0 = w0 * gram0;
  const Matrix target_keys = v_e * k_e.transpose();

  Matrix w = w0;
  double objective = memit_objective(w, w0, k0, k_e, v_e, lambda);
  int rising = 0;
  long step = 0;
  for (; step < steps; ++step) {
    const Matrix grad =
        2.0 * lambda * (w * gram0 - w0_gram0) + 2.0 * (w * gram_e - target_keys);
    w -= step_size * grad;
    const double next = memit_objective(w, w0, k0, k_e, v_e, lambda);
    if (!std::isfinite(next)) {
      throw DivergenceError("objective became non-finite at step " + std::to_string(step),
                            step);
    }
    if (next > objective) {
      if (++rising >= 10) {
        throw DivergenceError(
            "objective increased for 10 consecutive steps (step size too large), step " +
                std::to_string(step),
            step);
      }
    } else {
      rising = 0;
    }
    objective = next;
  }

  OracleResult out;
  out.weights = std::move(w);
  out.objective_value = objective;
  out.iterations = step;
  out.converged = true;
  return out;
}

Matrix finite_diff_gradient(const std::function<double(const Matrix&)>& objective,
                            const Matrix& at, double eps) {
  if (eps <= 0.0) throw InputError("finite differences require eps > 0");
  Matrix grad(at.rows(), at.cols());
  Matrix probe = at;
  for (Index i = 0; i < at.rows(); ++i) {
    for (Index j = 0; j < at.cols(); ++j) {
      const double saved = probe(i, j);
      probe(i, j) = saved + eps;
      const double up = objective(probe);
      probe(i, j) = saved - eps;
      const double down = objective(probe);
      probe(i, j) = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw InputError("objective non-finite at finite-difference probe point");
      }
      grad(i, j) = (up - down) / (2.0 * eps);
    }
  }
  return grad;
}

}  // namespace pmedit
