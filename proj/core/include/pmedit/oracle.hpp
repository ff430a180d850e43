#pragma once

#include <functional>

#include "pmedit/types.hpp"

namespace pmedit {

// Ground-truth solvers for verification. Deliberately slow and simple, and
// deliberately sharing no code with the closed-form solvers: they assemble
// their own Gram matrices and never call into solvers.hpp.
struct OracleResult {
  Matrix weights;
  double objective_value = 0.0;  // preservation (kkt) / full objective (gd)
  long iterations = 0;
  bool converged = false;
};

// Dense KKT solve of
//   min ||W K0 - W0 K0||_F^2  s.t.  W K_E = V_E
// row by row (the objective decouples across output rows). Does not use the
// closed-form update equations.
OracleResult kkt_solve(const Matrix& w0, const Matrix& k0, const Matrix& k_e,
                       const Matrix& v_e);

// Fixed-step gradient descent on
//   lambda ||W K0 - W0 K0||_F^2 + ||W K_E - V_E||_F^2
// starting from W = W0. Throws DivergenceError after 10 consecutive
// objective increases.
OracleResult gd_minimize(const Matrix& w0, const Matrix& k0, const Matrix& k_e,
                         const Matrix& v_e, double lambda, long steps,
                         double step_size);

// The objective gd_minimize descends, for oracle cross-checks.
double memit_objective(const Matrix& w, const Matrix& w0, const Matrix& k0,
                       const Matrix& k_e, const Matrix& v_e, double lambda);

// Its analytic gradient, 2 lambda (W K0 - W0 K0) K0^T + 2 (W K_E - V_E) K_E^T.
Matrix memit_gradient(const Matrix& w, const Matrix& w0, const Matrix& k0,
                      const Matrix& k_e, const Matrix& v_e, double lambda);

// Central differences per entry, O(eps^2) accurate.
Matrix finite_diff_gradient(const std::function<double(const Matrix&)>& objective,
                            const Matrix& at, double eps);

}  // namespace pmedit
