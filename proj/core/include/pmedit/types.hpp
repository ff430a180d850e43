#pragma once

#include <Eigen/Dense>

namespace pmedit {

// Dense column-major doubles everywhere. Weight matrices are d_v x d_k,
// key collections are d_k x N (one key per column), value collections
// d_v x E.
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

}  // namespace pmedit
