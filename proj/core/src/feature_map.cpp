#include "pmedit/feature_map.hpp"

#include <cmath>
#include <utility>

#include "pmedit/errors.hpp"
#include "pmedit/rng.hpp"

namespace pmedit {

FeatureMap::FeatureMap(Matrix weight, Vector bias)
    : weight_(std::move(weight)), bias_(std::move(bias)) {
  if (weight_.rows() != bias_.size()) {
    throw DimensionError("feature map weight rows != bias size");
  }
}

FeatureMap FeatureMap::random(Index out_dim, Index in_dim, std::uint64_t seed) {
  Rng rng(seed);
  Matrix w = rng.normal_matrix(out_dim, in_dim) / std::sqrt(static_cast<double>(in_dim));
  Vector b = 0.1 * rng.normal_vector(out_dim);
  return FeatureMap(std::move(w), std::move(b));
}

Vector FeatureMap::apply(const Vector& x) const {
  if (x.size() != weight_.cols()) {
    throw DimensionError("feature map input has size " + std::to_string(x.size()) +
                         ", expected " + std::to_string(weight_.cols()));
  }
  return ((weight_ * x + bias_).array().tanh()).matrix();
}

Vector FeatureMap::backprop(const Vector& output, const Vector& grad_output) const {
  // tanh'(u) = 1 - tanh(u)^2, expressed through the cached output.
  Vector gate = (1.0 - output.array().square()).matrix();
  return weight_.transpose() * grad_output.cwiseProduct(gate);
}

}  // namespace pmedit
