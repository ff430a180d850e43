#pragma once

#include <cstdint>

#include "pmedit/types.hpp"

namespace pmedit {

// Fixed affine map followed by an elementwise tanh. This is the one
// nonlinearity used everywhere: the model's inter-layer maps and the
// standalone key synthesis both apply tanh(W x + b).
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(Matrix weight, Vector bias);

  // Random map with N(0, 1/sqrt(in_dim)) weights and N(0, 0.1) biases,
  // deterministic in the seed.
  static FeatureMap random(Index out_dim, Index in_dim, std::uint64_t seed);

  Vector apply(const Vector& x) const;

  Index in_dim() const { return weight_.cols(); }
  Index out_dim() const { return weight_.rows(); }
  const Matrix& weight() const { return weight_; }
  const Vector& bias() const { return bias_; }

  // d tanh(Wx+b) composed with an upstream gradient: returns W^T (g .* (1 - y^2))
  // where y is the map output at x. Used by value-vector descent.
  Vector backprop(const Vector& output, const Vector& grad_output) const;

 private:
  Matrix weight_;
  Vector bias_;
};

}  // namespace pmedit
