#pragma once

#include <cstdint>
#include <vector>

#include "pmedit/feature_map.hpp"
#include "pmedit/types.hpp"

namespace pmedit {

struct ToyModelConfig {
  Index d_ctx = 32;
  Index d_k = 64;
  Index d_v = 48;
  Index vocab = 100;
  Index layers = 6;
  std::uint64_t seed = 0;
};

// Copy of the editable weights plus a content hash over their raw bytes.
struct Snapshot {
  std::vector<Matrix> layers;
  std::uint64_t hash = 0;
};

// A stack of editable projection layers with frozen inter-layer maps and a
// frozen linear readout over a toy vocabulary.
//
//   key_0 = map_0(context)          map_0 : d_ctx -> d_k
//   h_l   = W_l * key_l             W_l   : d_v x d_k   (editable)
//   key_l = map_l(h_{l-1})          map_l : d_v -> d_k, l >= 1
//   logits = readout * h_{last}     readout : vocab x d_v
//
// Only the W_l change after construction, and only through apply_delta /
// restore. Each layer keeps its construction-time weights plus an
// accumulated delta; applying a delta and then its negation reproduces the
// original weights bit-for-bit (x + (-x) == +0 in IEEE arithmetic), which
// keeps snapshot hashes an exact equality check.
class ToyModel {
 public:
  static ToyModel random(const ToyModelConfig& config);

  // Explicit components; validates the dimension chain.
  ToyModel(std::vector<FeatureMap> maps, std::vector<Matrix> layers,
           Matrix readout, Vector probe_context, std::uint64_t seed);

  Index layer_count() const { return static_cast<Index>(base_.size()); }
  Index d_ctx() const { return maps_.front().in_dim(); }
  Index d_k() const { return maps_.front().out_dim(); }
  Index d_v() const { return base_.front().rows(); }
  Index vocab() const { return readout_.rows(); }
  std::uint64_t seed() const { return seed_; }

  const Matrix& layer_weight(Index layer) const;
  const FeatureMap& map(Index layer) const;
  const Matrix& readout() const { return readout_; }

  // Fixed random context used as the KL reference probe by value solves.
  const Vector& probe_context() const { return probe_context_; }

  // Input vector to layer `layer` for the given context, i.e. the output of
  // map_layer after forwarding through all preceding layers.
  Vector layer_key(Index layer, const Vector& context) const;

  // Output of layer `layer` (W_layer * key_layer) for the given context.
  Vector layer_value(Index layer, const Vector& context) const;

  // Full forward pass to readout logits. Throws NumericError naming the
  // first layer that produced a non-finite value.
  Vector logits(const Vector& context) const;

  // Logits obtained when the output of layer `layer` is forced to `value`
  // and the remaining stack runs unchanged.
  Vector logits_from_layer_value(Index layer, const Vector& value) const;

  void apply_delta(Index layer, const Matrix& delta);

  Snapshot snapshot() const;
  void restore(const Snapshot& snap);

  std::uint64_t content_hash() const;

 private:
  void check_layer(Index layer) const;
  void materialize(Index layer);

  std::vector<FeatureMap> maps_;     // maps_[0]: d_ctx -> d_k, rest d_v -> d_k
  std::vector<Matrix> base_;         // construction-time weights
  std::vector<Matrix> accum_;        // sum of applied deltas
  std::vector<Matrix> effective_;    // base_ + accum_, what forward passes use
  Matrix readout_;
  Vector probe_context_;
  std::uint64_t seed_ = 0;
};

Vector softmax(const Vector& logits);

}  // namespace pmedit
