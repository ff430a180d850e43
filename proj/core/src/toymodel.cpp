#include "pmedit/toymodel.hpp"

#include <cmath>
#include <string>
#include <utility>

#include "pmedit/errors.hpp"
#include "pmedit/rng.hpp"

namespace pmedit {

namespace {
constexpr std::uint64_t kMapTag = fnv1a64("toymodel.map");
constexpr std::uint64_t kLayerTag = fnv1a64("toymodel.layer");
constexpr std::uint64_t kReadoutTag = fnv1a64("toymodel.readout");
constexpr std::uint64_t kProbeTag = fnv1a64("toymodel.probe");
}  // namespace

ToyModel ToyModel::random(const ToyModelConfig& config) {
  if (config.layers < 1) throw ConfigError("model needs at least one layer");
  if (config.vocab < 2) throw ConfigError("vocab must be >= 2");

  std::vector<FeatureMap> maps;
  maps.reserve(config.layers);
  maps.push_back(FeatureMap::random(config.d_k, config.d_ctx,
                                    derive_seed(config.seed, {kMapTag, 0})));
  for (Index l = 1; l < config.layers; ++l) {
    maps.push_back(FeatureMap::random(
        config.d_k, config.d_v,
        derive_seed(config.seed, {kMapTag, static_cast<std::uint64_t>(l)})));
  }

  std::vector<Matrix> layers;
  layers.reserve(config.layers);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.d_k));
  for (Index l = 0; l < config.layers; ++l) {
    Rng rng(derive_seed(config.seed, {kLayerTag, static_cast<std::uint64_t>(l)}));
    layers.push_back(scale * rng.normal_matrix(config.d_v, config.d_k));
  }

  // Frozen readout with unit-norm rows.
  Rng readout_rng(derive_seed(config.seed, {kReadoutTag}));
  Matrix readout = readout_rng.normal_matrix(config.vocab, config.d_v);
  for (Index r = 0; r < readout.rows(); ++r) {
    readout.row(r) /= readout.row(r).norm();
  }

  Rng probe_rng(derive_seed(config.seed, {kProbeTag}));
  Vector probe = probe_rng.normal_vector(config.d_ctx);

  return ToyModel(std::move(maps), std::move(layers), std::move(readout),
                  std::move(probe), config.seed);
}

ToyModel::ToyModel(std::vector<FeatureMap> maps, std::vector<Matrix> layers,
                   Matrix readout, Vector probe_context, std::uint64_t seed)
    : maps_(std::move(maps)),
      base_(std::move(layers)),
      readout_(std::move(readout)),
      probe_context_(std::move(probe_context)),
      seed_(seed) {
  if (base_.empty() || maps_.size() != base_.size()) {
    throw DimensionError("need one inter-layer map per layer");
  }
  const Index dk = maps_.front().out_dim();
  const Index dv = base_.front().rows();
  for (std::size_t l = 0; l < base_.size(); ++l) {
    if (base_[l].rows() != dv || base_[l].cols() != dk) {
      throw DimensionError("layer " + std::to_string(l) + " is not d_v x d_k");
    }
    if (maps_[l].out_dim() != dk) {
      throw DimensionError("map " + std::to_string(l) + " output != d_k");
    }
    if (l > 0 && maps_[l].in_dim() != dv) {
      throw DimensionError("map " + std::to_string(l) + " input != d_v");
    }
  }
  if (readout_.cols() != dv) throw DimensionError("readout cols != d_v");
  if (probe_context_.size() != maps_.front().in_dim()) {
    throw DimensionError("probe context size != d_ctx");
  }
  accum_.reserve(base_.size());
  effective_.reserve(base_.size());
  for (const Matrix& w : base_) {
    accum_.push_back(Matrix::Zero(w.rows(), w.cols()));
    effective_.push_back(w);
  }
}

void ToyModel::check_layer(Index layer) const {
  if (layer < 0 || layer >= layer_count()) {
    throw DimensionError("layer index " + std::to_string(layer) +
                         " out of range [0, " + std::to_string(layer_count()) + ")");
  }
}

const Matrix& ToyModel::layer_weight(Index layer) const {
  check_layer(layer);
  return effective_[layer];
}

const FeatureMap& ToyModel::map(Index layer) const {
  check_layer(layer);
  return maps_[layer];
}

Vector ToyModel::layer_key(Index layer, const Vector& context) const {
  check_layer(layer);
  Vector key = maps_[0].apply(context);
  for (Index l = 0; l < layer; ++l) {
    Vector h = effective_[l] * key;
    key = maps_[l + 1].apply(h);
  }
  return key;
}

Vector ToyModel::layer_value(Index layer, const Vector& context) const {
  return effective_[layer] * layer_key(layer, context);
}

Vector ToyModel::logits(const Vector& context) const {
  Vector key = maps_[0].apply(context);
  Vector h;
  for (Index l = 0; l < layer_count(); ++l) {
    h = effective_[l] * key;
    if (!h.allFinite()) {
      throw NumericError("non-finite activation at layer " + std::to_string(l));
    }
    if (l + 1 < layer_count()) key = maps_[l + 1].apply(h);
  }
  return readout_ * h;
}

Vector ToyModel::logits_from_layer_value(Index layer, const Vector& value) const {
  check_layer(layer);
  if (value.size() != d_v()) throw DimensionError("layer value size != d_v");
  Vector h = value;
  for (Index l = layer + 1; l < layer_count(); ++l) {
    h = effective_[l] * maps_[l].apply(h);
    if (!h.allFinite()) {
      throw NumericError("non-finite activation at layer " + std::to_string(l));
    }
  }
  return readout_ * h;
}

void ToyModel::materialize(Index layer) {
  // base + 0 must reproduce base exactly, including -0.0 entries coming
  // from imported weights, so skip the addition for an all-zero accumulator.
  if ((accum_[layer].array() == 0.0).all()) {
    effective_[layer] = base_[layer];
  } else {
    effective_[layer] = base_[layer] + accum_[layer];
  }
}

void ToyModel::apply_delta(Index layer, const Matrix& delta) {
  check_layer(layer);
  if (delta.rows() != d_v() || delta.cols() != d_k()) {
    throw DimensionError("delta is " + std::to_string(delta.rows()) + "x" +
                         std::to_string(delta.cols()) + ", layer weights are " +
                         std::to_string(d_v()) + "x" + std::to_string(d_k()));
  }
  accum_[layer] += delta;
  materialize(layer);
}

Snapshot ToyModel::snapshot() const {
  Snapshot snap;
  snap.layers = effective_;
  snap.hash = content_hash();
  return snap;
}

void ToyModel::restore(const Snapshot& snap) {
  if (snap.layers.size() != base_.size()) {
    throw DimensionError("snapshot layer count mismatch");
  }
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const Matrix& m : snap.layers) h = hash_matrix(h, m);
  if (h != snap.hash) {
    throw CorruptionError("snapshot hash mismatch: stored " +
                          std::to_string(snap.hash) + ", recomputed " +
                          std::to_string(h));
  }
  for (std::size_t l = 0; l < base_.size(); ++l) {
    if (snap.layers[l].rows() != base_[l].rows() ||
        snap.layers[l].cols() != base_[l].cols()) {
      throw DimensionError("snapshot layer " + std::to_string(l) + " shape mismatch");
    }
    base_[l] = snap.layers[l];
    accum_[l].setZero();
    effective_[l] = base_[l];
  }
}

std::uint64_t ToyModel::content_hash() const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const Matrix& m : effective_) h = hash_matrix(h, m);
  return h;
}

Vector softmax(const Vector& logits) {
  const double m = logits.maxCoeff();
  Vector e = (logits.array() - m).exp();
  return e / e.sum();
}

}  // namespace pmedit
