#include "pmedit/distribution.hpp"

#include <string>
#include <utility>

#include "pmedit/errors.hpp"

namespace pmedit {

namespace {

std::string layer_tag(Index layer) {
  return "layer " + std::to_string(layer) + ": ";
}

// Re-throws solver errors with the failing layer named, preserving the type.
template <typename Fn>
UpdateResult tagged(Index layer, Fn&& fn) {
  try {
    return fn();
  } catch (const RankError& e) {
    throw RankError(layer_tag(layer) + e.what(), e.dependent_columns);
  } catch (const FactorizationError& e) {
    throw FactorizationError(layer_tag(layer) + e.what());
  } catch (const DegenerateKeyError& e) {
    throw DegenerateKeyError(layer_tag(layer) + e.what());
  } catch (const InfeasibleBatchError& e) {
    throw InfeasibleBatchError(layer_tag(layer) + e.what());
  } catch (const DimensionError& e) {
    throw DimensionError(layer_tag(layer) + e.what());
  } catch (const InputError& e) {
    throw InputError(layer_tag(layer) + e.what());
  }
}

}  // namespace

void validate_layer_plan(const LayerPlan& plan, const ToyModel& model) {
  if (plan.edit_layers.empty()) throw ConfigError("layer plan has no edit layers");
  if (plan.edit_layers.back() != plan.final_layer) {
    throw ConfigError("layer plan must end at the final edit layer");
  }
  for (std::size_t i = 0; i < plan.edit_layers.size(); ++i) {
    const Index l = plan.edit_layers[i];
    if (l < 0 || l >= model.layer_count()) {
      throw ConfigError("edit layer " + std::to_string(l) + " out of range");
    }
    if (i > 0 && l != plan.edit_layers[i - 1] + 1) {
      throw ConfigError("edit layers must be contiguous and ascending");
    }
    auto it = plan.per_layer_covariance.find(l);
    if (it == plan.per_layer_covariance.end()) {
      throw ConfigError("no covariance for edit layer " + std::to_string(l));
    }
    if (it->second.rows() != model.d_k() || it->second.cols() != model.d_k()) {
      throw ConfigError("covariance for layer " + std::to_string(l) + " is not d_k x d_k");
    }
  }
}

std::vector<LayerUpdate> distribute_memit(ToyModel& model, const LayerPlan& plan,
                                          const std::vector<FactRecord>& facts,
                                          double lambda) {
  validate_layer_plan(plan, model);
  if (facts.empty()) throw InputError("no facts to distribute");

  // Final-layer targets are fixed up front; per-layer keys are not.
  Matrix targets(model.d_v(), static_cast<Index>(facts.size()));
  for (std::size_t i = 0; i < facts.size(); ++i) {
    if (facts[i].target_value.size() != model.d_v()) {
      throw DimensionError("fact " + std::to_string(facts[i].fact_id) +
                           " target value size != d_v");
    }
    targets.col(static_cast<Index>(i)) = facts[i].target_value;
  }

  std::vector<LayerUpdate> updates;
  updates.reserve(plan.edit_layers.size());
  for (const Index layer : plan.edit_layers) {
    Matrix keys(model.d_k(), static_cast<Index>(facts.size()));
    for (std::size_t i = 0; i < facts.size(); ++i) {
      keys.col(static_cast<Index>(i)) = model.layer_key(layer, facts[i].base_context);
    }
    const double divisor = static_cast<double>(plan.final_layer - layer + 1);
    const Matrix& c0 = plan.per_layer_covariance.at(layer);
    UpdateResult result = tagged(layer, [&] {
      return memit_update(model.layer_weight(layer), c0, keys, targets, lambda, divisor);
    });
    model.apply_delta(layer, result.delta);
    updates.push_back({layer, std::move(result)});
  }
  return updates;
}

std::vector<LayerUpdate> distribute_emmet(ToyModel& model, const LayerPlan& plan,
                                          const std::vector<FactRecord>& facts,
                                          double alpha,
                                          double condition_warn_threshold) {
  validate_layer_plan(plan, model);
  if (facts.empty()) throw InputError("no facts to distribute");

  Matrix targets(model.d_v(), static_cast<Index>(facts.size()));
  for (std::size_t i = 0; i < facts.size(); ++i) {
    if (facts[i].target_value.size() != model.d_v()) {
      throw DimensionError("fact " + std::to_string(facts[i].fact_id) +
                           " target value size != d_v");
    }
    targets.col(static_cast<Index>(i)) = facts[i].target_value;
  }

  std::vector<LayerUpdate> updates;
  updates.reserve(plan.edit_layers.size());
  for (const Index layer : plan.edit_layers) {
    Matrix keys(model.d_k(), static_cast<Index>(facts.size()));
    for (std::size_t i = 0; i < facts.size(); ++i) {
      keys.col(static_cast<Index>(i)) = model.layer_key(layer, facts[i].base_context);
    }
    const double divisor = static_cast<double>(plan.final_layer - layer + 1);
    const Matrix& c0 = plan.per_layer_covariance.at(layer);
    UpdateResult result = tagged(layer, [&] {
      return emmet_update(model.layer_weight(layer), c0, keys, targets, alpha,
                          condition_warn_threshold, divisor);
    });
    model.apply_delta(layer, result.delta);
    updates.push_back({layer, std::move(result)});
  }
  return updates;
}

std::vector<LayerUpdate> distribute_rome(ToyModel& model, const LayerPlan& plan,
                                         const FactRecord& fact,
                                         bool memit_style_fraction) {
  validate_layer_plan(plan, model);
  if (fact.target_value.size() != model.d_v()) {
    throw DimensionError("fact target value size != d_v");
  }

  std::vector<LayerUpdate> updates;
  updates.reserve(plan.edit_layers.size());
  for (const Index layer : plan.edit_layers) {
    const Vector key = model.layer_key(layer, fact.base_context);
    const double divisor =
        memit_style_fraction ? static_cast<double>(plan.final_layer - layer + 1) : 1.0;
    const Matrix& c0 = plan.per_layer_covariance.at(layer);
    UpdateResult result = tagged(layer, [&] {
      return rome_update(model.layer_weight(layer), c0, key, fact.target_value, divisor);
    });
    model.apply_delta(layer, result.delta);
    updates.push_back({layer, std::move(result)});
  }
  return updates;
}

}  // namespace pmedit
