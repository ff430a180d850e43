#pragma once

#include <map>
#include <vector>

#include "pmedit/facts.hpp"
#include "pmedit/solvers.hpp"
#include "pmedit/toymodel.hpp"
#include "pmedit/types.hpp"

namespace pmedit {

// A contiguous run of editable layers ending at the final edit layer, each
// with the preservation covariance extracted at that layer.
struct LayerPlan {
  std::vector<Index> edit_layers;            // ascending, ends at final_layer
  Index final_layer = 0;
  std::map<Index, Matrix> per_layer_covariance;
};

// edit_layers must be contiguous, ascending, in range, ending at
// final_layer, with a d_k x d_k covariance per layer. Throws ConfigError.
void validate_layer_plan(const LayerPlan& plan, const ToyModel& model);

struct LayerUpdate {
  Index layer = 0;
  UpdateResult result;
};

// Residual spreading over the plan's layers, ascending. At each layer l the
// edit keys are recomputed from the partially edited model, the residual
// against the final-layer targets is divided by (L - l + 1), and the
// least-squares update is applied before moving up. A single-layer plan is
// bit-identical to memit_update on that layer.
std::vector<LayerUpdate> distribute_memit(ToyModel& model, const LayerPlan& plan,
                                          const std::vector<FactRecord>& facts,
                                          double lambda);

// Same schedule for the rank-one update. The residual is applied whole at
// every layer unless memit_style_fraction is set, which enables the
// 1/(L - l + 1) scaling for ablation.
std::vector<LayerUpdate> distribute_rome(ToyModel& model, const LayerPlan& plan,
                                         const FactRecord& fact,
                                         bool memit_style_fraction = false);

// The residual-spreading schedule applied to the equality-constrained
// update, mirroring distribute_memit.
std::vector<LayerUpdate> distribute_emmet(ToyModel& model, const LayerPlan& plan,
                                          const std::vector<FactRecord>& facts,
                                          double alpha,
                                          double condition_warn_threshold = 1e8);

}  // namespace pmedit
