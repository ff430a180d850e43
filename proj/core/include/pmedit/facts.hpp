#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "pmedit/feature_map.hpp"
#include "pmedit/toymodel.hpp"
#include "pmedit/types.hpp"

namespace pmedit {

// One editable fact. Keys live in the edited layer's input space (d_k),
// the target value in its output space (d_v).
struct FactRecord {
  std::int64_t fact_id = 0;
  Vector base_context;                 // d_ctx
  Vector edit_key;                     // d_k
  Vector target_value;                 // d_v
  std::vector<Vector> paraphrase_keys; // d_k each
  Index old_object = 0;
  Index new_object = 0;
};

// Keys whose representations an edit must not disturb, with an optional
// cached Gram matrix and the held-out facts used for locality scoring.
// Neighborhood keys are always columns of `keys`.
struct PreservationSet {
  Matrix keys;                          // d_k x N
  std::optional<Matrix> covariance;     // K0 * K0^T when cached
  std::vector<FactRecord> neighborhood_facts;
};

// Throws if a cached covariance disagrees with keys*keys^T beyond 1e-10
// elementwise or is not symmetric PSD at that tolerance.
void validate_preservation_set(const PreservationSet& set);

// Mean of feature_map(base_context + noise_scale * g_i) over prefix_count
// independent gaussian draws. noise_scale == 0 short-circuits to
// feature_map(base_context) so the degenerate mean is exact.
Vector synthesize_key(const Vector& base_context, long prefix_count,
                      double noise_scale, const FeatureMap& feature_map,
                      std::uint64_t rng_seed);

// Fixed-step gradient descent for the value vector at `layer`:
//   loss(v) = -log P(new_object | tail(v))
//           + kl_weight * KL( tail(probe_v + (v - v_init)) || tail(probe_v) )
// where tail() runs the frozen stack above `layer` into the readout,
// v_init = W_layer * k_e, and probe_v is the layer output for the model's
// fixed probe context. The KL anchor is exactly zero at v = v_init, so the
// weight trades edit strength against drift on the unrelated probe.
// Returns the visited iterate with the lowest loss.
Vector solve_value(const ToyModel& model, Index layer, const Vector& k_e,
                   Index new_object, double kl_weight, long steps,
                   double step_size);

// Loss evaluated by solve_value at an arbitrary v; exposed for gradient
// checks and descent diagnostics.
double value_loss(const ToyModel& model, Index layer, const Vector& k_e,
                  Index new_object, double kl_weight, const Vector& v);
Vector value_loss_gradient(const ToyModel& model, Index layer, const Vector& k_e,
                           Index new_object, double kl_weight, const Vector& v);

struct FactGenOptions {
  long prefix_count = 50;
  double noise_scale = 0.1;
  long paraphrase_count = 5;
};

// Standalone fact synthesis against a fresh random feature map; keys are
// noise-averaged, objects are drawn distinct. Deterministic per seed.
std::vector<FactRecord> generate_fact_set(long count, Index d_ctx, Index d_k,
                                          Index d_v, Index vocab,
                                          std::uint64_t rng_seed,
                                          const FactGenOptions& opts = {});

struct ModelFactOptions {
  long paraphrase_count = 5;
  double paraphrase_noise = 0.1;
  double kl_weight = 2.0;
  long solve_steps = 100;
  double solve_step_size = 0.5;
};

// Facts bound to a concrete model at `edit_layer`: contexts are fresh
// gaussians, edit keys are the model's layer keys, old_object is the
// model's current argmax for the context, and target_value comes from
// solve_value toward a random distinct new_object.
std::vector<FactRecord> make_model_facts(const ToyModel& model, Index edit_layer,
                                         long count, std::uint64_t seed,
                                         const ModelFactOptions& opts = {});

// Gaussian contexts shared by per-layer preservation-key extraction.
Matrix preservation_contexts(Index d_ctx, long count, std::uint64_t seed);

// Keys of `contexts` at `layer`, with the first neighborhood_count contexts
// also materialized as held-out neighborhood facts (their keys stay in K0).
PreservationSet preservation_from_contexts(const ToyModel& model, Index layer,
                                           const Matrix& contexts,
                                           long neighborhood_count,
                                           std::uint64_t seed);

// JSON-lines round trip; vector fields are base64 of little-endian f64.
void write_fact_set_jsonl(const std::filesystem::path& path,
                          const std::vector<FactRecord>& facts);
std::vector<FactRecord> read_fact_set_jsonl(const std::filesystem::path& path);
std::string fact_to_json_line(const FactRecord& fact);
FactRecord fact_from_json_line(const std::string& line);

}  // namespace pmedit
