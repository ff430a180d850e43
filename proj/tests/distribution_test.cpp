#include <doctest.h>

#include <cmath>

#include "pmedit/distribution.hpp"
#include "pmedit/errors.hpp"
#include "pmedit/rng.hpp"

using namespace pmedit;

namespace {

ToyModelConfig model_config(std::uint64_t seed, Index layers = 4) {
  ToyModelConfig mc;
  mc.d_ctx = 8;
  mc.d_k = 16;
  mc.d_v = 12;
  mc.vocab = 10;
  mc.layers = layers;
  mc.seed = seed;
  return mc;
}

struct Setup {
  ToyModel model;
  std::vector<FactRecord> facts;
  LayerPlan plan;
};

// Facts with synthetic targets (no value optimization needed here) and a
// plan covering [first, last] with per-layer covariances from shared
// contexts extracted on the unedited model.
Setup make_setup(std::uint64_t seed, Index first_layer, Index last_layer, long n_facts) {
  ToyModel model = ToyModel::random(model_config(seed));
  Rng rng(derive_seed(seed, {fnv1a64("dist.setup")}));

  std::vector<FactRecord> facts(static_cast<std::size_t>(n_facts));
  for (long i = 0; i < n_facts; ++i) {
    auto& f = facts[static_cast<std::size_t>(i)];
    f.fact_id = i;
    f.base_context = rng.normal_vector(model.d_ctx());
    f.target_value = rng.normal_vector(model.d_v());
  }

  LayerPlan plan;
  plan.final_layer = last_layer;
  const Matrix contexts = rng.normal_matrix(model.d_ctx(), 4 * model.d_k());
  for (Index l = first_layer; l <= last_layer; ++l) {
    plan.edit_layers.push_back(l);
    Matrix keys(model.d_k(), contexts.cols());
    for (Index j = 0; j < contexts.cols(); ++j) {
      keys.col(j) = model.layer_key(l, contexts.col(j));
    }
    plan.per_layer_covariance[l] = accumulate_covariance(keys).c0;
  }
  return {std::move(model), std::move(facts), std::move(plan)};
}

Matrix key_matrix(const ToyModel& model, Index layer, const std::vector<FactRecord>& facts) {
  Matrix keys(model.d_k(), static_cast<Index>(facts.size()));
  for (std::size_t i = 0; i < facts.size(); ++i) {
    keys.col(static_cast<Index>(i)) = model.layer_key(layer, facts[i].base_context);
  }
  return keys;
}

Matrix target_matrix(const ToyModel& model, const std::vector<FactRecord>& facts) {
  Matrix targets(model.d_v(), static_cast<Index>(facts.size()));
  for (std::size_t i = 0; i < facts.size(); ++i) {
    targets.col(static_cast<Index>(i)) = facts[i].target_value;
  }
  return targets;
}

}  // namespace

TEST_CASE("layer plan validation") {
  const ToyModel model = ToyModel::random(model_config(1));
  LayerPlan plan;
  CHECK_THROWS_AS(validate_layer_plan(plan, model), ConfigError);

  plan.edit_layers = {1, 3};
  plan.final_layer = 3;
  plan.per_layer_covariance[1] = Matrix::Identity(16, 16);
  plan.per_layer_covariance[3] = Matrix::Identity(16, 16);
  CHECK_THROWS_AS(validate_layer_plan(plan, model), ConfigError);  // gap

  plan.edit_layers = {2, 3};
  plan.per_layer_covariance.erase(1);
  plan.per_layer_covariance[2] = Matrix::Identity(16, 16);
  validate_layer_plan(plan, model);

  plan.final_layer = 2;
  CHECK_THROWS_AS(validate_layer_plan(plan, model), ConfigError);  // wrong端

  plan.final_layer = 3;
  plan.per_layer_covariance[3] = Matrix::Identity(4, 4);
  CHECK_THROWS_AS(validate_layer_plan(plan, model), ConfigError);  // bad dims
}

TEST_CASE("single-layer distribution with already-produced targets is a no-op") {
  Setup s = make_setup(2, 3, 3, 4);
  // Targets = current final-layer outputs, computed with the same ops.
  const Matrix keys = key_matrix(s.model, 3, s.facts);
  for (std::size_t i = 0; i < s.facts.size(); ++i) {
    s.facts[i].target_value =
        s.model.layer_weight(3) * keys.col(static_cast<Index>(i));
  }
  const auto updates = distribute_memit(s.model, s.plan, s.facts, 0.5);
  REQUIRE(updates.size() == 1);
  CHECK((updates[0].result.delta.array() == 0.0).all());
}

TEST_CASE("multi-layer distribution with coincident layer outputs is a no-op") {
  // Both layers are rigged to emit the same value for each fact context, and
  // that value is the target: every per-layer residual vanishes.
  ToyModelConfig mc = model_config(3, 2);
  ToyModel model = ToyModel::random(mc);
  Rng rng(30);
  std::vector<FactRecord> facts(1);
  facts[0].fact_id = 0;
  facts[0].base_context = rng.normal_vector(mc.d_ctx);
  const Vector target = rng.normal_vector(mc.d_v);
  facts[0].target_value = target;

  const Vector k0 = model.layer_key(0, facts[0].base_context);
  model.apply_delta(0, target * k0.transpose() / k0.squaredNorm() -
                           model.layer_weight(0));
  const Vector k1 = model.layer_key(1, facts[0].base_context);
  model.apply_delta(1, target * k1.transpose() / k1.squaredNorm() -
                           model.layer_weight(1));

  LayerPlan plan;
  plan.edit_layers = {0, 1};
  plan.final_layer = 1;
  plan.per_layer_covariance[0] = Matrix::Identity(mc.d_k, mc.d_k);
  plan.per_layer_covariance[1] = Matrix::Identity(mc.d_k, mc.d_k);

  const auto updates = distribute_memit(model, plan, facts, 0.5);
  for (const auto& u : updates) {
    CHECK(u.result.delta.lpNorm<Eigen::Infinity>() <= 1e-12);
  }
}

TEST_CASE("single-layer distribution is byte-identical to the direct solve") {
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    Setup s = make_setup(seed, 3, 3, 3);
    const Matrix keys = key_matrix(s.model, 3, s.facts);
    const Matrix targets = target_matrix(s.model, s.facts);
    const double lambda = 0.5;
    const UpdateResult direct = memit_update(
        s.model.layer_weight(3), s.plan.per_layer_covariance.at(3), keys, targets, lambda);

    const auto updates = distribute_memit(s.model, s.plan, s.facts, lambda);
    REQUIRE(updates.size() == 1);
    CHECK(updates[0].layer == 3);
    CHECK((updates[0].result.delta.array() == direct.delta.array()).all());
    CHECK((updates[0].result.new_weights.array() == direct.new_weights.array()).all());
  }
}

TEST_CASE("distribution spreads the residual and tightens final-layer memorization") {
  Setup s = make_setup(20, 1, 3, 3);
  const Matrix targets = target_matrix(s.model, s.facts);

  const Matrix keys_before = key_matrix(s.model, 3, s.facts);
  const double residual_before =
      (s.model.layer_weight(3) * keys_before - targets).norm();

  const auto updates = distribute_memit(s.model, s.plan, s.facts, 0.5);
  REQUIRE(updates.size() == 3);

  // Forward oracle: recompute keys on the edited model.
  const Matrix keys_after = key_matrix(s.model, 3, s.facts);
  const double residual_after =
      (s.model.layer_weight(3) * keys_after - targets).norm();
  CHECK(residual_after <= residual_before);

  // The last layer applied the full remaining residual (divisor 1), so its
  // own reported memorization residual is the final one.
  CHECK(updates.back().result.memorization_residual ==
        doctest::Approx(residual_after).epsilon(1e-9));

  // Attenuation: the full schedule ends at least as tight as editing only
  // layer L with the first layer's fraction 1/(L - l + 1).
  Setup frac = make_setup(20, 1, 3, 3);
  const double first_divisor = 3.0;  // layers 1..3, so L - l + 1 = 3 at l = 1
  const UpdateResult partial = memit_update(
      frac.model.layer_weight(3), frac.plan.per_layer_covariance.at(3),
      key_matrix(frac.model, 3, frac.facts), targets, 0.5, first_divisor);
  frac.model.apply_delta(3, partial.delta);
  const double residual_fraction_only =
      (frac.model.layer_weight(3) * key_matrix(frac.model, 3, frac.facts) - targets)
          .norm();
  CHECK(residual_after <= residual_fraction_only);
}

TEST_CASE("per-layer scaling is exactly 1/(L - l + 1)") {
  Setup s = make_setup(21, 2, 3, 3);
  const Matrix targets = target_matrix(s.model, s.facts);
  const Matrix keys_l2 = key_matrix(s.model, 2, s.facts);

  // First layer of a two-layer plan: divisor must be exactly 2.
  const UpdateResult expected = memit_update(
      s.model.layer_weight(2), s.plan.per_layer_covariance.at(2), keys_l2, targets,
      0.5, 2.0);
  const auto updates = distribute_memit(s.model, s.plan, s.facts, 0.5);
  CHECK((updates[0].result.delta.array() == expected.delta.array()).all());

  // And the half-residual update is genuinely half of the full one.
  const UpdateResult full = memit_update(
      s.model.layer_weight(2) - updates[0].result.delta,  // pre-edit weights
      s.plan.per_layer_covariance.at(2), keys_l2, targets, 0.5, 1.0);
  CHECK((2.0 * updates[0].result.delta - full.delta).norm() <=
        1e-12 * (1.0 + full.delta.norm()));
}

TEST_CASE("skipping key recomputation changes the outcome") {
  Setup s = make_setup(22, 1, 3, 3);
  const Matrix targets = target_matrix(s.model, s.facts);

  // Stale-key variant computed side by side: all keys from the unedited model.
  ToyModel stale = s.model;
  std::vector<Matrix> stale_keys;
  for (Index l = 1; l <= 3; ++l) stale_keys.push_back(key_matrix(stale, l, s.facts));
  for (Index l = 1; l <= 3; ++l) {
    const double divisor = static_cast<double>(3 - l + 1);
    const UpdateResult up = memit_update(
        stale.layer_weight(l), s.plan.per_layer_covariance.at(l),
        stale_keys[static_cast<std::size_t>(l - 1)], targets, 0.5, divisor);
    stale.apply_delta(l, up.delta);
  }

  const auto updates = distribute_memit(s.model, s.plan, s.facts, 0.5);
  REQUIRE(updates.size() == 3);

  // Layer 1 sees identical inputs either way; later layers must diverge.
  double later_diff = 0.0;
  for (Index l = 2; l <= 3; ++l) {
    later_diff += (s.model.layer_weight(l) - stale.layer_weight(l)).norm();
  }
  CHECK(later_diff > 1e-9);
}

TEST_CASE("rome distribution reduces to the direct rank-one solve at n=1") {
  Setup s = make_setup(23, 3, 3, 1);
  const Vector key = s.model.layer_key(3, s.facts[0].base_context);
  const UpdateResult direct = rome_update(
      s.model.layer_weight(3), s.plan.per_layer_covariance.at(3), key,
      s.facts[0].target_value);
  const auto updates = distribute_rome(s.model, s.plan, s.facts[0]);
  REQUIRE(updates.size() == 1);
  CHECK((updates[0].result.delta.array() == direct.delta.array()).all());
}

TEST_CASE("rome distribution with a current-output target is a no-op") {
  Setup s = make_setup(24, 3, 3, 1);
  s.facts[0].target_value =
      s.model.layer_weight(3) * s.model.layer_key(3, s.facts[0].base_context);
  const auto updates = distribute_rome(s.model, s.plan, s.facts[0]);
  CHECK((updates[0].result.delta.array() == 0.0).all());
}

TEST_CASE("two-layer rome distribution enforces the final equality") {
  Setup s = make_setup(25, 2, 3, 1);
  const auto updates = distribute_rome(s.model, s.plan, s.facts[0]);
  REQUIRE(updates.size() == 2);
  const Vector key_after = s.model.layer_key(3, s.facts[0].base_context);
  const Vector out = s.model.layer_weight(3) * key_after;
  CHECK((out - s.facts[0].target_value).norm() <=
        1e-8 * (1.0 + s.facts[0].target_value.norm()));
}

TEST_CASE("rome residual fraction switch applies the memit scaling") {
  Setup plain = make_setup(26, 2, 3, 1);
  Setup scaled = make_setup(26, 2, 3, 1);
  const auto u_plain = distribute_rome(plain.model, plain.plan, plain.facts[0], false);
  const auto u_scaled = distribute_rome(scaled.model, scaled.plan, scaled.facts[0], true);
  // First layer: full residual vs half residual.
  CHECK((u_plain[0].result.delta - 2.0 * u_scaled[0].result.delta).norm() <=
        1e-12 * (1.0 + u_plain[0].result.delta.norm()));
}

TEST_CASE("emmet distribution reduces to the direct solve at n=1") {
  Setup s = make_setup(27, 3, 3, 4);
  const Matrix keys = key_matrix(s.model, 3, s.facts);
  const Matrix targets = target_matrix(s.model, s.facts);
  const UpdateResult direct = emmet_update(
      s.model.layer_weight(3), s.plan.per_layer_covariance.at(3), keys, targets, 0.0);
  const auto updates = distribute_emmet(s.model, s.plan, s.facts, 0.0);
  REQUIRE(updates.size() == 1);
  CHECK((updates[0].result.delta.array() == direct.delta.array()).all());
  CHECK((s.model.layer_weight(3) * keys - targets).lpNorm<Eigen::Infinity>() <= 1e-8);
}

TEST_CASE("solver failures carry the offending layer") {
  Setup s = make_setup(28, 2, 3, 3);
  s.plan.per_layer_covariance[3] = Matrix::Zero(16, 16);  // unfactorable
  try {
    distribute_memit(s.model, s.plan, s.facts, 0.5);
    FAIL("expected FactorizationError");
  } catch (const FactorizationError& e) {
    CHECK(std::string(e.what()).find("layer 3") != std::string::npos);
  }
}

TEST_CASE("distribution rejects empty or malformed inputs") {
  Setup s = make_setup(29, 3, 3, 2);
  CHECK_THROWS_AS(distribute_memit(s.model, s.plan, {}, 0.5), InputError);
  s.facts[0].target_value = Vector::Zero(3);
  CHECK_THROWS_AS(distribute_memit(s.model, s.plan, s.facts, 0.5), DimensionError);
}
