// Acceptance suite: one pass/fail line per criterion, fixed tolerances.
#include <doctest.h>

#include <Eigen/Eigenvalues>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "pmedit/distribution.hpp"
#include "pmedit/errors.hpp"
#include "pmedit/facts.hpp"
#include "pmedit/harness.hpp"
#include "pmedit/metrics.hpp"
#include "pmedit/oracle.hpp"
#include "pmedit/rng.hpp"
#include "pmedit/solvers.hpp"
#include "pmedit/toymodel.hpp"
#include "pmedit/verify.hpp"

using namespace pmedit;

namespace {

constexpr std::uint64_t kSuiteSeed = 90210;

struct Instance {
  Matrix w0, k0, k_e, v_e, c0;
};

Instance random_instance(std::uint64_t seed, Index d_k, Index d_v, Index n0, Index n_edits) {
  Rng rng(seed);
  Instance inst;
  inst.w0 = rng.normal_matrix(d_v, d_k) / std::sqrt(static_cast<double>(d_k));
  inst.k0 = rng.normal_matrix(d_k, n0);
  inst.k_e = rng.normal_matrix(d_k, n_edits);
  inst.v_e = rng.normal_matrix(d_v, n_edits);
  inst.c0 = accumulate_covariance(inst.k0).c0;
  return inst;
}

void report(int criterion, bool pass, const char* text) {
  std::printf("ACCEPTANCE %2d %s  %s\n", criterion, pass ? "PASS" : "FAIL", text);
  std::fflush(stdout);
}

}  // namespace

TEST_CASE("criterion 1: closed form matches the KKT oracle on 200 instances in under 60s") {
  const auto start = std::chrono::steady_clock::now();
  const Index dks[] = {16, 64};
  const Index batches[] = {1, 4, 16};
  double max_rel = 0.0;
  int n = 0;
  while (n < 200) {
    for (const Index d_k : dks) {
      for (const Index n_edits : batches) {
        if (n >= 200) break;
        const Instance inst = random_instance(
            derive_seed(kSuiteSeed, {1, static_cast<std::uint64_t>(n)}), d_k,
            3 * d_k / 4, 4 * d_k, n_edits);
        const UpdateResult up = emmet_update(inst.w0, inst.c0, inst.k_e, inst.v_e, 0.0);
        const OracleResult oracle = kkt_solve(inst.w0, inst.k0, inst.k_e, inst.v_e);
        max_rel = std::max(max_rel, (up.new_weights - oracle.weights).norm() /
                                        (1.0 + oracle.weights.norm()));
        ++n;
      }
    }
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool pass = max_rel <= 1e-7 && secs < 60.0;
  char line[160];
  std::snprintf(line, sizeof(line),
                "EMMET vs KKT oracle: n=200 max_rel=%.3e tol=1e-7 runtime=%.1fs", max_rel,
                secs);
  report(1, pass, line);
  CHECK(max_rel <= 1e-7);
  CHECK(secs < 60.0);
}

TEST_CASE("criterion 2: exact memorization per constraint column") {
  double max_col = 0.0;
  int n = 0;
  for (const Index d_k : {16, 64}) {
    for (const Index n_edits : {1, 4, 16}) {
      for (int rep = 0; rep < 20; ++rep) {
        const Instance inst = random_instance(
            derive_seed(kSuiteSeed, {2, static_cast<std::uint64_t>(n)}), d_k,
            3 * d_k / 4, 4 * d_k, n_edits);
        const UpdateResult up = emmet_update(inst.w0, inst.c0, inst.k_e, inst.v_e, 0.0);
        for (Index c = 0; c < n_edits; ++c) {
          max_col = std::max(
              max_col, (up.new_weights * inst.k_e.col(c) - inst.v_e.col(c)).norm() /
                           (1.0 + inst.v_e.col(c).norm()));
        }
        ++n;
      }
    }
  }
  char line[160];
  std::snprintf(line, sizeof(line),
                "EMMET alpha=0 equality: n=%d max_col_rel=%.3e tol=1e-8", n, max_col);
  report(2, max_col <= 1e-8, line);
  CHECK(max_col <= 1e-8);
}

TEST_CASE("criterion 3: single-edit deltas of both solvers coincide over 200 seeds") {
  double max_rel = 0.0;
  for (int i = 0; i < 200; ++i) {
    const Index d_k = (i % 2 == 0) ? 16 : 48;
    const Instance inst = random_instance(
        derive_seed(kSuiteSeed, {3, static_cast<std::uint64_t>(i)}), d_k, 3 * d_k / 4,
        4 * d_k, 1);
    const UpdateResult rome =
        rome_update(inst.w0, inst.c0, inst.k_e.col(0), inst.v_e.col(0));
    const UpdateResult emmet = emmet_update(inst.w0, inst.c0, inst.k_e, inst.v_e, 0.0);
    max_rel = std::max(max_rel, (rome.delta - emmet.delta).norm() /
                                    (1.0 + rome.delta.norm()));
  }
  char line[160];
  std::snprintf(line, sizeof(line),
                "ROME / EMMET E=1 reduction: n=200 max_rel=%.3e tol=1e-10", max_rel);
  report(3, max_rel <= 1e-10, line);
  CHECK(max_rel <= 1e-10);
}

TEST_CASE("criterion 4: least-squares stationarity and optimality vs long descent") {
  double max_stat = 0.0;
  double max_excess = 0.0;
  const double lambdas[] = {0.1, 0.5, 2.0};
  for (int i = 0; i < 100; ++i) {
    const Instance inst = random_instance(
        derive_seed(kSuiteSeed, {4, static_cast<std::uint64_t>(i)}), 16, 12, 64, 8);
    const double lambda = lambdas[i % 3];
    const UpdateResult up = memit_update(inst.w0, inst.c0, inst.k_e, inst.v_e, lambda);

    const Matrix stat = lambda * up.delta * inst.c0 +
                        (up.new_weights * inst.k_e - inst.v_e) * inst.k_e.transpose();
    max_stat = std::max(max_stat, stat.norm() / (1.0 + inst.v_e.norm()));

    Matrix hess = lambda * inst.c0 + inst.k_e * inst.k_e.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(hess);
    const double step = 0.9 / (2.0 * eig.eigenvalues().maxCoeff());
    const OracleResult gd =
        gd_minimize(inst.w0, inst.k0, inst.k_e, inst.v_e, lambda, 5000, step);
    const double closed =
        memit_objective(up.new_weights, inst.w0, inst.k0, inst.k_e, inst.v_e, lambda);
    max_excess =
        std::max(max_excess, (closed - gd.objective_value) / (1.0 + gd.objective_value));
  }
  const bool pass = max_stat <= 1e-8 && max_excess <= 1e-6;
  char line[200];
  std::snprintf(line, sizeof(line),
                "MEMIT: n=100 max_stationarity=%.3e (tol 1e-8) max_excess_vs_gd5000=%.3e "
                "(tol 1e-6)",
                max_stat, max_excess);
  report(4, pass, line);
  CHECK(max_stat <= 1e-8);
  CHECK(max_excess <= 1e-6);
}

TEST_CASE("criterion 5: single-layer distribution is byte-equal to the direct solve") {
  int mismatches = 0;
  for (int i = 0; i < 50; ++i) {
    const std::uint64_t seed = derive_seed(kSuiteSeed, {5, static_cast<std::uint64_t>(i)});
    ToyModelConfig mc;
    mc.d_ctx = 8;
    mc.d_k = 16;
    mc.d_v = 12;
    mc.vocab = 10;
    mc.layers = 3;
    mc.seed = seed;
    ToyModel model = ToyModel::random(mc);
    const Index layer = 2;

    Rng rng(derive_seed(seed, {99}));
    std::vector<FactRecord> facts(4);
    Matrix keys(mc.d_k, 4);
    Matrix targets(mc.d_v, 4);
    for (int f = 0; f < 4; ++f) {
      facts[static_cast<std::size_t>(f)].fact_id = f;
      facts[static_cast<std::size_t>(f)].base_context = rng.normal_vector(mc.d_ctx);
      facts[static_cast<std::size_t>(f)].target_value = rng.normal_vector(mc.d_v);
      keys.col(f) = model.layer_key(layer, facts[static_cast<std::size_t>(f)].base_context);
      targets.col(f) = facts[static_cast<std::size_t>(f)].target_value;
    }
    const Matrix c0 = accumulate_covariance(rng.normal_matrix(mc.d_k, 4 * mc.d_k)).c0;
    const UpdateResult direct =
        memit_update(model.layer_weight(layer), c0, keys, targets, 0.5);

    LayerPlan plan;
    plan.edit_layers = {layer};
    plan.final_layer = layer;
    plan.per_layer_covariance[layer] = c0;
    const auto dist = distribute_memit(model, plan, facts, 0.5);
    if (!(dist.front().result.delta.array() == direct.delta.array()).all() ||
        !(dist.front().result.new_weights.array() == direct.new_weights.array()).all()) {
      ++mismatches;
    }
  }
  char line[160];
  std::snprintf(line, sizeof(line),
                "n=1 edit-distribution reduction: 50 seeds, byte mismatches=%d", mismatches);
  report(5, mismatches == 0, line);
  CHECK(mismatches == 0);
}

TEST_CASE("criterion 6: composite score reproduces the reference rows") {
  const double s1 = composite_score(100.0, 97.9, 75.31);
  const double s2 = composite_score(100.0, 97.25, 81.94);
  const bool pass = std::abs(s1 - 89.57) <= 0.01 && std::abs(s2 - 92.34) <= 0.01;
  char line[160];
  std::snprintf(line, sizeof(line),
                "harmonic mean: S(100,97.9,75.31)=%.4f (89.57+-0.01) "
                "S(100,97.25,81.94)=%.4f (92.34+-0.01)",
                s1, s2);
  report(6, pass, line);
  CHECK(s1 == doctest::Approx(89.57).epsilon(0.000113));
  CHECK(s2 == doctest::Approx(92.34).epsilon(0.000109));
}

TEST_CASE("criterion 7: analytic gradients match central differences") {
  const double eps = 1e-5;
  double max_rel_obj = 0.0;
  for (int i = 0; i < 20; ++i) {
    const Instance inst = random_instance(
        derive_seed(kSuiteSeed, {7, static_cast<std::uint64_t>(i)}), 12, 8, 48, 4);
    Rng rng(derive_seed(kSuiteSeed, {77, static_cast<std::uint64_t>(i)}));
    const Matrix at = inst.w0 + 0.1 * rng.normal_matrix(8, 12);
    const Matrix analytic = memit_gradient(at, inst.w0, inst.k0, inst.k_e, inst.v_e, 0.7);
    const Matrix numeric = finite_diff_gradient(
        [&](const Matrix& w) {
          return memit_objective(w, inst.w0, inst.k0, inst.k_e, inst.v_e, 0.7);
        },
        at, eps);
    max_rel_obj =
        std::max(max_rel_obj, (analytic - numeric).norm() / (1.0 + numeric.norm()));
  }

  ToyModelConfig mc;
  mc.d_ctx = 8;
  mc.d_k = 12;
  mc.d_v = 10;
  mc.vocab = 8;
  mc.layers = 3;
  mc.seed = derive_seed(kSuiteSeed, {70});
  const ToyModel model = ToyModel::random(mc);
  double max_rel_value = 0.0;
  for (int i = 0; i < 20; ++i) {
    Rng rng(derive_seed(kSuiteSeed, {71, static_cast<std::uint64_t>(i)}));
    const Vector k_e = model.layer_key(1, rng.normal_vector(mc.d_ctx));
    const Index target = static_cast<Index>(rng.uniform_below(mc.vocab));
    const double kl = (i % 2 == 0) ? 0.0 : 0.5;
    const Vector at = model.layer_weight(1) * k_e + 0.3 * rng.normal_vector(mc.d_v);
    const Vector analytic = value_loss_gradient(model, 1, k_e, target, kl, at);
    const Matrix numeric = finite_diff_gradient(
        [&](const Matrix& v) { return value_loss(model, 1, k_e, target, kl, v.col(0)); },
        Matrix(at), eps);
    max_rel_value = std::max(
        max_rel_value, (analytic - numeric.col(0)).norm() / (1.0 + numeric.norm()));
  }
  const bool pass = max_rel_obj <= 1e-5 && max_rel_value <= 1e-5;
  char line[160];
  std::snprintf(line, sizeof(line),
                "gradient checks at eps=1e-5: objective max_rel=%.3e value-loss "
                "max_rel=%.3e (tol 1e-5)",
                max_rel_obj, max_rel_value);
  report(7, pass, line);
  CHECK(max_rel_obj <= 1e-5);
  CHECK(max_rel_value <= 1e-5);
}

TEST_CASE("criterion 8: a 16-fact exact batch flips every fact and spares the neighborhood") {
  ExperimentConfig config;  // default desk-scale dimensions
  config.seed = kSuiteSeed;
  config.model.seed = derive_seed(kSuiteSeed, {8});
  config.alpha = 0.0;
  REQUIRE(config.preserve_count == 0);  // resolves to 4 * d_k preserved keys

  const EditReport run1 = run_single_batch(config, Method::EMMET, 16, 0);
  const EditReport run2 = run_single_batch(config, Method::EMMET, 16, 0);

  // Pre-edit scores on the same facts come from the unedited model.
  const auto facts = facts_for_batch(config, 16, 0);
  const ToyModel model = ToyModel::random(config.model);
  const double pre_es = efficacy(model, facts).score;

  const bool pass = run1.es == 100.0 && pre_es < 100.0 &&
                    (100.0 - run1.ns) <= 25.0 &&
                    edit_report_csv_row(run1) == edit_report_csv_row(run2);
  char line[200];
  std::snprintf(line, sizeof(line),
                "end-to-end EMMET alpha=0 E=16: pre_es=%.1f post_es=%.1f ns=%.2f "
                "(drop<=25) deterministic=%d",
                pre_es, run1.es, run1.ns, edit_report_csv_row(run1) == edit_report_csv_row(run2));
  report(8, pass, line);
  CHECK(run1.es == 100.0);
  CHECK(pre_es < 100.0);
  CHECK(100.0 - run1.ns <= 25.0);
  CHECK(edit_report_csv_row(run1) == edit_report_csv_row(run2));
}

TEST_CASE("criterion 9: near-parallel batches are flagged and stabilized") {
  const Index d_k = 64;
  Rng rng(derive_seed(kSuiteSeed, {9}));
  Vector base = rng.normal_vector(d_k);
  base /= base.norm();
  Matrix k_e(d_k, 16);
  for (Index c = 0; c < 16; ++c) {
    Vector v = base + 1e-5 * rng.normal_vector(d_k);
    k_e.col(c) = v / v.norm();
  }
  const Matrix c0 = Matrix::Identity(d_k, d_k);
  const Matrix w0 = rng.normal_matrix(48, d_k) / 8.0;
  const Matrix v_e = rng.normal_matrix(48, 16);

  const Matrix d = k_e.transpose() * k_e;
  const double cond_d = condition_number(d, true);
  Matrix d_reg = d;
  d_reg.diagonal().array() += 0.1;
  const double cond_reg = condition_number(d_reg, true);

  bool alpha0_reported = false;
  try {
    alpha0_reported = emmet_update(w0, c0, k_e, v_e, 0.0).d_ill_conditioned;
  } catch (const Error&) {
    alpha0_reported = true;
  }
  bool regularized_ok = false;
  try {
    const UpdateResult reg = emmet_update(w0, c0, k_e, v_e, 0.1);
    regularized_ok = reg.new_weights.allFinite() && !reg.d_ill_conditioned;
  } catch (const Error&) {
  }

  const bool pass = cond_d > 1e6 && cond_reg < cond_d && alpha0_reported && regularized_ok;
  char line[200];
  std::snprintf(line, sizeof(line),
                "conditioning: cond(D)=%.2e (>1e6) cond(D+0.1I)=%.2e (<cond(D)) "
                "alpha0_flagged=%d regularized_ok=%d",
                cond_d, cond_reg, alpha0_reported, regularized_ok);
  report(9, pass, line);
  CHECK(cond_d > 1e6);
  CHECK(cond_reg < cond_d);
  CHECK(alpha0_reported);
  CHECK(regularized_ok);
}

TEST_CASE("criterion 10: the verify suite is green, fast and bit-reproducible") {
  const auto start = std::chrono::steady_clock::now();
  VerifyConfig vc;
  vc.seed = kSuiteSeed;
  const VerifyReport a = run_verify(vc);
  const VerifyReport b = run_verify(vc);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const bool pass = a.all_pass && b.all_pass && a.summary() == b.summary() && secs < 300.0;
  char line[160];
  std::snprintf(line, sizeof(line),
                "verify: all_pass=%d bit_identical=%d two runs in %.1fs (< 300s)",
                a.all_pass, a.summary() == b.summary(), secs);
  report(10, pass, line);
  CHECK(a.all_pass);
  CHECK(a.summary() == b.summary());
  CHECK(secs < 300.0);
}
