#include "pmedit/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "pmedit/errors.hpp"
#include "pmedit/rng.hpp"

namespace pmedit {

MagScore efficacy(const ToyModel& model_after, const std::vector<FactRecord>& facts) {
  if (facts.empty()) throw InputError("efficacy over an empty fact set");
  double hits = 0.0;
  double gap = 0.0;
  for (const FactRecord& f : facts) {
    const Vector p = softmax(model_after.logits(f.base_context));
    if (p[f.new_object] > p[f.old_object]) hits += 1.0;
    gap += p[f.new_object] - p[f.old_object];
  }
  const double n = static_cast<double>(facts.size());
  return {100.0 * hits / n, gap / n};
}

MagScore paraphrase(const ToyModel& model_after, const std::vector<FactRecord>& facts,
                    const ParaphraseOptions& opts) {
  if (facts.empty()) throw InputError("paraphrase over an empty fact set");
  if (opts.draws < 1) throw InputError("paraphrase needs at least one draw");
  double score_sum = 0.0;
  double gap_sum = 0.0;
  for (const FactRecord& f : facts) {
    if (f.paraphrase_keys.empty()) {
      throw InputError("fact " + std::to_string(f.fact_id) +
                       " has no paraphrase keys; it was not built for paraphrasing");
    }
    Rng rng(derive_seed(opts.seed, {fnv1a64("metrics.paraphrase"),
                                    static_cast<std::uint64_t>(f.fact_id)}));
    double hits = 0.0;
    double gap = 0.0;
    for (long d = 0; d < opts.draws; ++d) {
      Vector ctx = f.base_context;
      if (opts.noise_scale > 0.0) {
        ctx += opts.noise_scale * rng.normal_vector(ctx.size());
      }
      const Vector p = softmax(model_after.logits(ctx));
      if (p[f.new_object] > p[f.old_object]) hits += 1.0;
      gap += p[f.new_object] - p[f.old_object];
    }
    score_sum += hits / static_cast<double>(opts.draws);
    gap_sum += gap / static_cast<double>(opts.draws);
  }
  const double n = static_cast<double>(facts.size());
  return {100.0 * score_sum / n, gap_sum / n};
}

MagScore neighborhood(const ToyModel& model_before, const ToyModel& model_after,
                      const PreservationSet& preservation) {
  const auto& neighbors = preservation.neighborhood_facts;
  if (neighbors.empty()) throw InputError("neighborhood score over an empty set");
  double hits = 0.0;
  double gap = 0.0;
  for (const FactRecord& g : neighbors) {
    Index original = 0;
    softmax(model_before.logits(g.base_context)).maxCoeff(&original);
    const Vector p = softmax(model_after.logits(g.base_context));
    if (p[original] > p[g.new_object]) hits += 1.0;
    gap += p[original] - p[g.new_object];
  }
  const double n = static_cast<double>(neighbors.size());
  return {100.0 * hits / n, gap / n};
}

double composite_score(double es, double ps, double ns) {
  if (!(es > 0.0) || !(ps > 0.0) || !(ns > 0.0)) {
    throw InputError("composite score undefined unless es, ps, ns are all > 0");
  }
  return 3.0 / (1.0 / es + 1.0 / ps + 1.0 / ns);
}

double preservation_drift(const ToyModel& model_before, const ToyModel& model_after,
                          const Matrix& holdout_keys) {
  if (model_before.layer_count() != model_after.layer_count()) {
    throw DimensionError("models have different layer counts");
  }
  if (holdout_keys.rows() != model_before.d_k()) {
    throw DimensionError("holdout keys have wrong dimension");
  }
  double drift = 0.0;
  for (Index l = 0; l < model_before.layer_count(); ++l) {
    const Matrix diff = model_after.layer_weight(l) - model_before.layer_weight(l);
    const double num = (diff * holdout_keys).norm();
    if (num == 0.0) continue;
    const double den = (model_before.layer_weight(l) * holdout_keys).norm();
    if (den == 0.0) return std::numeric_limits<double>::infinity();
    drift += num / den;
  }
  return drift;
}

namespace {

std::string format_cell(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string edit_report_csv_header() {
  return "method,batch_size,seed,lambda,alpha,es,em,ps,pm,ns,nm,ge,s,"
         "mem_residual,drift,cond_c0,cond_d,layer_plan,batch_index";
}

std::string edit_report_csv_row(const EditReport& r) {
  std::ostringstream out;
  out << r.method << ',' << r.batch_size << ',' << r.seed << ','
      << format_cell(r.lambda) << ',' << format_cell(r.alpha) << ','
      << format_cell(r.es) << ',' << format_cell(r.em) << ','
      << format_cell(r.ps) << ',' << format_cell(r.pm) << ','
      << format_cell(r.ns) << ',' << format_cell(r.nm) << ','
      << format_cell(r.ge) << ',' << format_cell(r.score_s) << ','
      << format_cell(r.memorization_residual) << ','
      << format_cell(r.preservation_drift) << ','
      << format_cell(r.condition_c0) << ',' << format_cell(r.condition_d) << ','
      << r.layer_plan << ',' << r.batch_index;
  return out.str();
}

}  // namespace pmedit
