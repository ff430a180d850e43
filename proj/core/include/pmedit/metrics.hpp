#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pmedit/facts.hpp"
#include "pmedit/toymodel.hpp"
#include "pmedit/types.hpp"

namespace pmedit {

// A percentage in [0, 100] plus the mean probability gap behind it.
struct MagScore {
  double score = 0.0;
  double magnitude = 0.0;
};

// Share of facts whose edited object now beats the original one on the
// edit context, P(new) > P(old). Magnitude is mean P(new) - P(old).
MagScore efficacy(const ToyModel& model_after, const std::vector<FactRecord>& facts);

struct ParaphraseOptions {
  long draws = 5;
  double noise_scale = 0.1;
  std::uint64_t seed = 0;
};

// The efficacy predicate on fresh noise draws around each base context,
// averaged per fact and then across facts. Facts must carry paraphrase
// keys (being built for paraphrasing is part of the record contract).
MagScore paraphrase(const ToyModel& model_after, const std::vector<FactRecord>& facts,
                    const ParaphraseOptions& opts);

// Share of held-out neighborhood facts whose original object (argmax under
// model_before) still beats that fact's hypothetical edit target after the
// edit. Magnitude is the mean margin.
MagScore neighborhood(const ToyModel& model_before, const ToyModel& model_after,
                      const PreservationSet& preservation);

// Harmonic mean of the three percentages; throws InputError when any is
// not strictly positive.
double composite_score(double es, double ps, double ns);

// Sum over layers of ||(W_after - W_before) K_hold||_F / ||W_before K_hold||_F.
double preservation_drift(const ToyModel& model_before, const ToyModel& model_after,
                          const Matrix& holdout_keys);

// One experiment row. score_s and condition_d use NaN as the
// undefined/absent marker; ge is always NaN (no text generation here) and
// serializes as an empty column for schema compatibility.
struct EditReport {
  std::string method;
  long batch_size = 0;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  double alpha = 0.0;
  double es = 0.0, em = 0.0;
  double ps = 0.0, pm = 0.0;
  double ns = 0.0, nm = 0.0;
  double ge = std::numeric_limits<double>::quiet_NaN();
  double score_s = std::numeric_limits<double>::quiet_NaN();
  double memorization_residual = 0.0;
  double preservation_drift = 0.0;
  double condition_c0 = 0.0;
  double condition_d = std::numeric_limits<double>::quiet_NaN();
  std::string layer_plan;   // e.g. "5" or "3-5"
  long batch_index = -1;    // -1 marks an aggregate row
};

// CSV schema v1. Column order is fixed:
//   method,batch_size,seed,lambda,alpha,es,em,ps,pm,ns,nm,ge,s,
//   mem_residual,drift,cond_c0,cond_d,layer_plan,batch_index
// Numeric fields print with 17 significant digits so rows reproduce
// bit-identically; NaN prints as an empty field.
std::string edit_report_csv_header();
std::string edit_report_csv_row(const EditReport& report);

}  // namespace pmedit
