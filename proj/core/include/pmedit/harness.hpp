#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pmedit/facts.hpp"
#include "pmedit/metrics.hpp"
#include "pmedit/solvers.hpp"
#include "pmedit/toymodel.hpp"

namespace pmedit {

struct ExperimentConfig {
  std::vector<Method> methods = {Method::EMMET, Method::MEMIT};
  ToyModelConfig model;

  std::uint64_t seed = 7;                    // master experiment seed
  std::vector<long> batch_sizes = {4, 16, 64};
  std::map<long, long> num_batches;          // per size; missing -> 3

  double lambda = 0.1;
  double alpha = 0.1;
  std::vector<double> lambda_grid = {0.01, 0.1, 1.0, 10.0, 100.0};
  std::vector<double> alpha_grid = {0.0, 0.01, 0.1, 1.0};
  long hparam_batch_size = 16;

  std::vector<Index> edit_layers;            // empty -> last layer only
  long preserve_count = 0;                   // 0 -> 4 * d_k
  long neighborhood_count = 32;

  ModelFactOptions fact_opts;
  long paraphrase_draws = 5;
  double paraphrase_noise = 0.1;

  double condition_warn_threshold = 1e8;
  bool rome_residual_fraction = false;
  std::string out_dir = "reports";
};

// Resolved edit layers: config value or the model's last layer.
std::vector<Index> resolve_edit_layers(const ExperimentConfig& config);

// "5" or "3-5" -> ascending contiguous layer list.
std::vector<Index> parse_layer_spec(const std::string& spec);
std::string layer_spec_string(const std::vector<Index>& layers);

void validate_config(const ExperimentConfig& config);

// JSON file loader; unknown keys are rejected. Every field is optional and
// falls back to the defaults above.
ExperimentConfig load_config(const std::filesystem::path& path);

// The exact fact set a run binds for the given cell; the sub-seed depends
// on (master seed, batch_size, batch_index) but never on the method.
std::vector<FactRecord> facts_for_batch(const ExperimentConfig& config,
                                        long batch_size, long batch_index);

// One batch: snapshot, bind facts, edit through the layer plan, score,
// restore. Deterministic in (config, method, batch_size, batch_index).
EditReport run_single_batch(const ExperimentConfig& config, Method method,
                            long batch_size, long batch_index);

// num_batches independent batches averaged into one aggregate report
// (batch_index -1). Sub-seeds derive from the master seed, the batch size
// and the batch index, never from the method.
EditReport run_edit(const ExperimentConfig& config, Method method, long batch_size);

// Per-batch rows plus one aggregate row per (method, size). EMMET batch
// sizes above d_k are capped to d_k when alpha == 0 and the cap is noted on
// stderr; ROME runs only at batch size 1.
std::vector<EditReport> sweep_batch(const ExperimentConfig& config);

// Grid over lambda (MEMIT) and alpha (EMMET, always including 0.1) at
// hparam_batch_size, plus a trailing "observation" row carrying the
// score-argmax lambda and alpha.
std::vector<EditReport> sweep_hparam(const ExperimentConfig& config);

void write_report_csv(const std::filesystem::path& path,
                      const std::vector<EditReport>& rows);
std::vector<EditReport> read_report_csv(const std::filesystem::path& path);

}  // namespace pmedit
