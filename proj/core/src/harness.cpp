#include "pmedit/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "pmedit/distribution.hpp"
#include "pmedit/errors.hpp"
#include "pmedit/rng.hpp"

namespace pmedit {

namespace {

constexpr std::uint64_t kFactsTag = fnv1a64("harness.facts");
constexpr std::uint64_t kPreserveTag = fnv1a64("harness.preserve");
constexpr std::uint64_t kParaphraseTag = fnv1a64("harness.paraphrase");

long batches_for_size(const ExperimentConfig& config, long size) {
  auto it = config.num_batches.find(size);
  return it == config.num_batches.end() ? 3 : it->second;
}

long effective_preserve_count(const ExperimentConfig& config) {
  return config.preserve_count > 0 ? config.preserve_count : 4 * config.model.d_k;
}

LayerPlan build_plan(const ToyModel& model, const std::vector<Index>& layers,
                     const Matrix& preserve_ctx) {
  LayerPlan plan;
  plan.edit_layers = layers;
  plan.final_layer = layers.back();
  for (const Index l : layers) {
    Matrix keys(model.d_k(), preserve_ctx.cols());
    for (Index j = 0; j < preserve_ctx.cols(); ++j) {
      keys.col(j) = model.layer_key(l, preserve_ctx.col(j));
    }
    CovarianceResult cov = accumulate_covariance(keys);
    if (cov.rank_deficient) {
      std::cerr << "warning: preservation covariance at layer " << l
                << " is rank deficient (rank " << cov.rank << " of " << model.d_k()
                << ")\n";
    }
    plan.per_layer_covariance[l] = std::move(cov.c0);
  }
  return plan;
}

}  // namespace

std::vector<Index> resolve_edit_layers(const ExperimentConfig& config) {
  if (!config.edit_layers.empty()) return config.edit_layers;
  return {config.model.layers - 1};
}

std::vector<Index> parse_layer_spec(const std::string& spec) {
  const auto dash = spec.find('-');
  try {
    if (dash == std::string::npos) {
      return {static_cast<Index>(std::stol(spec))};
    }
    const long lo = std::stol(spec.substr(0, dash));
    const long hi = std::stol(spec.substr(dash + 1));
    if (lo > hi) throw ConfigError("layer range '" + spec + "' is descending");
    std::vector<Index> layers;
    for (long l = lo; l <= hi; ++l) layers.push_back(static_cast<Index>(l));
    return layers;
  } catch (const std::invalid_argument&) {
    throw ConfigError("cannot parse layer spec '" + spec + "'");
  } catch (const std::out_of_range&) {
    throw ConfigError("layer spec '" + spec + "' out of range");
  }
}

std::string layer_spec_string(const std::vector<Index>& layers) {
  if (layers.size() == 1) return std::to_string(layers.front());
  return std::to_string(layers.front()) + "-" + std::to_string(layers.back());
}

void validate_config(const ExperimentConfig& config) {
  if (config.methods.empty()) throw ConfigError("no methods configured");
  if (config.model.d_ctx < 1 || config.model.d_k < 1 || config.model.d_v < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (config.model.vocab < 2) throw ConfigError("vocab must be >= 2");
  if (config.model.layers < 1) throw ConfigError("model needs at least one layer");
  if (config.batch_sizes.empty()) throw ConfigError("no batch sizes configured");
  for (long s : config.batch_sizes) {
    if (s < 1) throw ConfigError("batch size must be >= 1, got " + std::to_string(s));
  }
  for (const auto& [size, n] : config.num_batches) {
    if (n < 1) {
      throw ConfigError("num_batches for size " + std::to_string(size) + " must be >= 1");
    }
  }
  const std::vector<Index> layers = resolve_edit_layers(config);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i] < 0 || layers[i] >= config.model.layers) {
      throw ConfigError("edit layer " + std::to_string(layers[i]) + " out of range");
    }
    if (i > 0 && layers[i] != layers[i - 1] + 1) {
      throw ConfigError("edit layers must be contiguous and ascending");
    }
  }
  if (config.neighborhood_count < 1) throw ConfigError("neighborhood_count must be >= 1");
  if (config.neighborhood_count > effective_preserve_count(config)) {
    throw ConfigError("neighborhood_count exceeds preservation key count");
  }
  if (config.paraphrase_draws < 1) throw ConfigError("paraphrase_draws must be >= 1");
  if (config.paraphrase_noise < 0) throw ConfigError("paraphrase_noise must be >= 0");
  if (config.fact_opts.solve_steps < 1) throw ConfigError("solve_steps must be >= 1");
  if (config.fact_opts.solve_step_size <= 0) throw ConfigError("solve_step_size must be > 0");
  if (config.fact_opts.kl_weight < 0) throw ConfigError("kl_weight must be >= 0");
  if (config.fact_opts.paraphrase_count < 1) {
    throw ConfigError("facts need at least one paraphrase key");
  }
  if (config.lambda < 0) throw ConfigError("lambda must be >= 0");
  if (config.alpha < 0) throw ConfigError("alpha must be >= 0");
  if (config.hparam_batch_size < 1) throw ConfigError("hparam_batch_size must be >= 1");
}

namespace {

void read_model_section(const nlohmann::json& j, ToyModelConfig& model) {
  static const std::vector<std::string> keys = {"d_ctx", "d_k", "d_v",
                                                "vocab", "layers", "seed"};
  for (const auto& item : j.items()) {
    if (std::find(keys.begin(), keys.end(), item.key()) == keys.end()) {
      throw ConfigError("unknown model config key '" + item.key() + "'");
    }
  }
  model.d_ctx = j.value("d_ctx", model.d_ctx);
  model.d_k = j.value("d_k", model.d_k);
  model.d_v = j.value("d_v", model.d_v);
  model.vocab = j.value("vocab", model.vocab);
  model.layers = j.value("layers", model.layers);
  model.seed = j.value("seed", model.seed);
}

void read_facts_section(const nlohmann::json& j, ModelFactOptions& opts) {
  static const std::vector<std::string> keys = {
      "kl_weight", "solve_steps", "solve_step_size", "paraphrase_count",
      "paraphrase_noise"};
  for (const auto& item : j.items()) {
    if (std::find(keys.begin(), keys.end(), item.key()) == keys.end()) {
      throw ConfigError("unknown facts config key '" + item.key() + "'");
    }
  }
  opts.kl_weight = j.value("kl_weight", opts.kl_weight);
  opts.solve_steps = j.value("solve_steps", opts.solve_steps);
  opts.solve_step_size = j.value("solve_step_size", opts.solve_step_size);
  opts.paraphrase_count = j.value("paraphrase_count", opts.paraphrase_count);
  opts.paraphrase_noise = j.value("paraphrase_noise", opts.paraphrase_noise);
}

}  // namespace

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path.string() + ": " + e.what());
  }

  static const std::vector<std::string> keys = {
      "methods",        "model",         "seed",
      "batch_sizes",    "num_batches",   "lambda",
      "alpha",          "lambda_grid",   "alpha_grid",
      "hparam_batch_size", "edit_layers", "preserve_count",
      "neighborhood_count", "paraphrase_draws", "paraphrase_noise",
      "facts",          "condition_warn_threshold", "rome_residual_fraction",
      "out"};
  for (const auto& item : j.items()) {
    if (std::find(keys.begin(), keys.end(), item.key()) == keys.end()) {
      throw ConfigError("unknown config key '" + item.key() + "'");
    }
  }

  ExperimentConfig config;
  try {
    if (j.contains("methods")) {
      config.methods.clear();
      for (const auto& m : j["methods"]) {
        config.methods.push_back(method_from_name(m.get<std::string>()));
      }
    }
    if (j.contains("model")) read_model_section(j["model"], config.model);
    config.seed = j.value("seed", config.seed);
    if (j.contains("batch_sizes")) {
      config.batch_sizes = j["batch_sizes"].get<std::vector<long>>();
    }
    if (j.contains("num_batches")) {
      for (const auto& item : j["num_batches"].items()) {
        config.num_batches[std::stol(item.key())] = item.value().get<long>();
      }
    }
    config.lambda = j.value("lambda", config.lambda);
    config.alpha = j.value("alpha", config.alpha);
    if (j.contains("lambda_grid")) {
      config.lambda_grid = j["lambda_grid"].get<std::vector<double>>();
    }
    if (j.contains("alpha_grid")) {
      config.alpha_grid = j["alpha_grid"].get<std::vector<double>>();
    }
    config.hparam_batch_size = j.value("hparam_batch_size", config.hparam_batch_size);
    if (j.contains("edit_layers")) {
      if (j["edit_layers"].is_string()) {
        config.edit_layers = parse_layer_spec(j["edit_layers"].get<std::string>());
      } else {
        config.edit_layers = j["edit_layers"].get<std::vector<Index>>();
      }
    }
    config.preserve_count = j.value("preserve_count", config.preserve_count);
    config.neighborhood_count = j.value("neighborhood_count", config.neighborhood_count);
    config.paraphrase_draws = j.value("paraphrase_draws", config.paraphrase_draws);
    config.paraphrase_noise = j.value("paraphrase_noise", config.paraphrase_noise);
    if (j.contains("facts")) read_facts_section(j["facts"], config.fact_opts);
    config.condition_warn_threshold =
        j.value("condition_warn_threshold", config.condition_warn_threshold);
    config.rome_residual_fraction =
        j.value("rome_residual_fraction", config.rome_residual_fraction);
    config.out_dir = j.value("out", config.out_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config value error in " + path.string() + ": " + e.what());
  }
  validate_config(config);
  return config;
}

namespace {

struct BatchContext {
  ToyModel model;
  Snapshot base;
  Matrix preserve_ctx;
  LayerPlan plan;
  PreservationSet preservation;
};

BatchContext make_context(const ExperimentConfig& config) {
  const std::vector<Index> layers = resolve_edit_layers(config);
  BatchContext ctx{ToyModel::random(config.model), {}, {}, {}, {}};
  ctx.base = ctx.model.snapshot();
  ctx.preserve_ctx =
      preservation_contexts(config.model.d_ctx, effective_preserve_count(config),
                            derive_seed(config.seed, {kPreserveTag}));
  ctx.plan = build_plan(ctx.model, layers, ctx.preserve_ctx);
  ctx.preservation = preservation_from_contexts(
      ctx.model, ctx.plan.final_layer, ctx.preserve_ctx, config.neighborhood_count,
      derive_seed(config.seed, {kPreserveTag}));
  ctx.preservation.covariance = ctx.plan.per_layer_covariance.at(ctx.plan.final_layer);
  validate_preservation_set(ctx.preservation);
  return ctx;
}

EditReport run_batch_in_context(BatchContext& ctx, const ExperimentConfig& config,
                                Method method, long batch_size, long batch_index) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (method == Method::ROME && batch_size != 1) {
    throw ConfigError("ROME edits one fact at a time; use batch size 1");
  }
  if (method == Method::EMMET && config.alpha == 0.0 &&
      batch_size > config.model.d_k) {
    throw ConfigError("EMMET with alpha = 0 needs batch size <= d_k (" +
                      std::to_string(config.model.d_k) + ")");
  }

  const std::uint64_t facts_seed = derive_seed(
      config.seed, {kFactsTag, static_cast<std::uint64_t>(batch_size),
                    static_cast<std::uint64_t>(batch_index)});
  const std::vector<FactRecord> facts = make_model_facts(
      ctx.model, ctx.plan.final_layer, batch_size, facts_seed, config.fact_opts);

  const ToyModel before = ctx.model;
  std::vector<LayerUpdate> updates;
  try {
    switch (method) {
      case Method::ROME:
        updates = distribute_rome(ctx.model, ctx.plan, facts.front(),
                                  config.rome_residual_fraction);
        break;
      case Method::MEMIT:
        updates = distribute_memit(ctx.model, ctx.plan, facts, config.lambda);
        break;
      case Method::EMMET:
        updates = distribute_emmet(ctx.model, ctx.plan, facts, config.alpha,
                                   config.condition_warn_threshold);
        break;
    }
  } catch (const ConfigError&) {
    ctx.model.restore(ctx.base);
    throw;
  } catch (const Error& e) {
    ctx.model.restore(ctx.base);
    throw Error(std::string("edit failed (") + method_name(method) + ", batch size " +
                std::to_string(batch_size) + ", batch " + std::to_string(batch_index) +
                "): " + e.what());
  }

  EditReport report;
  report.method = method_name(method);
  report.batch_size = batch_size;
  report.seed = config.seed;
  report.lambda = method == Method::MEMIT ? config.lambda
                                          : std::numeric_limits<double>::quiet_NaN();
  report.alpha = method == Method::EMMET ? config.alpha
                                         : std::numeric_limits<double>::quiet_NaN();
  report.layer_plan = layer_spec_string(ctx.plan.edit_layers);
  report.batch_index = batch_index;

  try {
    const MagScore es = efficacy(ctx.model, facts);
    report.es = es.score;
    report.em = es.magnitude;
    ParaphraseOptions popts;
    popts.draws = config.paraphrase_draws;
    popts.noise_scale = config.paraphrase_noise;
    popts.seed =
        derive_seed(config.seed, {kParaphraseTag, static_cast<std::uint64_t>(batch_size),
                                  static_cast<std::uint64_t>(batch_index)});
    const MagScore ps = paraphrase(ctx.model, facts, popts);
    report.ps = ps.score;
    report.pm = ps.magnitude;
    const MagScore ns = neighborhood(before, ctx.model, ctx.preservation);
    report.ns = ns.score;
    report.nm = ns.magnitude;
    report.preservation_drift =
        preservation_drift(before, ctx.model, ctx.preservation.keys);
  } catch (const Error& e) {
    ctx.model.restore(ctx.base);
    throw Error(std::string("metric evaluation failed (") + method_name(method) +
                ", batch size " + std::to_string(batch_size) + ", batch " +
                std::to_string(batch_index) + "): " + e.what());
  }
  try {
    report.score_s = composite_score(report.es, report.ps, report.ns);
  } catch (const InputError&) {
    report.score_s = std::numeric_limits<double>::quiet_NaN();
  }

  const UpdateResult& last = updates.back().result;
  report.memorization_residual = last.memorization_residual;
  report.condition_c0 = last.condition_c0;
  if (last.condition_d) report.condition_d = *last.condition_d;

  ctx.model.restore(ctx.base);
  if (ctx.model.content_hash() != ctx.base.hash) {
    throw CorruptionError("base model hash changed after restore");
  }
  return report;
}

double mean_or_nan(const std::vector<EditReport>& rows, double EditReport::*field) {
  double sum = 0.0;
  for (const EditReport& r : rows) {
    const double v = r.*field;
    if (std::isnan(v)) return std::numeric_limits<double>::quiet_NaN();
    sum += v;
  }
  return sum / static_cast<double>(rows.size());
}

EditReport aggregate_rows(const std::vector<EditReport>& rows) {
  EditReport agg = rows.front();
  agg.batch_index = -1;
  agg.es = mean_or_nan(rows, &EditReport::es);
  agg.em = mean_or_nan(rows, &EditReport::em);
  agg.ps = mean_or_nan(rows, &EditReport::ps);
  agg.pm = mean_or_nan(rows, &EditReport::pm);
  agg.ns = mean_or_nan(rows, &EditReport::ns);
  agg.nm = mean_or_nan(rows, &EditReport::nm);
  agg.ge = mean_or_nan(rows, &EditReport::ge);
  agg.score_s = mean_or_nan(rows, &EditReport::score_s);
  agg.memorization_residual = mean_or_nan(rows, &EditReport::memorization_residual);
  agg.preservation_drift = mean_or_nan(rows, &EditReport::preservation_drift);
  agg.condition_c0 = mean_or_nan(rows, &EditReport::condition_c0);
  agg.condition_d = mean_or_nan(rows, &EditReport::condition_d);
  return agg;
}

}  // namespace

std::vector<FactRecord> facts_for_batch(const ExperimentConfig& config,
                                        long batch_size, long batch_index) {
  validate_config(config);
  const ToyModel model = ToyModel::random(config.model);
  const std::vector<Index> layers = resolve_edit_layers(config);
  const std::uint64_t facts_seed = derive_seed(
      config.seed, {kFactsTag, static_cast<std::uint64_t>(batch_size),
                    static_cast<std::uint64_t>(batch_index)});
  return make_model_facts(model, layers.back(), batch_size, facts_seed,
                          config.fact_opts);
}

EditReport run_single_batch(const ExperimentConfig& config, Method method,
                            long batch_size, long batch_index) {
  validate_config(config);
  BatchContext ctx = make_context(config);
  return run_batch_in_context(ctx, config, method, batch_size, batch_index);
}

EditReport run_edit(const ExperimentConfig& config, Method method, long batch_size) {
  validate_config(config);
  BatchContext ctx = make_context(config);
  const long n = batches_for_size(config, batch_size);
  std::vector<EditReport> rows;
  rows.reserve(static_cast<std::size_t>(n));
  for (long b = 0; b < n; ++b) {
    rows.push_back(run_batch_in_context(ctx, config, method, batch_size, b));
  }
  return aggregate_rows(rows);
}

std::vector<EditReport> sweep_batch(const ExperimentConfig& config) {
  validate_config(config);
  BatchContext ctx = make_context(config);
  std::vector<EditReport> out;
  for (const Method method : config.methods) {
    std::vector<long> sizes;
    for (long size : config.batch_sizes) {
      if (method == Method::ROME && size != 1) {
        std::cerr << "note: skipping ROME at batch size " << size
                  << " (single-edit method)\n";
        continue;
      }
      if (method == Method::EMMET && config.alpha == 0.0 && size > config.model.d_k) {
        const long capped = config.model.d_k;
        std::cerr << "note: EMMET alpha=0 batch size " << size << " capped to d_k="
                  << capped << "\n";
        if (std::find(sizes.begin(), sizes.end(), capped) != sizes.end()) {
          std::cerr << "note: capped size " << capped << " already swept, skipping\n";
          continue;
        }
        size = capped;
      }
      sizes.push_back(size);
    }
    for (const long size : sizes) {
      const long n = batches_for_size(config, size);
      std::vector<EditReport> rows;
      for (long b = 0; b < n; ++b) {
        rows.push_back(run_batch_in_context(ctx, config, method, size, b));
      }
      out.insert(out.end(), rows.begin(), rows.end());
      out.push_back(aggregate_rows(rows));
    }
  }
  return out;
}

std::vector<EditReport> sweep_hparam(const ExperimentConfig& config) {
  validate_config(config);
  if (config.lambda_grid.empty()) throw ConfigError("lambda grid is empty");

  std::vector<double> alphas = config.alpha_grid;
  if (std::find(alphas.begin(), alphas.end(), 0.1) == alphas.end()) {
    alphas.push_back(0.1);  // reference setting is always swept
    std::sort(alphas.begin(), alphas.end());
  }

  std::vector<EditReport> out;
  double best_lambda = std::numeric_limits<double>::quiet_NaN();
  double best_lambda_score = -1.0;
  for (const double lambda : config.lambda_grid) {
    ExperimentConfig cell = config;
    cell.lambda = lambda;
    EditReport row = run_edit(cell, Method::MEMIT, config.hparam_batch_size);
    if (!std::isnan(row.score_s) && row.score_s > best_lambda_score) {
      best_lambda_score = row.score_s;
      best_lambda = lambda;
    }
    out.push_back(std::move(row));
  }

  double best_alpha = std::numeric_limits<double>::quiet_NaN();
  double best_alpha_score = -1.0;
  for (const double alpha : alphas) {
    ExperimentConfig cell = config;
    cell.alpha = alpha;
    EditReport row = run_edit(cell, Method::EMMET, config.hparam_batch_size);
    if (!std::isnan(row.score_s) && row.score_s > best_alpha_score) {
      best_alpha_score = row.score_s;
      best_alpha = alpha;
    }
    out.push_back(std::move(row));
  }

  // Observation row: score-argmax hyperparameters, recorded but not asserted.
  EditReport obs;
  obs.method = "observation";
  obs.batch_size = config.hparam_batch_size;
  obs.seed = config.seed;
  obs.lambda = best_lambda;
  obs.alpha = best_alpha;
  obs.es = obs.em = obs.ps = obs.pm = obs.ns = obs.nm =
      std::numeric_limits<double>::quiet_NaN();
  obs.memorization_residual = obs.preservation_drift = obs.condition_c0 =
      std::numeric_limits<double>::quiet_NaN();
  obs.layer_plan = layer_spec_string(resolve_edit_layers(config));
  out.push_back(std::move(obs));
  return out;
}

void write_report_csv(const std::filesystem::path& path,
                      const std::vector<EditReport>& rows) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out << "# pmedit edit-report schema v1\n";
  out << edit_report_csv_header() << '\n';
  for (const EditReport& r : rows) out << edit_report_csv_row(r) << '\n';
  if (!out) throw InputError("write failed for " + path.string());
}

std::vector<EditReport> read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::vector<EditReport> rows;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != edit_report_csv_header()) {
        throw InputError("unexpected CSV header in " + path.string());
      }
      header_seen = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    // A trailing empty cell is dropped by getline; batch_index is last and
    // never empty, so a short row is malformed.
    if (cells.size() != 19) {
      throw InputError("malformed CSV row in " + path.string() + ": " + line);
    }
    auto num = [](const std::string& s) {
      return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
    };
    EditReport r;
    r.method = cells[0];
    r.batch_size = std::stol(cells[1]);
    r.seed = std::stoull(cells[2]);
    r.lambda = num(cells[3]);
    r.alpha = num(cells[4]);
    r.es = num(cells[5]);
    r.em = num(cells[6]);
    r.ps = num(cells[7]);
    r.pm = num(cells[8]);
    r.ns = num(cells[9]);
    r.nm = num(cells[10]);
    r.ge = num(cells[11]);
    r.score_s = num(cells[12]);
    r.memorization_residual = num(cells[13]);
    r.preservation_drift = num(cells[14]);
    r.condition_c0 = num(cells[15]);
    r.condition_d = num(cells[16]);
    r.layer_plan = cells[17];
    r.batch_index = std::stol(cells[18]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace pmedit
