// pmedit: closed-form model editing on a synthetic linear-associative-memory
// stack. Subcommands cover single experiments, batch-size and hyperparameter
// sweeps, the solver verification suite, and weight import/export.

#include <CLI11.hpp>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "pmedit/errors.hpp"
#include "pmedit/harness.hpp"
#include "pmedit/verify.hpp"
#include "pmedit/weights_io.hpp"

namespace {

namespace fs = std::filesystem;
using namespace pmedit;

constexpr int kExitOk = 0;
constexpr int kExitInvariant = 1;
constexpr int kExitConfig = 2;

struct CommonArgs {
  std::string config_path;
  std::string method;
  long batch_size = 0;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  double alpha = 0.0;
  std::string layers;
  std::string out;
  bool verify_after = false;

  CLI::Option* method_opt = nullptr;
  CLI::Option* batch_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* lambda_opt = nullptr;
  CLI::Option* alpha_opt = nullptr;
  CLI::Option* layers_opt = nullptr;
  CLI::Option* out_opt = nullptr;
};

void add_common_options(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON experiment config");
  args.method_opt = cmd->add_option("--method", args.method, "ROME, MEMIT or EMMET");
  args.batch_opt = cmd->add_option("--batch-size", args.batch_size, "edits per batch");
  args.seed_opt = cmd->add_option("--seed", args.seed, "master experiment seed");
  args.lambda_opt = cmd->add_option("--lambda", args.lambda, "MEMIT preservation weight");
  args.alpha_opt = cmd->add_option("--alpha", args.alpha, "EMMET D-regularizer");
  args.layers_opt = cmd->add_option("--layers", args.layers, "edit layers, e.g. 5 or 3-5");
  args.out_opt = cmd->add_option("--out", args.out, "report output directory");
  cmd->add_flag("--verify", args.verify_after, "run the verification suite afterwards");
}

ExperimentConfig build_config(const CommonArgs& args) {
  ExperimentConfig config;
  if (!args.config_path.empty()) config = load_config(args.config_path);
  if (args.method_opt->count() > 0) config.methods = {method_from_name(args.method)};
  if (args.batch_opt->count() > 0) config.batch_sizes = {args.batch_size};
  if (args.seed_opt->count() > 0) config.seed = args.seed;
  if (args.lambda_opt->count() > 0) config.lambda = args.lambda;
  if (args.alpha_opt->count() > 0) config.alpha = args.alpha;
  if (args.layers_opt->count() > 0) config.edit_layers = parse_layer_spec(args.layers);
  if (args.out_opt->count() > 0) config.out_dir = args.out;
  validate_config(config);
  return config;
}

int maybe_verify(const CommonArgs& args, const ExperimentConfig& config) {
  if (!args.verify_after) return kExitOk;
  VerifyConfig vc;
  vc.seed = config.seed;
  const VerifyReport report = run_verify(vc);
  std::cout << report.summary();
  return report.all_pass ? kExitOk : kExitInvariant;
}

int cmd_edit(const CommonArgs& args, const std::string& facts_out) {
  const ExperimentConfig config = build_config(args);
  std::vector<EditReport> rows;
  for (const Method method : config.methods) {
    for (const long size : config.batch_sizes) {
      auto it = config.num_batches.find(size);
      const long n = it == config.num_batches.end() ? 3 : it->second;
      for (long b = 0; b < n; ++b) {
        rows.push_back(run_single_batch(config, method, size, b));
      }
      EditReport agg = run_edit(config, method, size);
      std::cout << method_name(method) << " batch_size=" << size << " es=" << agg.es
                << " ps=" << agg.ps << " ns=" << agg.ns << " s=" << agg.score_s
                << " mem_residual=" << agg.memorization_residual
                << " drift=" << agg.preservation_drift << '\n';
      rows.push_back(std::move(agg));
    }
  }
  const fs::path out = fs::path(config.out_dir) / "edit.csv";
  write_report_csv(out, rows);
  std::cout << "wrote " << out.string() << '\n';
  if (!facts_out.empty()) {
    write_fact_set_jsonl(facts_out,
                         facts_for_batch(config, config.batch_sizes.front(), 0));
    std::cout << "wrote " << facts_out << '\n';
  }
  return maybe_verify(args, config);
}

int cmd_sweep_batch(const CommonArgs& args) {
  const ExperimentConfig config = build_config(args);
  const std::vector<EditReport> rows = sweep_batch(config);
  const fs::path out = fs::path(config.out_dir) / "sweep_batch.csv";
  write_report_csv(out, rows);
  std::cout << "wrote " << out.string() << " (" << rows.size() << " rows)\n";
  return maybe_verify(args, config);
}

int cmd_sweep_hparam(const CommonArgs& args) {
  const ExperimentConfig config = build_config(args);
  const std::vector<EditReport> rows = sweep_hparam(config);
  const fs::path out = fs::path(config.out_dir) / "sweep_hparam.csv";
  write_report_csv(out, rows);
  std::cout << "wrote " << out.string() << " (" << rows.size() << " rows)\n";
  return maybe_verify(args, config);
}

int cmd_verify(const CommonArgs& args, bool inject_fault) {
  ExperimentConfig config;
  if (!args.config_path.empty()) config = load_config(args.config_path);
  VerifyConfig vc;
  vc.seed = args.seed_opt->count() > 0 ? args.seed : config.seed;
  vc.inject_fault = inject_fault;
  const VerifyReport report = run_verify(vc);
  std::cout << report.summary();
  return report.all_pass ? kExitOk : kExitInvariant;
}

int cmd_export_weights(const CommonArgs& args, const std::string& file) {
  const ExperimentConfig config = build_config(args);
  const ToyModel model = ToyModel::random(config.model);
  write_snapshot(file, model.snapshot());
  std::cout << "wrote " << file << " hash=" << model.content_hash() << '\n';
  return kExitOk;
}

int cmd_import_weights(const CommonArgs& args, const std::string& file,
                       const std::string& reexport) {
  const ExperimentConfig config = build_config(args);
  ToyModel model = ToyModel::random(config.model);
  const Snapshot snap = read_snapshot(file);
  model.restore(snap);
  std::cout << "imported " << file << " hash=" << model.content_hash() << '\n';
  if (!reexport.empty()) {
    write_snapshot(reexport, model.snapshot());
    std::cout << "wrote " << reexport << '\n';
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"closed-form edits on a synthetic associative-memory model"};
  app.require_subcommand(1);

  CommonArgs edit_args;
  std::string facts_out;
  CLI::App* edit = app.add_subcommand("edit", "run one editing experiment");
  add_common_options(edit, edit_args);
  edit->add_option("--facts-out", facts_out, "dump the first batch's facts as JSONL");

  CommonArgs sweep_batch_args;
  CLI::App* sweep_b = app.add_subcommand("sweep-batch", "batch-size sweep");
  add_common_options(sweep_b, sweep_batch_args);

  CommonArgs sweep_hparam_args;
  CLI::App* sweep_h = app.add_subcommand("sweep-hparam", "lambda / alpha grid sweep");
  add_common_options(sweep_h, sweep_hparam_args);

  CommonArgs verify_args;
  bool inject_fault = false;
  CLI::App* verify = app.add_subcommand("verify", "solver verification suite");
  add_common_options(verify, verify_args);
  verify->add_flag("--inject-fault", inject_fault,
                   "perturb one delta to prove the suite catches faults");

  CommonArgs export_args;
  std::string export_file;
  CLI::App* exportw = app.add_subcommand("export-weights", "write model weights (PMED format)");
  add_common_options(exportw, export_args);
  exportw->add_option("--file", export_file, "output weight file")->required();

  CommonArgs import_args;
  std::string import_file;
  std::string reexport_file;
  CLI::App* importw = app.add_subcommand("import-weights", "load model weights (PMED format)");
  add_common_options(importw, import_args);
  importw->add_option("--file", import_file, "input weight file")->required();
  importw->add_option("--reexport", reexport_file, "write the imported weights back out");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (edit->parsed()) return cmd_edit(edit_args, facts_out);
    if (sweep_b->parsed()) return cmd_sweep_batch(sweep_batch_args);
    if (sweep_h->parsed()) return cmd_sweep_hparam(sweep_hparam_args);
    if (verify->parsed()) return cmd_verify(verify_args, inject_fault);
    if (exportw->parsed()) return cmd_export_weights(export_args, export_file);
    if (importw->parsed()) return cmd_import_weights(import_args, import_file, reexport_file);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvariant;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitInvariant;
  }
  return kExitConfig;
}
