// blockflow command-line front end. Exit codes: 0 ok, 1 validation error,
// 2 numerical failure.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "blockflow/io.hpp"
#include "blockflow/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace blockflow;

namespace {

blockflow::ConditionFilter parse_pairs(const std::vector<std::string>& items, const char* flag) {
  ConditionFilter f;
  for (const auto& s : items) {
    auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ValidationError(std::string(flag) + " expects TYPE=LABEL, got '" + s + "'");
    }
    f[s.substr(0, eq)] = s.substr(eq + 1);
  }
  return f;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gene-block latent flow matching for single-cell expression"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "Root seed (overrides the config)");
  app.add_option("--out", out_dir, "Output directory (overrides the config)");
  app.add_flag("--verbose,-v", verbose, "Log progress to stderr");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with known signatures");
  auto* blocks = app.add_subcommand("build-blocks", "Partition genes into equal-size blocks");
  std::optional<std::size_t> block_size;
  blocks->add_option("--block-size", block_size, "Genes per block (K)");
  auto* train_vae_cmd = app.add_subcommand("train-vae", "Train the block VAE");
  auto* train_fm_cmd = app.add_subcommand("train-fm", "Train the latent flow network");
  std::optional<std::size_t> vae_epochs, fm_epochs;
  train_vae_cmd->add_option("--epochs", vae_epochs, "Training epochs");
  train_fm_cmd->add_option("--epochs", fm_epochs, "Training epochs");
  auto* gen = app.add_subcommand("generate", "Sample cells for a condition file");
  std::string gen_conditions;
  gen->add_option("--conditions", gen_conditions, "Condition CSV to generate for");
  auto* tr = app.add_subcommand("transfer", "Re-decode cells under substituted conditions");
  std::vector<std::string> where, set;
  tr->add_option("--where", where, "Source filter TYPE=LABEL (repeatable)");
  tr->add_option("--set", set, "Target label TYPE=LABEL (repeatable)");
  auto* ev = app.add_subcommand("evaluate", "Per-condition WD / MMD / gene-mean metrics");
  std::string real, real_cond, generated, generated_cond, space, metrics;
  std::vector<std::string> columns;
  ev->add_option("--real", real, "Real expression matrix");
  ev->add_option("--real-conditions", real_cond, "Real condition CSV");
  ev->add_option("--generated", generated, "Generated expression matrix");
  ev->add_option("--generated-conditions", generated_cond, "Generated condition CSV");
  ev->add_option("--space", space, "maxabs or latent")->check(CLI::IsMember({"maxabs", "latent"}));
  ev->add_option("--columns", columns, "Condition columns to group by");
  ev->add_option("--metrics", metrics, "Output CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    json j = json::object();
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) throw ValidationError("config file not found: " + config_path);
      try {
        j = json::parse(read_file(config_path));
      } catch (const json::parse_error& e) {
        throw ValidationError(config_path + ": " + e.what());
      }
      if (!j.is_object() || !j.contains("schema_version")) throw ValidationError(config_path + ": missing schema_version");
    }
    // flag > file > default
    if (seed) j["seed"] = *seed;
    if (!out_dir.empty()) j["out"] = out_dir;
    if (verbose) j["verbose"] = true;
    if (block_size) j["blocks"]["block_size"] = *block_size;
    if (vae_epochs) j["vae_train"]["epochs"] = *vae_epochs;
    if (fm_epochs) j["flow_train"]["epochs"] = *fm_epochs;
    if (!gen_conditions.empty()) j["generate"]["conditions"] = gen_conditions;
    if (!where.empty()) j["transfer"]["where"] = parse_pairs(where, "--where");
    if (!set.empty()) j["transfer"]["set"] = parse_pairs(set, "--set");
    if (!real.empty()) j["paths"]["eval_real"] = real;
    if (!real_cond.empty()) j["paths"]["eval_real_conditions"] = real_cond;
    if (!generated.empty()) j["paths"]["eval_generated"] = generated;
    if (!generated_cond.empty()) j["paths"]["eval_generated_conditions"] = generated_cond;
    if (!space.empty()) j["evaluate"]["space"] = space;
    if (!columns.empty()) j["evaluate"]["condition_columns"] = columns;
    if (!metrics.empty()) j["paths"]["metrics"] = metrics;

    RunConfig cfg = RunConfig::from_json(j);
    Logger log;
    if (cfg.verbose) log = [](const std::string& m) { std::cerr << m << '\n'; };

    if (*synth) run_synth(cfg, log);
    else if (*blocks) run_build_blocks(cfg, log);
    else if (*train_vae_cmd) run_train_vae(cfg, log);
    else if (*train_fm_cmd) run_train_fm(cfg, log);
    else if (*gen) run_generate(cfg, log);
    else if (*tr) run_transfer(cfg, log);
    else if (*ev) run_evaluate(cfg, log);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
