#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockflow/flow.hpp"
#include "blockflow/gene_blocks.hpp"
#include "blockflow/metrics.hpp"
#include "blockflow/synth.hpp"
#include "blockflow/vae.hpp"

namespace blockflow {

inline constexpr int kConfigSchemaVersion = 1;

// Condition filter: type name -> label. A row matches when every entry does.
using ConditionFilter = std::map<std::string, std::string>;

struct PathConfig {
  // Empty paths fall back to a fixed file name inside `out`.
  std::filesystem::path counts, conditions, embeddings, layout, vae_checkpoint, flow_checkpoint;
  std::filesystem::path generated, generated_conditions, transferred, transferred_conditions, metrics;
  std::filesystem::path eval_real, eval_real_conditions, eval_generated, eval_generated_conditions;
};

struct GenerateOptions {
  // Conditions to generate for; empty -> the training condition file (one
  // generated cell per real cell).
  std::filesystem::path conditions;
};

struct TransferOptions {
  ConditionFilter where;  // source cells
  ConditionFilter set;    // labels substituted for the decode
};

enum class EvalSpace { MaxAbs, Latent };
enum class MatrixStage { Raw, Normalized, MaxAbs };

struct EvaluateOptions {
  std::vector<std::string> condition_columns;  // empty -> every condition type
  EvalSpace space = EvalSpace::MaxAbs;
  MatrixStage real_stage = MatrixStage::Raw;
  MatrixStage generated_stage = MatrixStage::Normalized;
  std::size_t max_exact = kMaxExactAssignment;
};

struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";
  bool verbose = false;
  PathConfig paths;
  SyntheticSpec synth = SyntheticSpec::standard();
  std::size_t block_size = 32;
  BlockBuildOptions blocks;
  VaeConfig vae;  // n_blocks / block_size are taken from the layout
  TrainOptions vae_train;
  std::vector<ConditionFilter> holdout;  // cells excluded from VAE and flow training
  FlowConfig flow;  // tokens / token_dim are taken from the VAE
  FlowTrainOptions flow_train;
  GenerateOptions generate;
  TransferOptions transfer;
  EvaluateOptions evaluate;

  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown top-level keys are rejected.
  static RunConfig from_json(const nlohmann::json& j);

  std::filesystem::path counts_path() const;
  std::filesystem::path conditions_path() const;
  std::filesystem::path embeddings_path() const;
  std::filesystem::path ground_truth_path() const;
  std::filesystem::path layout_path() const;
  std::filesystem::path vae_path() const;
  std::filesystem::path vae_loss_path() const;
  std::filesystem::path flow_path() const;
  std::filesystem::path flow_loss_path() const;
  std::filesystem::path generated_path() const;
  std::filesystem::path generated_conditions_path() const;
  std::filesystem::path transferred_path() const;
  std::filesystem::path transferred_conditions_path() const;
  std::filesystem::path metrics_path() const;
};

// Reads a JSON config file (with schema_version check).
RunConfig load_config(const std::filesystem::path& path);

using Logger = std::function<void(const std::string&)>;

// Named substreams of the root seed.
Rng stage_rng(const RunConfig& cfg, const char* stage);

// Depth-normalize, log, max-abs scale, then restrict to the layout genes.
ExpressionMatrix prepare_expression(const ExpressionMatrix& raw, const BlockLayout& layout,
                                    const std::vector<double>* scale_factors = nullptr);

bool matches(const ConditionTable& table, std::size_t row, const ConditionSchema& schema, const ConditionFilter& filter);

void run_synth(const RunConfig& cfg, const Logger& log = {});
BlockLayout run_build_blocks(const RunConfig& cfg, const Logger& log = {});
void run_train_vae(const RunConfig& cfg, const Logger& log = {});
void run_train_fm(const RunConfig& cfg, const Logger& log = {});
void run_generate(const RunConfig& cfg, const Logger& log = {});
void run_transfer(const RunConfig& cfg, const Logger& log = {});
void run_evaluate(const RunConfig& cfg, const Logger& log = {});

struct MetricsRow {
  std::vector<std::string> labels;
  std::size_t n_real = 0;
  std::size_t n_gen = 0;
  Wasserstein wd;
  double mmd = 0.0;
  GeneMeanStats stats;
};
// One row per distinct label combination of the real cells, over `columns`.
std::vector<MetricsRow> evaluate_by_condition(const DenseMatrix& real, const std::vector<std::string>& real_keys,
                                              const DenseMatrix& gen, const std::vector<std::string>& gen_keys,
                                              std::size_t max_exact, std::uint64_t seed);
std::string metrics_csv(const std::vector<std::string>& columns, const std::vector<MetricsRow>& rows);

}  // namespace blockflow
