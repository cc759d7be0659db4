#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockflow/conditioning.hpp"
#include "blockflow/gene_blocks.hpp"
#include "blockflow/preprocess.hpp"

namespace blockflow {

struct LevelSpec {
  std::string label;
  std::vector<std::size_t> genes;  // explicit signature; empty -> draw n_genes
  std::size_t n_genes = 0;
  double effect = 0.0;             // log-space shift of the signature genes
};

struct TypeSpec {
  std::string name;
  std::vector<LevelSpec> levels;
};

// Count model per cell c and gene g:
//   log m = base_g + sum of active signature shifts + size_c + noise_cg
//   counts ~ Poisson(scale * m)
// with base_g ~ N(base_mean, base_sd), size_c ~ N(0, size_sd),
// noise_cg ~ N(0, noise_sd). `scale` is solved by bisection so that either the
// expected zero fraction hits `sparsity` or the mean library size hits
// `mean_depth`.
struct SyntheticSpec {
  std::size_t n_cells = 2000;
  std::size_t n_genes = 200;
  std::vector<TypeSpec> types;
  double base_mean = 0.0;
  double base_sd = 1.0;
  double size_sd = 0.25;
  double noise_sd = 0.25;
  std::optional<double> sparsity;
  double mean_depth = 2000.0;
  bool random_sign = false;
  std::size_t embedding_dim = 16;
  std::size_t background_cluster = 20;  // genes per embedding cluster outside signatures

  void validate() const;
  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
  // 3 cell types x 2 batches, 20 signature genes per level, effect 1.5.
  static SyntheticSpec standard();
  // 3 cell types x {control, stim}; stim shifts 20 genes by `effect`.
  static SyntheticSpec perturbation(double effect = 1.5);
};

struct SyntheticData {
  ExpressionMatrix counts;
  ConditionSchema schema;
  ConditionTable conds;
  GeneEmbeddingTable embeddings;
  nlohmann::json ground_truth;
};

SyntheticData synthesize(const SyntheticSpec& spec, std::uint64_t seed);

struct SyntheticPaths {
  std::filesystem::path counts, conditions, embeddings, ground_truth;
};
SyntheticPaths synthetic_paths(const std::filesystem::path& dir);
void write_synthetic(const SyntheticData& data, const std::filesystem::path& dir);

}  // namespace blockflow
