#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockflow/ot.hpp"
#include "blockflow/preprocess.hpp"
#include "blockflow/tensor.hpp"

namespace blockflow {

struct GeneEmbeddingTable {
  std::vector<std::string> gene_ids;
  std::size_t dim = 0;
  std::vector<double> values;  // genes x dim, row-major

  std::size_t n_genes() const { return gene_ids.size(); }
  const double* row(std::size_t i) const { return values.data() + i * dim; }
  // Unique ids, matching sizes, finite values.
  void validate() const;
};

// CSV: gene id column followed by `dim` value columns.
GeneEmbeddingTable read_embeddings_csv(const std::filesystem::path& path);
void write_embeddings_csv(const std::filesystem::path& path, const GeneEmbeddingTable& table);

inline constexpr std::int64_t kPaddingSlot = -1;

// Partition of G genes (plus padding slots) into L blocks of exactly K slots.
struct BlockLayout {
  std::size_t n_blocks = 0;                // L
  std::size_t block_size = 0;              // K
  std::vector<std::string> gene_ids;       // the G genes, indexed by slots
  std::vector<std::int64_t> slots;         // L*K gene indices, kPaddingSlot for padding
  DenseMatrix centroids;                   // L x E
  std::vector<double> objective_trace;     // best rounded partition cost per outer iteration

  std::size_t n_genes() const { return gene_ids.size(); }
  std::size_t n_slots() const { return n_blocks * block_size; }
  std::size_t padding() const { return n_slots() - n_genes(); }
  // 1 for slots holding a gene, 0 for padding; length L*K.
  std::vector<double> slot_mask() const;
  // Bijectivity, block sizes, and padding count.
  void validate() const;

  nlohmann::json to_json() const;
  static BlockLayout from_json(const nlohmann::json& j);
};

BlockLayout read_layout(const std::filesystem::path& path);
void write_layout(const std::filesystem::path& path, const BlockLayout& layout);

// L = ceil(G / K).
std::size_t block_count(std::size_t n_genes, std::size_t block_size);

// Squared Euclidean distances; rows past the table (padding) cost 0.
DenseMatrix cost_matrix(const GeneEmbeddingTable& emb, const DenseMatrix& centroids, std::size_t padded_rows);

// Greedy rounding of a soft plan: (row, block) pairs by descending mass, each
// row assigned once, a block closes at `block_size` members. Returns the block
// of every row.
std::vector<std::size_t> round_to_capacity(const TransportPlan& plan, std::size_t block_size);

// Mass-weighted means over real genes; a block with no real mass keeps its
// previous centroid.
DenseMatrix update_centroids(const TransportPlan& plan, const GeneEmbeddingTable& emb, const DenseMatrix& previous);

// Sum over blocks of squared distances from member genes to their block mean.
double partition_cost(const GeneEmbeddingTable& emb, const std::vector<std::size_t>& row_block, std::size_t n_blocks);

struct BlockBuildOptions {
  std::uint64_t seed = 0;
  std::size_t outer_iters = 50;
  double epsilon_scale = 0.05;  // epsilon = scale * mean(C)
  std::size_t sinkhorn_iters = 1000;
  double sinkhorn_tol = 1e-6;
  double centroid_tol = 1e-6;
};

BlockLayout build_blocks(const GeneEmbeddingTable& emb, std::size_t block_size, const BlockBuildOptions& options = {});

// N x G max-abs-scaled matrix -> [N, L, K] tensor; padding slots are 0.
Tensor reshape_to_blocks(const ExpressionMatrix& m, const BlockLayout& layout);
// Inverse scatter: [N, L, K] -> N x G in layout gene order.
ExpressionMatrix scatter_from_blocks(const Tensor& blocks, const BlockLayout& layout, std::vector<std::string> cell_ids,
                                     Stage stage = Stage::MaxAbsScaled);

// Restricts and reorders the matrix columns to `gene_ids`.
ExpressionMatrix select_genes(const ExpressionMatrix& m, const std::vector<std::string>& gene_ids);

}  // namespace blockflow
