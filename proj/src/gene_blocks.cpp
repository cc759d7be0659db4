#include "blockflow/gene_blocks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "blockflow/io.hpp"
#include "blockflow/rng.hpp"

namespace blockflow {

using nlohmann::json;

void GeneEmbeddingTable::validate() const {
  if (gene_ids.empty() || dim == 0) throw ValidationError("embedding table is empty");
  if (values.size() != gene_ids.size() * dim) throw ValidationError("embedding table: size mismatch");
  std::set<std::string> seen(gene_ids.begin(), gene_ids.end());
  if (seen.size() != gene_ids.size()) throw ValidationError("embedding table: duplicate gene ids");
  for (double v : values) {
    if (!std::isfinite(v)) throw ValidationError("embedding table: non-finite value");
  }
}

GeneEmbeddingTable read_embeddings_csv(const std::filesystem::path& path) {
  CsvTable t = read_csv(path);
  if (t.header.size() < 2) throw ValidationError(path.string() + ": need a gene id column and embedding columns");
  GeneEmbeddingTable out;
  out.dim = t.header.size() - 1;
  for (const auto& row : t.rows) {
    out.gene_ids.push_back(row[0]);
    for (std::size_t j = 1; j < row.size(); ++j) {
      double v = 0.0;
      auto [p, ec] = std::from_chars(row[j].data(), row[j].data() + row[j].size(), v);
      if (ec != std::errc() || p != row[j].data() + row[j].size()) {
        throw ValidationError(path.string() + ": not a number: '" + row[j] + "'");
      }
      out.values.push_back(v);
    }
  }
  out.validate();
  return out;
}

void write_embeddings_csv(const std::filesystem::path& path, const GeneEmbeddingTable& table) {
  std::string out = "gene_id";
  for (std::size_t d = 0; d < table.dim; ++d) out += ",e" + std::to_string(d);
  out += '\n';
  for (std::size_t i = 0; i < table.n_genes(); ++i) {
    out += table.gene_ids[i];
    for (std::size_t d = 0; d < table.dim; ++d) out += "," + format_double(table.row(i)[d]);
    out += '\n';
  }
  write_file_atomic(path, out);
}

std::vector<double> BlockLayout::slot_mask() const {
  std::vector<double> mask(slots.size());
  for (std::size_t s = 0; s < slots.size(); ++s) mask[s] = slots[s] == kPaddingSlot ? 0.0 : 1.0;
  return mask;
}

void BlockLayout::validate() const {
  if (n_blocks == 0 || block_size == 0) throw ValidationError("layout: L and K must be positive");
  if (slots.size() != n_slots()) throw ValidationError("layout: slot count != L*K");
  if (n_genes() > n_slots()) throw ValidationError("layout: more genes than slots");
  std::vector<char> seen(n_genes(), 0);
  std::size_t pad = 0;
  for (std::int64_t s : slots) {
    if (s == kPaddingSlot) {
      ++pad;
      continue;
    }
    if (s < 0 || static_cast<std::size_t>(s) >= n_genes() || seen[static_cast<std::size_t>(s)]) {
      throw ValidationError("layout: slot assignment is not a bijection onto the genes");
    }
    seen[static_cast<std::size_t>(s)] = 1;
  }
  if (pad != padding()) throw ValidationError("layout: padding count mismatch");
}

json BlockLayout::to_json() const {
  json j;
  j["L"] = n_blocks;
  j["K"] = block_size;
  j["gene_ids"] = gene_ids;
  j["slots"] = slots;
  j["padding"] = padding();
  j["objective_trace"] = objective_trace;
  json c = json::array();
  for (std::size_t r = 0; r < centroids.rows; ++r) {
    c.push_back(std::vector<double>(centroids.data.begin() + static_cast<std::ptrdiff_t>(r * centroids.cols),
                                    centroids.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * centroids.cols)));
  }
  j["centroids"] = c;
  return j;
}

BlockLayout BlockLayout::from_json(const json& j) {
  BlockLayout l;
  try {
    l.n_blocks = j.at("L").get<std::size_t>();
    l.block_size = j.at("K").get<std::size_t>();
    l.gene_ids = j.at("gene_ids").get<std::vector<std::string>>();
    l.slots = j.at("slots").get<std::vector<std::int64_t>>();
    if (j.contains("objective_trace")) l.objective_trace = j["objective_trace"].get<std::vector<double>>();
    if (j.contains("centroids") && !j["centroids"].empty()) {
      auto rows = j["centroids"].get<std::vector<std::vector<double>>>();
      l.centroids = DenseMatrix(rows.size(), rows[0].size());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        std::copy(rows[r].begin(), rows[r].end(), l.centroids.data.begin() + static_cast<std::ptrdiff_t>(r * l.centroids.cols));
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("layout json: ") + e.what());
  }
  l.validate();
  return l;
}

BlockLayout read_layout(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return BlockLayout::from_json(j);
}

void write_layout(const std::filesystem::path& path, const BlockLayout& layout) {
  write_file_atomic(path, layout.to_json().dump(1) + "\n");
}

std::size_t block_count(std::size_t n_genes, std::size_t block_size) {
  if (block_size == 0) throw ValidationError("block size must be >= 1");
  return (n_genes + block_size - 1) / block_size;
}

DenseMatrix cost_matrix(const GeneEmbeddingTable& emb, const DenseMatrix& centroids, std::size_t padded_rows) {
  if (centroids.cols != emb.dim) {
    throw DimensionError("cost_matrix: embedding dim " + std::to_string(emb.dim) + " vs centroid dim " +
                         std::to_string(centroids.cols));
  }
  if (padded_rows < emb.n_genes()) throw DimensionError("cost_matrix: padded rows fewer than genes");
  DenseMatrix c(padded_rows, centroids.rows, 0.0);
  for (std::size_t i = 0; i < emb.n_genes(); ++i) {
    const double* g = emb.row(i);
    for (std::size_t j = 0; j < centroids.rows; ++j) {
      const double* cj = centroids.data.data() + j * centroids.cols;
      double s = 0.0;
      for (std::size_t d = 0; d < emb.dim; ++d) s += (g[d] - cj[d]) * (g[d] - cj[d]);
      c(i, j) = s;
    }
  }
  return c;
}

std::vector<std::size_t> round_to_capacity(const TransportPlan& plan, std::size_t block_size) {
  const std::size_t n = plan.plan.rows, m = plan.plan.cols;
  if (n > m * block_size) throw ValidationError("round_to_capacity: rows exceed total capacity");
  std::vector<std::size_t> order(n * m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return plan.plan.data[x] > plan.plan.data[y]; });
  std::vector<std::size_t> block(n, std::numeric_limits<std::size_t>::max());
  std::vector<std::size_t> fill(m, 0);
  std::size_t assigned = 0;
  for (std::size_t flat : order) {
    std::size_t i = flat / m, j = flat % m;
    if (block[i] != std::numeric_limits<std::size_t>::max() || fill[j] == block_size) continue;
    block[i] = j;
    ++fill[j];
    if (++assigned == n) break;
  }
  return block;
}

DenseMatrix update_centroids(const TransportPlan& plan, const GeneEmbeddingTable& emb, const DenseMatrix& previous) {
  const std::size_t m = plan.plan.cols;
  if (previous.rows != m || previous.cols != emb.dim) throw DimensionError("update_centroids: centroid shape mismatch");
  DenseMatrix out(m, emb.dim, 0.0);
  std::vector<double> mass(m, 0.0);
  for (std::size_t i = 0; i < emb.n_genes(); ++i) {
    const double* g = emb.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      double t = plan.plan(i, j);
      mass[j] += t;
      double* c = out.data.data() + j * emb.dim;
      for (std::size_t d = 0; d < emb.dim; ++d) c[d] += t * g[d];
    }
  }
  for (std::size_t j = 0; j < m; ++j) {
    double* c = out.data.data() + j * emb.dim;
    if (mass[j] > 0.0) {
      for (std::size_t d = 0; d < emb.dim; ++d) c[d] /= mass[j];
    } else {
      std::copy_n(previous.data.data() + j * emb.dim, emb.dim, c);
    }
  }
  return out;
}

namespace {

DenseMatrix block_means(const GeneEmbeddingTable& emb, const std::vector<std::size_t>& row_block, std::size_t n_blocks,
                        std::vector<std::size_t>* counts = nullptr) {
  DenseMatrix means(n_blocks, emb.dim, 0.0);
  std::vector<std::size_t> cnt(n_blocks, 0);
  for (std::size_t i = 0; i < emb.n_genes(); ++i) {
    std::size_t b = row_block[i];
    ++cnt[b];
    for (std::size_t d = 0; d < emb.dim; ++d) means(b, d) += emb.row(i)[d];
  }
  for (std::size_t b = 0; b < n_blocks; ++b) {
    if (cnt[b] == 0) continue;
    for (std::size_t d = 0; d < emb.dim; ++d) means(b, d) /= static_cast<double>(cnt[b]);
  }
  if (counts) *counts = std::move(cnt);
  return means;
}

std::vector<std::int64_t> slots_from_rows(const std::vector<std::size_t>& row_block, std::size_t n_genes,
                                          std::size_t n_blocks, std::size_t block_size) {
  std::vector<std::vector<std::int64_t>> members(n_blocks);
  for (std::size_t i = 0; i < row_block.size(); ++i) {
    members[row_block[i]].push_back(i < n_genes ? static_cast<std::int64_t>(i) : kPaddingSlot);
  }
  std::vector<std::int64_t> slots;
  slots.reserve(n_blocks * block_size);
  for (auto& mem : members) {
    // real genes first in ascending order, padding last
    std::stable_partition(mem.begin(), mem.end(), [](std::int64_t s) { return s != kPaddingSlot; });
    slots.insert(slots.end(), mem.begin(), mem.end());
  }
  return slots;
}

DenseMatrix farthest_point_init(const GeneEmbeddingTable& emb, std::size_t n_blocks, Rng& rng) {
  const std::size_t n = emb.n_genes();
  DenseMatrix c(n_blocks, emb.dim);
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.index(n);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    std::copy_n(emb.row(pick), emb.dim, c.data.data() + b * emb.dim);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t d = 0; d < emb.dim; ++d) {
        double diff = emb.row(i)[d] - emb.row(pick)[d];
        s += diff * diff;
      }
      dist[i] = std::min(dist[i], s);
    }
    pick = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
  }
  return c;
}

}  // namespace

double partition_cost(const GeneEmbeddingTable& emb, const std::vector<std::size_t>& row_block, std::size_t n_blocks) {
  DenseMatrix means = block_means(emb, row_block, n_blocks);
  double s = 0.0;
  for (std::size_t i = 0; i < emb.n_genes(); ++i) {
    std::size_t b = row_block[i];
    for (std::size_t d = 0; d < emb.dim; ++d) {
      double diff = emb.row(i)[d] - means(b, d);
      s += diff * diff;
    }
  }
  return s;
}

BlockLayout build_blocks(const GeneEmbeddingTable& emb, std::size_t block_size, const BlockBuildOptions& options) {
  emb.validate();
  const std::size_t n_genes = emb.n_genes();
  const std::size_t n_blocks = block_count(n_genes, block_size);
  const std::size_t padded = n_blocks * block_size;

  BlockLayout layout;
  layout.n_blocks = n_blocks;
  layout.block_size = block_size;
  layout.gene_ids = emb.gene_ids;

  if (n_blocks == 1 || block_size == 1) {
    // Every balanced partition is the same (one block) or equally costless (singletons).
    std::vector<std::size_t> row_block(padded);
    for (std::size_t i = 0; i < padded; ++i) row_block[i] = n_blocks == 1 ? 0 : i;
    layout.slots = slots_from_rows(row_block, n_genes, n_blocks, block_size);
    layout.centroids = block_means(emb, row_block, n_blocks);
    layout.objective_trace = {partition_cost(emb, row_block, n_blocks)};
    layout.validate();
    return layout;
  }

  Rng rng(options.seed);
  DenseMatrix centroids = farthest_point_init(emb, n_blocks, rng);
  std::vector<double> a(padded, 1.0 / static_cast<double>(padded));
  std::vector<double> b(n_blocks, 1.0 / static_cast<double>(n_blocks));

  std::vector<std::size_t> best_rows;
  double best_cost = std::numeric_limits<double>::infinity();
  for (std::size_t it = 0; it < std::max<std::size_t>(options.outer_iters, 1); ++it) {
    DenseMatrix cost = cost_matrix(emb, centroids, padded);
    double mean_cost = std::accumulate(cost.data.begin(), cost.data.end(), 0.0) / static_cast<double>(cost.data.size());
    SinkhornOptions so;
    so.epsilon = mean_cost > 0.0 ? options.epsilon_scale * mean_cost : 1.0;
    so.max_iters = options.sinkhorn_iters;
    so.tol = options.sinkhorn_tol;
    TransportPlan plan = sinkhorn_balanced(cost, a, b, so);

    std::vector<std::size_t> rows = round_to_capacity(plan, block_size);
    double c = partition_cost(emb, rows, n_blocks);
    if (c < best_cost) {
      best_cost = c;
      best_rows = std::move(rows);
    }
    layout.objective_trace.push_back(best_cost);

    DenseMatrix next = update_centroids(plan, emb, centroids);
    double shift = 0.0;
    for (std::size_t k = 0; k < next.data.size(); ++k) shift = std::max(shift, std::abs(next.data[k] - centroids.data[k]));
    centroids = std::move(next);
    if (shift < options.centroid_tol) break;
  }

  layout.slots = slots_from_rows(best_rows, n_genes, n_blocks, block_size);
  layout.centroids = block_means(emb, best_rows, n_blocks);
  layout.validate();
  return layout;
}

ExpressionMatrix select_genes(const ExpressionMatrix& m, const std::vector<std::string>& gene_ids) {
  std::map<std::string, std::size_t> col;
  for (std::size_t j = 0; j < m.n_genes(); ++j) col[m.gene_ids()[j]] = j;
  std::vector<std::size_t> src;
  src.reserve(gene_ids.size());
  for (const auto& g : gene_ids) {
    auto it = col.find(g);
    if (it == col.end()) throw ValidationError("gene '" + g + "' not present in expression matrix");
    src.push_back(it->second);
  }
  std::vector<double> values(m.n_cells() * gene_ids.size());
  for (std::size_t c = 0; c < m.n_cells(); ++c) {
    for (std::size_t j = 0; j < src.size(); ++j) values[c * src.size() + j] = m.at(c, src[j]);
  }
  ExpressionMatrix out(m.cell_ids(), gene_ids, std::move(values), m.stage());
  if (m.stage() == Stage::MaxAbsScaled && m.scale_factors().size() == m.n_genes()) {
    std::vector<double> f;
    for (std::size_t j : src) f.push_back(m.scale_factors()[j]);
    out = with_scale(std::move(out), std::move(f));
  }
  return out;
}

Tensor reshape_to_blocks(const ExpressionMatrix& m, const BlockLayout& layout) {
  std::map<std::string, std::size_t> col;
  for (std::size_t j = 0; j < m.n_genes(); ++j) col[m.gene_ids()[j]] = j;
  std::vector<std::int64_t> src(layout.slots.size(), -1);
  for (std::size_t s = 0; s < layout.slots.size(); ++s) {
    if (layout.slots[s] == kPaddingSlot) continue;
    const std::string& g = layout.gene_ids[static_cast<std::size_t>(layout.slots[s])];
    auto it = col.find(g);
    if (it == col.end()) throw ValidationError("reshape_to_blocks: layout gene '" + g + "' not in matrix");
    src[s] = static_cast<std::int64_t>(it->second);
  }
  const std::size_t n = m.n_cells(), slots = layout.n_slots();
  std::vector<double> out(n * slots, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t s = 0; s < slots; ++s) {
      if (src[s] >= 0) out[c * slots + s] = m.at(c, static_cast<std::size_t>(src[s]));
    }
  }
  return Tensor::from({n, layout.n_blocks, layout.block_size}, std::move(out));
}

ExpressionMatrix scatter_from_blocks(const Tensor& blocks, const BlockLayout& layout, std::vector<std::string> cell_ids,
                                     Stage stage) {
  const Shape& s = blocks.shape();
  if (s.size() != 3 || s[1] != layout.n_blocks || s[2] != layout.block_size || s[0] != cell_ids.size()) {
    throw DimensionError("scatter_from_blocks: tensor " + shape_str(s) + " does not match layout and cell count");
  }
  const std::size_t n = s[0], slots = layout.n_slots(), g = layout.n_genes();
  auto v = blocks.values();
  std::vector<double> out(n * g, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t k = 0; k < slots; ++k) {
      std::int64_t gi = layout.slots[k];
      if (gi != kPaddingSlot) out[c * g + static_cast<std::size_t>(gi)] = v[c * slots + k];
    }
  }
  return ExpressionMatrix(std::move(cell_ids), layout.gene_ids, std::move(out), stage);
}

}  // namespace blockflow
