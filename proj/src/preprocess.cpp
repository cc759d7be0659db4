#include "blockflow/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace blockflow {

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Raw: return "raw";
    case Stage::DepthNormalized: return "depth-normalized";
    case Stage::Logged: return "logged";
    case Stage::MaxAbsScaled: return "maxabs-scaled";
  }
  return "?";
}

namespace {

void expect_stage(const ExpressionMatrix& m, Stage want, const char* op) {
  if (m.stage() != want) {
    throw PipelineOrderError(std::string(op) + " expects stage " + stage_name(want) + ", matrix is " +
                             stage_name(m.stage()));
  }
}

}  // namespace

ExpressionMatrix::ExpressionMatrix(std::vector<std::string> cell_ids, std::vector<std::string> gene_ids,
                                   std::vector<double> values, Stage stage)
    : cell_ids_(std::move(cell_ids)), gene_ids_(std::move(gene_ids)), values_(std::move(values)), stage_(stage) {
  if (values_.size() != cell_ids_.size() * gene_ids_.size()) {
    throw ValidationError("expression matrix: " + std::to_string(values_.size()) + " values for " +
                          std::to_string(cell_ids_.size()) + " cells x " + std::to_string(gene_ids_.size()) +
                          " genes");
  }
  std::set<std::string> seen(gene_ids_.begin(), gene_ids_.end());
  if (seen.size() != gene_ids_.size()) throw ValidationError("expression matrix: duplicate gene ids");
  for (double v : values_) {
    if (!std::isfinite(v) || v < 0.0) throw ValidationError("expression matrix: values must be finite and nonnegative");
  }
}

ExpressionMatrix ExpressionMatrix::select_cells(std::span<const std::size_t> rows) const {
  ExpressionMatrix out;
  out.gene_ids_ = gene_ids_;
  out.stage_ = stage_;
  out.scale_factors_ = scale_factors_;
  std::size_t g = n_genes();
  out.values_.reserve(rows.size() * g);
  for (std::size_t r : rows) {
    if (r >= n_cells()) throw ValidationError("select_cells: row out of range");
    out.cell_ids_.push_back(cell_ids_[r]);
    auto src = row(r);
    out.values_.insert(out.values_.end(), src.begin(), src.end());
  }
  return out;
}

ExpressionMatrix normalize_depth(const ExpressionMatrix& m, double target) {
  expect_stage(m, Stage::Raw, "normalize_depth");
  ExpressionMatrix out = m;
  std::size_t g = m.n_genes();
  for (std::size_t c = 0; c < m.n_cells(); ++c) {
    double total = 0.0;
    for (std::size_t j = 0; j < g; ++j) total += m.at(c, j);
    if (!(total > 0.0)) throw ValidationError("normalize_depth: cell '" + m.cell_ids()[c] + "' has zero total count");
    double f = target / total;
    for (std::size_t j = 0; j < g; ++j) out.values_[c * g + j] *= f;
  }
  out.stage_ = Stage::DepthNormalized;
  return out;
}

ExpressionMatrix log_transform(const ExpressionMatrix& m) {
  expect_stage(m, Stage::DepthNormalized, "log_transform");
  ExpressionMatrix out = m;
  for (double& v : out.values_) v = std::log1p(v);
  out.stage_ = Stage::Logged;
  return out;
}

ExpressionMatrix maxabs_scale(const ExpressionMatrix& m) {
  expect_stage(m, Stage::Logged, "maxabs_scale");
  std::size_t g = m.n_genes();
  std::vector<double> factors(g, 0.0);
  for (std::size_t c = 0; c < m.n_cells(); ++c) {
    for (std::size_t j = 0; j < g; ++j) factors[j] = std::max(factors[j], std::abs(m.at(c, j)));
  }
  for (double& f : factors) {
    if (f == 0.0) f = 1.0;
  }
  ExpressionMatrix out = m;
  for (std::size_t c = 0; c < m.n_cells(); ++c) {
    for (std::size_t j = 0; j < g; ++j) out.values_[c * g + j] /= factors[j];
  }
  out.stage_ = Stage::MaxAbsScaled;
  out.scale_factors_ = std::move(factors);
  return out;
}

ExpressionMatrix apply_maxabs(const ExpressionMatrix& m, std::span<const double> factors) {
  expect_stage(m, Stage::Logged, "apply_maxabs");
  std::size_t g = m.n_genes();
  if (factors.size() != g) throw ValidationError("apply_maxabs: factor count does not match gene count");
  for (double f : factors) {
    if (!(f > 0.0) || !std::isfinite(f)) throw ValidationError("apply_maxabs: factors must be positive");
  }
  ExpressionMatrix out = m;
  for (std::size_t c = 0; c < m.n_cells(); ++c) {
    for (std::size_t j = 0; j < g; ++j) {
      double& v = out.values_[c * g + j];
      v = std::min(1.0, v / factors[j]);
    }
  }
  out.stage_ = Stage::MaxAbsScaled;
  out.scale_factors_.assign(factors.begin(), factors.end());
  return out;
}

ExpressionMatrix unscale(const ExpressionMatrix& m) {
  expect_stage(m, Stage::MaxAbsScaled, "unscale");
  std::size_t g = m.n_genes();
  if (m.scale_factors().size() != g) throw ValidationError("unscale: matrix carries no max-abs factors");
  ExpressionMatrix out = m;
  for (std::size_t c = 0; c < m.n_cells(); ++c) {
    for (std::size_t j = 0; j < g; ++j) {
      double& v = out.values_[c * g + j];
      v = std::max(0.0, std::expm1(v * m.scale_factors_[j]));
    }
  }
  out.stage_ = Stage::DepthNormalized;
  out.scale_factors_.clear();
  return out;
}

ExpressionMatrix with_scale(ExpressionMatrix m, std::vector<double> factors) {
  if (factors.size() != m.n_genes()) throw ValidationError("with_scale: factor count does not match gene count");
  for (double v : m.values_) {
    if (v < 0.0 || v > 1.0) throw ValidationError("with_scale: values must lie in [0,1]");
  }
  m.stage_ = Stage::MaxAbsScaled;
  m.scale_factors_ = std::move(factors);
  return m;
}

ExpressionMatrix preprocess(const ExpressionMatrix& raw) { return maxabs_scale(log_transform(normalize_depth(raw))); }

}  // namespace blockflow
