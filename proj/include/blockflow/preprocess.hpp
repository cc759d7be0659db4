#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "blockflow/errors.hpp"

namespace blockflow {

enum class Stage { Raw, DepthNormalized, Logged, MaxAbsScaled };

const char* stage_name(Stage s);

// Cells x genes, row-major, nonnegative at every stage.
class ExpressionMatrix {
 public:
  ExpressionMatrix() = default;
  ExpressionMatrix(std::vector<std::string> cell_ids, std::vector<std::string> gene_ids, std::vector<double> values,
                   Stage stage = Stage::Raw);

  std::size_t n_cells() const { return cell_ids_.size(); }
  std::size_t n_genes() const { return gene_ids_.size(); }
  const std::vector<std::string>& cell_ids() const { return cell_ids_; }
  const std::vector<std::string>& gene_ids() const { return gene_ids_; }
  std::span<const double> values() const { return values_; }
  std::span<double> mutable_values() { return values_; }
  std::span<const double> row(std::size_t cell) const {
    return std::span<const double>(values_).subspan(cell * n_genes(), n_genes());
  }
  double at(std::size_t cell, std::size_t gene) const { return values_[cell * n_genes() + gene]; }

  Stage stage() const { return stage_; }
  const std::vector<double>& scale_factors() const { return scale_factors_; }

  // Subset of cells, preserving stage and scale factors.
  ExpressionMatrix select_cells(std::span<const std::size_t> rows) const;

 private:
  friend ExpressionMatrix normalize_depth(const ExpressionMatrix&, double);
  friend ExpressionMatrix log_transform(const ExpressionMatrix&);
  friend ExpressionMatrix maxabs_scale(const ExpressionMatrix&);
  friend ExpressionMatrix apply_maxabs(const ExpressionMatrix&, std::span<const double>);
  friend ExpressionMatrix unscale(const ExpressionMatrix&);
  friend ExpressionMatrix with_scale(ExpressionMatrix, std::vector<double>);

  std::vector<std::string> cell_ids_;
  std::vector<std::string> gene_ids_;
  std::vector<double> values_;
  Stage stage_ = Stage::Raw;
  std::vector<double> scale_factors_;
};

inline constexpr double kTargetDepth = 1e4;

// Scales each cell to `target` total counts. Rejects all-zero cells.
ExpressionMatrix normalize_depth(const ExpressionMatrix& m, double target = kTargetDepth);
// v <- ln(1 + v).
ExpressionMatrix log_transform(const ExpressionMatrix& m);
// Per-gene division by the column maximum; all-zero genes keep factor 1.
ExpressionMatrix maxabs_scale(const ExpressionMatrix& m);
// Scales a logged matrix with factors learned elsewhere (held-out cells).
// Values above a factor are clipped to 1.
ExpressionMatrix apply_maxabs(const ExpressionMatrix& m, std::span<const double> factors);
// Max-abs scaled -> depth-normalized (multiply by factors, then expm1).
ExpressionMatrix unscale(const ExpressionMatrix& m);
// Attaches factors to a max-abs-scaled matrix produced by a model decoder.
ExpressionMatrix with_scale(ExpressionMatrix m, std::vector<double> factors);

// raw -> depth-normalized -> logged -> max-abs scaled.
ExpressionMatrix preprocess(const ExpressionMatrix& raw);

}  // namespace blockflow
