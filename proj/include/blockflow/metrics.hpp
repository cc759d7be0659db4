#pragma once

#include <cstdint>
#include <string>

#include "blockflow/ot.hpp"
#include "blockflow/preprocess.hpp"

namespace blockflow {

// Points are matrix rows.
DenseMatrix points_of(const ExpressionMatrix& m);

// Squared Euclidean distances between rows of x and rows of y.
DenseMatrix squared_distances(const DenseMatrix& x, const DenseMatrix& y);

struct Wasserstein {
  double value = 0.0;
  bool exact = true;
  std::size_t n_used = 0;  // points per side after equal-size subsampling
};

inline constexpr std::size_t kMaxExactAssignment = 512;

// 2-Wasserstein distance between two empirical distributions. The larger set
// is subsampled (seeded) to the size of the smaller one. Up to max_exact
// points the assignment is solved exactly; above that an annealed entropic
// plan is used and the result is flagged inexact.
Wasserstein wasserstein2(const DenseMatrix& x, const DenseMatrix& y, std::size_t max_exact = kMaxExactAssignment,
                         std::uint64_t seed = 0);

// Unbiased RBF-kernel MMD^2, clamped at 0, square-rooted. Bandwidth is the
// median pairwise distance of the pooled sample (floored at 1e-8).
double mmd_rbf(const DenseMatrix& x, const DenseMatrix& y);
double median_heuristic(const DenseMatrix& x, const DenseMatrix& y);

struct GeneMeanStats {
  double pcc = 0.0;
  double r2 = 0.0;
  double mse = 0.0;
  // False when either mean vector has zero variance; pcc (and r2 when the
  // real means are constant) are NaN then.
  bool defined = true;
};

// Agreement of per-column means; `real` is treated as the truth for R^2.
GeneMeanStats gene_mean_stats(const DenseMatrix& real, const DenseMatrix& generated);

}  // namespace blockflow
