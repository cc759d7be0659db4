#include "blockflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Core>

#include "blockflow/rng.hpp"

namespace blockflow {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const MatR>;

void check_points(const DenseMatrix& x, const DenseMatrix& y, const char* op, std::size_t min_rows) {
  if (x.cols != y.cols) {
    throw DimensionError(std::string(op) + ": dimension mismatch (" + std::to_string(x.cols) + " vs " +
                         std::to_string(y.cols) + ")");
  }
  if (x.rows < min_rows || y.rows < min_rows) {
    throw ValidationError(std::string(op) + ": needs at least " + std::to_string(min_rows) + " points per side");
  }
  for (double v : x.data) {
    if (!std::isfinite(v)) throw ValidationError(std::string(op) + ": non-finite value");
  }
  for (double v : y.data) {
    if (!std::isfinite(v)) throw ValidationError(std::string(op) + ": non-finite value");
  }
}

DenseMatrix take(const DenseMatrix& m, const std::vector<std::size_t>& rows) {
  DenseMatrix out(rows.size(), m.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(m.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * m.cols), m.cols,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * m.cols));
  }
  return out;
}

// Annealed log-domain Sinkhorn, uniform marginals, warm-started potentials.
double entropic_w2_squared(const DenseMatrix& cost) {
  const std::size_t n = cost.rows;
  std::vector<double> a(n, 1.0 / static_cast<double>(n));
  double scale = std::accumulate(cost.data.begin(), cost.data.end(), 0.0) / static_cast<double>(cost.data.size());
  if (!(scale > 0.0)) return 0.0;
  SinkhornOptions opt;
  opt.max_iters = 200;
  opt.tol = 1e-6;
  double eps = scale;
  const double eps_final = 1e-3 * scale;
  TransportPlan plan;
  while (true) {
    opt.epsilon = std::max(eps, eps_final);
    plan = sinkhorn_balanced(cost, a, a, opt);
    opt.init_f = plan.f;
    opt.init_g = plan.g;
    if (eps <= eps_final) break;
    eps *= 0.5;
  }
  return plan.transport_cost(cost);
}

}  // namespace

DenseMatrix points_of(const ExpressionMatrix& m) {
  DenseMatrix out(m.n_cells(), m.n_genes());
  std::copy(m.values().begin(), m.values().end(), out.data.begin());
  return out;
}

DenseMatrix squared_distances(const DenseMatrix& x, const DenseMatrix& y) {
  if (x.cols != y.cols) throw DimensionError("squared_distances: dimension mismatch");
  DenseMatrix out(x.rows, y.rows);
  if (x.rows == 0 || y.rows == 0) return out;
  CMap X(x.data.data(), static_cast<Eigen::Index>(x.rows), static_cast<Eigen::Index>(x.cols));
  CMap Y(y.data.data(), static_cast<Eigen::Index>(y.rows), static_cast<Eigen::Index>(y.cols));
  // Direct differences: identical points give exactly zero, unlike the
  // expanded |x|^2 + |y|^2 - 2xy form.
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (Eigen::Index j = 0; j < Y.rows(); ++j) out(i, j) = (X.row(i) - Y.row(j)).squaredNorm();
  }
  return out;
}

Wasserstein wasserstein2(const DenseMatrix& x, const DenseMatrix& y, std::size_t max_exact, std::uint64_t seed) {
  check_points(x, y, "wasserstein2", 1);
  const std::size_t n = std::min(x.rows, y.rows);
  Rng rng = Rng(seed).substream("wasserstein2");
  auto subsample = [&](const DenseMatrix& m) {
    if (m.rows == n) return m;
    std::vector<std::size_t> perm = rng.permutation(m.rows);
    perm.resize(n);
    std::sort(perm.begin(), perm.end());
    return take(m, perm);
  };
  DenseMatrix xs = subsample(x);
  DenseMatrix ys = subsample(y);
  DenseMatrix cost = squared_distances(xs, ys);
  Wasserstein out;
  out.n_used = n;
  if (n <= max_exact) {
    Assignment a = solve_assignment(cost);
    out.value = std::sqrt(std::max(0.0, a.total_cost / static_cast<double>(n)));
    out.exact = true;
  } else {
    out.value = std::sqrt(std::max(0.0, entropic_w2_squared(cost)));
    out.exact = false;
  }
  return out;
}

double median_heuristic(const DenseMatrix& x, const DenseMatrix& y) {
  // Pooled sample, thinned by stride to at most 2000 points.
  const std::size_t total = x.rows + y.rows, cap = 2000;
  const std::size_t stride = (total + cap - 1) / cap;
  DenseMatrix pooled(0, x.cols);
  for (std::size_t i = 0; i < total; i += stride) {
    const DenseMatrix& src = i < x.rows ? x : y;
    std::size_t r = i < x.rows ? i : i - x.rows;
    pooled.data.insert(pooled.data.end(), src.data.begin() + static_cast<std::ptrdiff_t>(r * src.cols),
                       src.data.begin() + static_cast<std::ptrdiff_t>((r + 1) * src.cols));
    ++pooled.rows;
  }
  DenseMatrix d2 = squared_distances(pooled, pooled);
  std::vector<double> pairs;
  pairs.reserve(pooled.rows * (pooled.rows - 1) / 2);
  for (std::size_t i = 0; i < pooled.rows; ++i) {
    for (std::size_t j = i + 1; j < pooled.rows; ++j) pairs.push_back(d2(i, j));
  }
  if (pairs.empty()) return 1e-8;
  auto mid = pairs.begin() + static_cast<std::ptrdiff_t>(pairs.size() / 2);
  std::nth_element(pairs.begin(), mid, pairs.end());
  double med = *mid;
  if (pairs.size() % 2 == 0) {
    med = 0.5 * (med + *std::max_element(pairs.begin(), mid));
  }
  return std::max(std::sqrt(med), 1e-8);
}

double mmd_rbf(const DenseMatrix& x, const DenseMatrix& y) {
  check_points(x, y, "mmd_rbf", 2);
  const double sigma = median_heuristic(x, y);
  const double gamma = 1.0 / (2.0 * sigma * sigma);
  auto mean_kernel = [&](const DenseMatrix& a, const DenseMatrix& b, bool skip_diagonal) {
    DenseMatrix d2 = squared_distances(a, b);
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i) {
      for (std::size_t j = 0; j < b.rows; ++j) {
        if (skip_diagonal && i == j) continue;
        s += std::exp(-gamma * d2(i, j));
      }
    }
    double count = skip_diagonal ? static_cast<double>(a.rows) * static_cast<double>(a.rows - 1)
                                 : static_cast<double>(a.rows) * static_cast<double>(b.rows);
    return s / count;
  };
  double mmd2 = mean_kernel(x, x, true) + mean_kernel(y, y, true) - 2.0 * mean_kernel(x, y, false);
  return std::sqrt(std::max(mmd2, 0.0));
}

GeneMeanStats gene_mean_stats(const DenseMatrix& real, const DenseMatrix& generated) {
  check_points(real, generated, "gene_mean_stats", 1);
  const std::size_t d = real.cols;
  if (d < 2) throw ValidationError("gene_mean_stats: needs at least 2 dimensions");
  auto col_means = [d](const DenseMatrix& m) {
    std::vector<double> mu(d, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
      for (std::size_t j = 0; j < d; ++j) mu[j] += m(i, j);
    }
    for (double& v : mu) v /= static_cast<double>(m.rows);
    return mu;
  };
  std::vector<double> a = col_means(real), b = col_means(generated);
  double ma = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(d);
  double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(d);
  double sab = 0.0, saa = 0.0, sbb = 0.0, sse = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    sab += (a[j] - ma) * (b[j] - mb);
    saa += (a[j] - ma) * (a[j] - ma);
    sbb += (b[j] - mb) * (b[j] - mb);
    sse += (a[j] - b[j]) * (a[j] - b[j]);
  }
  GeneMeanStats out;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.mse = sse / static_cast<double>(d);
  out.r2 = saa > 0.0 ? 1.0 - sse / saa : nan;
  if (saa > 0.0 && sbb > 0.0) {
    out.pcc = std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
  } else {
    out.pcc = nan;
    out.defined = false;
  }
  return out;
}

}  // namespace blockflow
