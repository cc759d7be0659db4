#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace blockflow {

// Row-major dense matrix used for cost matrices and transport plans.
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

struct SinkhornOptions {
  double epsilon = 0.05;
  std::size_t max_iters = 1000;
  double tol = 1e-6;  // L1 row-marginal residual (columns are exact after each sweep)
  // Optional warm-start dual potentials; empty means zeros.
  std::vector<double> init_f;
  std::vector<double> init_g;
};

struct TransportPlan {
  DenseMatrix plan;
  std::vector<double> row_marginal;  // a
  std::vector<double> col_marginal;  // b
  std::vector<double> f;             // dual potentials
  std::vector<double> g;
  std::size_t iterations = 0;
  double marginal_error = 0.0;  // max abs deviation over both marginals
  bool converged = false;

  double transport_cost(const DenseMatrix& cost) const;
};

// Entropic OT, log-domain updates. Returns the last iterate even when the
// residual has not reached tol; `converged` and `marginal_error` report it.
TransportPlan sinkhorn_balanced(const DenseMatrix& cost, std::span<const double> a, std::span<const double> b,
                                const SinkhornOptions& options);

// <T,C> + eps * sum T (log T - 1), with 0 log 0 = 0.
double entropic_objective(const DenseMatrix& plan, const DenseMatrix& cost, double epsilon);

// Minimum-cost perfect matching on a square cost matrix (Kuhn-Munkres with
// potentials, O(n^3)). Returns column assigned to each row.
struct Assignment {
  std::vector<std::size_t> row_to_col;
  double total_cost = 0.0;
};
Assignment solve_assignment(const DenseMatrix& cost);

}  // namespace blockflow
