#include "blockflow/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "blockflow/tensor.hpp"

namespace blockflow {

double TransportPlan::transport_cost(const DenseMatrix& cost) const {
  double s = 0.0;
  for (std::size_t i = 0; i < plan.data.size(); ++i) s += plan.data[i] * cost.data[i];
  return s;
}

namespace {

void check_probability(std::span<const double> p, const char* name) {
  double total = 0.0;
  for (double x : p) {
    if (!(x > 0.0) || !std::isfinite(x)) throw ValidationError(std::string("sinkhorn: ") + name + " must be positive");
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValidationError(std::string("sinkhorn: ") + name + " must sum to 1");
}

}  // namespace

TransportPlan sinkhorn_balanced(const DenseMatrix& cost, std::span<const double> a, std::span<const double> b,
                                const SinkhornOptions& options) {
  const std::size_t n = cost.rows, m = cost.cols;
  if (a.size() != n || b.size() != m) {
    throw DimensionError("sinkhorn: marginals (" + std::to_string(a.size()) + "," + std::to_string(b.size()) +
                         ") do not match cost " + std::to_string(n) + "x" + std::to_string(m));
  }
  if (!(options.epsilon > 0.0)) throw ValidationError("sinkhorn: epsilon must be positive");
  check_probability(a, "a");
  check_probability(b, "b");

  const double eps = options.epsilon;
  std::vector<double> log_a(n), log_b(m);
  for (std::size_t i = 0; i < n; ++i) log_a[i] = std::log(a[i]);
  for (std::size_t j = 0; j < m; ++j) log_b[j] = std::log(b[j]);

  std::vector<double> f = options.init_f.size() == n ? options.init_f : std::vector<double>(n, 0.0);
  std::vector<double> g = options.init_g.size() == m ? options.init_g : std::vector<double>(m, 0.0);
  std::vector<double> col_max(m), col_acc(m), row_sum(n);

  TransportPlan out;
  out.row_marginal.assign(a.begin(), a.end());
  out.col_marginal.assign(b.begin(), b.end());

  auto update_f = [&] {
    for (std::size_t i = 0; i < n; ++i) {
      const double* c = cost.data.data() + i * m;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, (g[j] - c[j]) / eps);
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += std::exp((g[j] - c[j]) / eps - mx);
      f[i] = eps * (log_a[i] - mx - std::log(acc));
    }
  };
  // Updates g and returns the L1 row residual of the resulting plan.
  auto update_g = [&] {
    std::fill(col_max.begin(), col_max.end(), -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < n; ++i) {
      const double* c = cost.data.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) col_max[j] = std::max(col_max[j], (f[i] - c[j]) / eps);
    }
    std::fill(col_acc.begin(), col_acc.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* c = cost.data.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) col_acc[j] += std::exp((f[i] - c[j]) / eps - col_max[j]);
    }
    for (std::size_t j = 0; j < m; ++j) g[j] = eps * (log_b[j] - col_max[j] - std::log(col_acc[j]));
    double resid = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* c = cost.data.data() + i * m;
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += std::exp((f[i] + g[j] - c[j]) / eps);
      resid += std::abs(s - a[i]);
    }
    return resid;
  };

  std::size_t it = 0;
  double resid = std::numeric_limits<double>::infinity();
  while (it < options.max_iters) {
    update_f();
    resid = update_g();
    ++it;
    if (resid < options.tol) break;
  }

  out.plan = DenseMatrix(n, m);
  std::fill(row_sum.begin(), row_sum.end(), 0.0);
  std::vector<double> col_sum(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double t = std::exp((f[i] + g[j] - cost(i, j)) / eps);
      out.plan(i, j) = t;
      row_sum[i] += t;
      col_sum[j] += t;
    }
  }
  double err = 0.0;
  for (std::size_t i = 0; i < n; ++i) err = std::max(err, std::abs(row_sum[i] - a[i]));
  for (std::size_t j = 0; j < m; ++j) err = std::max(err, std::abs(col_sum[j] - b[j]));
  out.f = std::move(f);
  out.g = std::move(g);
  out.iterations = it;
  out.marginal_error = err;
  out.converged = resid < options.tol;
  return out;
}

double entropic_objective(const DenseMatrix& plan, const DenseMatrix& cost, double epsilon) {
  double s = 0.0;
  for (std::size_t i = 0; i < plan.data.size(); ++i) {
    double t = plan.data[i];
    s += t * cost.data[i];
    if (t > 0.0) s += epsilon * t * (std::log(t) - 1.0);
  }
  return s;
}

Assignment solve_assignment(const DenseMatrix& cost) {
  const std::size_t n = cost.rows;
  if (cost.cols != n) throw DimensionError("solve_assignment: cost matrix must be square");
  Assignment out;
  if (n == 0) return out;
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; p[j] = row matched to column j, 0 = none.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      std::size_t i0 = p[j0], j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  out.row_to_col.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) out.row_to_col[p[j] - 1] = j - 1;
  for (std::size_t i = 0; i < n; ++i) out.total_cost += cost(i, out.row_to_col[i]);
  return out;
}

}  // namespace blockflow
