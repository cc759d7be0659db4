#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "blockflow/metrics.hpp"
#include "blockflow/rng.hpp"

using namespace blockflow;

namespace {

DenseMatrix gaussian(Rng& rng, std::size_t n, std::size_t d, double mean, double sd = 1.0) {
  DenseMatrix m(n, d);
  for (auto& v : m.data) v = mean + sd * rng.normal();
  return m;
}

double brute_w2(const DenseMatrix& x, const DenseMatrix& y) {
  std::vector<std::size_t> perm(x.rows);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0;
    for (std::size_t i = 0; i < x.rows; ++i)
      for (std::size_t d = 0; d < x.cols; ++d) s += std::pow(x(i, d) - y(perm[i], d), 2);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::sqrt(best / x.rows);
}

// Straightforward reimplementation of the gene-mean statistics.
GeneMeanStats reference_stats(const DenseMatrix& real, const DenseMatrix& gen) {
  std::size_t d = real.cols;
  std::vector<double> a(d, 0.0), b(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < real.rows; ++i) a[j] += real(i, j);
    for (std::size_t i = 0; i < gen.rows; ++i) b[j] += gen(i, j);
    a[j] /= real.rows;
    b[j] /= gen.rows;
  }
  double ma = std::accumulate(a.begin(), a.end(), 0.0) / d, mb = std::accumulate(b.begin(), b.end(), 0.0) / d;
  double sab = 0, saa = 0, sbb = 0, res = 0;
  for (std::size_t j = 0; j < d; ++j) {
    sab += (a[j] - ma) * (b[j] - mb);
    saa += (a[j] - ma) * (a[j] - ma);
    sbb += (b[j] - mb) * (b[j] - mb);
    res += (a[j] - b[j]) * (a[j] - b[j]);
  }
  GeneMeanStats s;
  s.pcc = sab / std::sqrt(saa * sbb);
  s.r2 = 1 - res / saa;
  s.mse = res / d;
  return s;
}

}  // namespace

TEST_CASE("wasserstein2 examples") {
  Rng rng(1);
  auto x = gaussian(rng, 10, 3, 0);
  auto w = wasserstein2(x, x);
  CHECK(w.value == 0.0);
  CHECK(w.exact);
  DenseMatrix p(1, 2), q(1, 2);
  q(0, 0) = 3;
  q(0, 1) = 4;
  CHECK(wasserstein2(p, q).value == doctest::Approx(5.0).epsilon(1e-15));
  CHECK_THROWS_AS(wasserstein2(p, DenseMatrix(1, 3)), DimensionError);
}

TEST_CASE("exact wasserstein2 equals permutation brute force for n <= 6") {
  for (std::size_t n = 1; n <= 6; ++n) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(10 * n + seed);
      auto x = gaussian(rng, n, 2, 0), y = gaussian(rng, n, 2, 0.5);
      auto w = wasserstein2(x, y);
      CHECK(w.exact);
      CHECK(w.n_used == n);
      CHECK(std::abs(w.value - brute_w2(x, y)) < 1e-12);
    }
  }
}

TEST_CASE("wasserstein2 symmetry and triangle inequality on 5-point sets") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto a = gaussian(rng, 5, 3, 0), b = gaussian(rng, 5, 3, 1), c = gaussian(rng, 5, 3, -1, 2);
    double ab = wasserstein2(a, b).value, ba = wasserstein2(b, a).value;
    double bc = wasserstein2(b, c).value, ac = wasserstein2(a, c).value;
    CHECK(std::abs(ab - ba) < 1e-12);
    CHECK(ac <= ab + bc + 1e-12);
  }
}

TEST_CASE("wasserstein2: subsampling and the approximate path") {
  Rng rng(2);
  auto x = gaussian(rng, 30, 2, 0), y = gaussian(rng, 12, 2, 0);
  auto w = wasserstein2(x, y, 512, 7);
  CHECK(w.n_used == 12);
  CHECK(w.exact);
  CHECK(wasserstein2(x, y, 512, 7).value == w.value);  // seeded

  auto big_x = gaussian(rng, 80, 2, 0), big_y = gaussian(rng, 80, 2, 1);
  auto exact = wasserstein2(big_x, big_y, 512);
  auto approx = wasserstein2(big_x, big_y, 40);
  CHECK_FALSE(approx.exact);
  CHECK(approx.value >= exact.value - 1e-9);  // entropic plans cost at least the optimum
  CHECK(std::abs(approx.value - exact.value) < 0.05 * exact.value);
}

TEST_CASE("mmd examples") {
  Rng rng(3);
  auto x = gaussian(rng, 200, 1, 0);
  CHECK(mmd_rbf(x, x) < 1e-9);
  auto a = gaussian(rng, 500, 1, 0), b = gaussian(rng, 500, 1, 10);
  CHECK(mmd_rbf(a, b) > 0.5);
  auto c = gaussian(rng, 500, 1, 0), d = gaussian(rng, 500, 1, 0);
  CHECK(mmd_rbf(c, d) < 0.05);
  CHECK(std::abs(mmd_rbf(c, b) - mmd_rbf(b, c)) < 1e-12);
  DenseMatrix same(5, 2, 1.0);
  CHECK(mmd_rbf(same, same) == 0.0);
  CHECK(median_heuristic(same, same) == 1e-8);
}

TEST_CASE("mmd null draws: rate below 0.05") {
  // A single 1-D null draw of 500 points exceeds 0.05 about 6% of the time,
  // so the bound is checked as a rate over many seeds.
  std::size_t below = 0;
  const std::size_t trials = 200;
  for (std::uint64_t seed = 0; seed < trials; ++seed) {
    Rng rng(1000 + seed);
    auto a = gaussian(rng, 500, 1, 0), b = gaussian(rng, 500, 1, 0);
    double m = mmd_rbf(a, b);
    CHECK(m >= 0.0);
    below += m < 0.05;
  }
  CHECK(static_cast<double>(below) / trials >= 0.85);
}

TEST_CASE("gene_mean_stats examples") {
  Rng rng(4);
  auto real = gaussian(rng, 40, 6, 2);
  auto s = gene_mean_stats(real, real);
  CHECK(s.pcc == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.r2 == 1.0);
  CHECK(s.mse == 0.0);

  DenseMatrix shifted = real;
  for (auto& v : shifted.data) v += 0.3;
  auto t = gene_mean_stats(real, shifted);
  std::vector<double> means(6, 0.0);
  for (std::size_t j = 0; j < 6; ++j) {
    for (std::size_t i = 0; i < 40; ++i) means[j] += real(i, j) / 40;
  }
  double mu = std::accumulate(means.begin(), means.end(), 0.0) / 6, ss = 0;
  for (double m : means) ss += (m - mu) * (m - mu);
  CHECK(t.pcc == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(t.mse == doctest::Approx(0.09).epsilon(1e-12));
  CHECK(t.r2 == doctest::Approx(1 - 0.09 * 6 / ss).epsilon(1e-10));

  DenseMatrix flat(3, 4, 1.0);
  auto u = gene_mean_stats(flat, gaussian(rng, 3, 4, 0));
  CHECK_FALSE(u.defined);
  CHECK(std::isnan(u.pcc));
}

TEST_CASE("gene_mean_stats agrees with a reference implementation") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto real = gaussian(rng, 10 + seed, 8, 0, 2), gen = gaussian(rng, 7 + seed, 8, 0.5, 2);
    auto s = gene_mean_stats(real, gen), r = reference_stats(real, gen);
    CHECK(std::abs(s.pcc - r.pcc) < 1e-10);
    CHECK(std::abs(s.r2 - r.r2) < 1e-10);
    CHECK(std::abs(s.mse - r.mse) < 1e-10);
    CHECK(s.pcc <= 1.0);
    CHECK(s.pcc >= -1.0);
    CHECK(s.r2 <= 1.0);
    CHECK(s.mse >= 0.0);
  }
}
