#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "blockflow/io.hpp"
#include "blockflow/preprocess.hpp"
#include "blockflow/rng.hpp"

using namespace blockflow;
namespace fs = std::filesystem;

namespace {

ExpressionMatrix make(std::size_t n, std::size_t g, std::vector<double> v) {
  std::vector<std::string> cells, genes;
  for (std::size_t i = 0; i < n; ++i) cells.push_back("c" + std::to_string(i));
  for (std::size_t j = 0; j < g; ++j) genes.push_back("g" + std::to_string(j));
  return ExpressionMatrix(cells, genes, std::move(v));
}

ExpressionMatrix random_counts(std::size_t n, std::size_t g, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n * g);
  for (auto& x : v) x = static_cast<double>(rng.poisson(3.0));
  for (std::size_t i = 0; i < n; ++i) v[i * g] += 1.0;  // no empty cells
  return make(n, g, v);
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("blockflow_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("normalize_depth examples") {
  auto m = normalize_depth(make(2, 3, {1, 1, 2, 1e4, 0, 0}));
  CHECK(m.stage() == Stage::DepthNormalized);
  CHECK(m.at(0, 0) == doctest::Approx(2500));
  CHECK(m.at(0, 1) == doctest::Approx(2500));
  CHECK(m.at(0, 2) == doctest::Approx(5000));
  CHECK(m.at(1, 0) == 1e4);
  CHECK(m.at(1, 1) == 0.0);
}

TEST_CASE("normalize_depth row sums on random 20x10 counts") {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto m = normalize_depth(random_counts(20, 10, seed));
    for (std::size_t i = 0; i < 20; ++i) {
      double s = 0;
      for (double v : m.row(i)) s += v;
      CHECK(std::abs(s - 1e4) / 1e4 < 1e-6);
    }
  }
  // regardless of scale
  auto big = make(1, 3, {1e12, 3e12, 6e12});
  auto bn = normalize_depth(big);
  double s = 0;
  for (double v : bn.row(0)) s += v;
  CHECK(std::abs(s - 1e4) / 1e4 < 1e-12);
}

TEST_CASE("normalize_depth rejects all-zero cells by id") {
  auto m = make(2, 2, {1, 2, 0, 0});
  try {
    normalize_depth(m);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("'c1'") != std::string::npos);
  }
}

TEST_CASE("log_transform examples and round trip") {
  auto m = log_transform(normalize_depth(make(1, 3, {0, 1, 1})));
  CHECK(m.at(0, 0) == 0.0);
  CHECK(m.stage() == Stage::Logged);
  auto d = ExpressionMatrix({"c"}, {"a", "b"}, {0.0, std::exp(1.0) - 1.0}, Stage::DepthNormalized);
  auto l = log_transform(d);
  CHECK(l.at(0, 0) == 0.0);
  CHECK(std::abs(l.at(0, 1) - 1.0) < 1e-15);

  auto dn = normalize_depth(random_counts(15, 8, 9));
  auto lg = log_transform(dn);
  for (std::size_t i = 0; i < dn.values().size(); ++i) {
    CHECK(std::abs(std::expm1(lg.values()[i]) - dn.values()[i]) <= 1e-9 * std::max(1.0, dn.values()[i]));
  }
}

TEST_CASE("maxabs_scale examples") {
  auto l = ExpressionMatrix({"a", "b", "c"}, {"g0", "g1"}, {0, 0, 2, 0, 4, 0}, Stage::Logged);
  auto s = maxabs_scale(l);
  CHECK(s.stage() == Stage::MaxAbsScaled);
  CHECK(s.at(0, 0) == 0.0);
  CHECK(s.at(1, 0) == 0.5);
  CHECK(s.at(2, 0) == 1.0);
  CHECK(s.scale_factors()[0] == 4.0);
  CHECK(s.scale_factors()[1] == 1.0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(s.at(i, 1) == 0.0);
}

TEST_CASE("scale / unscale round trips on random matrices") {
  for (std::uint64_t seed : {4, 5, 6}) {
    auto dn = normalize_depth(random_counts(25, 12, seed));
    auto lg = log_transform(dn);
    auto sc = maxabs_scale(lg);
    for (double v : sc.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    for (std::size_t j = 0; j < sc.n_genes(); ++j) CHECK(sc.scale_factors()[j] > 0.0);
    // maxabs part alone is exact to 1e-12
    for (std::size_t i = 0; i < sc.values().size(); ++i) {
      double back = sc.values()[i] * sc.scale_factors()[i % sc.n_genes()];
      CHECK(std::abs(back - lg.values()[i]) <= 1e-12 * std::max(1.0, lg.values()[i]));
    }
    auto un = unscale(sc);
    CHECK(un.stage() == Stage::DepthNormalized);
    for (std::size_t i = 0; i < un.values().size(); ++i) {
      CHECK(std::abs(un.values()[i] - dn.values()[i]) <= 1e-9 * std::max(1.0, dn.values()[i]));
    }
  }
}

TEST_CASE("pipeline order is enforced") {
  auto raw = random_counts(3, 4, 1);
  CHECK_THROWS_AS(log_transform(raw), PipelineOrderError);
  CHECK_THROWS_AS(maxabs_scale(raw), PipelineOrderError);
  CHECK_THROWS_AS(unscale(raw), PipelineOrderError);
  auto dn = normalize_depth(raw);
  CHECK_THROWS_AS(normalize_depth(dn), PipelineOrderError);
  CHECK_THROWS_AS(maxabs_scale(dn), PipelineOrderError);
  auto p = preprocess(raw);
  CHECK(p.stage() == Stage::MaxAbsScaled);
  CHECK_THROWS_AS(log_transform(p), PipelineOrderError);
}

TEST_CASE("unscale without factors is rejected") {
  auto m = ExpressionMatrix({"a"}, {"g"}, {0.5}, Stage::MaxAbsScaled);
  CHECK_THROWS_AS(unscale(m), ValidationError);
}

TEST_CASE("apply_maxabs reuses training factors and clips") {
  auto lg = ExpressionMatrix({"a", "b"}, {"g0", "g1"}, {1, 2, 3, 0}, Stage::Logged);
  std::vector<double> f = {2.0, 4.0};
  auto s = apply_maxabs(lg, f);
  CHECK(s.at(0, 0) == 0.5);
  CHECK(s.at(0, 1) == 0.5);
  CHECK(s.at(1, 0) == 1.0);  // 3/2 clipped
  CHECK(s.scale_factors() == f);
}

TEST_CASE("negative or non-finite values are rejected") {
  CHECK_THROWS_AS(make(1, 2, {1, -1}), ValidationError);
  CHECK_THROWS_AS(make(1, 2, {1, NAN}), ValidationError);
  CHECK_THROWS_AS(make(1, 2, {1}), ValidationError);
}

TEST_CASE("matrix CSV and binary round trips") {
  auto dir = temp_dir("io");
  auto m = normalize_depth(random_counts(7, 5, 3));
  write_matrix(dir / "m.csv", m);
  auto c = read_matrix(dir / "m.csv", Stage::DepthNormalized);
  CHECK(c.gene_ids() == m.gene_ids());
  CHECK(c.cell_ids() == m.cell_ids());
  CHECK(std::vector<double>(c.values().begin(), c.values().end()) ==
        std::vector<double>(m.values().begin(), m.values().end()));

  write_matrix(dir / "m.bfx", m);
  std::ifstream in(dir / "m.bfx", std::ios::binary);
  char magic[4];
  in.read(magic, 4);
  CHECK(std::string(magic, 4) == "BFX1");
  CHECK(fs::file_size(dir / "m.bfx") == 4 + 8 + 7 * 5 * 8);
  auto b = read_matrix(dir / "m.bfx");
  CHECK(b.n_cells() == 7);
  CHECK(b.n_genes() == 5);
  CHECK(std::vector<double>(b.values().begin(), b.values().end()) ==
        std::vector<double>(m.values().begin(), m.values().end()));
  fs::remove_all(dir);
}

TEST_CASE("truncated binary matrix is rejected") {
  auto dir = temp_dir("io_bad");
  std::string bytes(kMatrixMagic, 4);
  put_u32(bytes, 2);
  put_u32(bytes, 2);
  put_f64(bytes, 1.0);
  write_file_atomic(dir / "bad.bfx", bytes);
  CHECK_THROWS_AS(read_matrix(dir / "bad.bfx"), ValidationError);
  fs::remove_all(dir);
}
