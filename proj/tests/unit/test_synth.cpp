#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "blockflow/io.hpp"
#include "blockflow/synth.hpp"

using namespace blockflow;
namespace fs = std::filesystem;

namespace {

// Welch two-sample statistic between two row subsets, one gene.
double welch_t(const ExpressionMatrix& m, const std::vector<std::size_t>& a, const std::vector<std::size_t>& b,
               std::size_t gene) {
  auto stats = [&](const std::vector<std::size_t>& rows) {
    double mean = 0, var = 0;
    for (auto r : rows) mean += m.at(r, gene);
    mean /= rows.size();
    for (auto r : rows) var += std::pow(m.at(r, gene) - mean, 2);
    var /= rows.size() - 1;
    return std::pair{mean, var};
  };
  auto [ma, va] = stats(a);
  auto [mb, vb] = stats(b);
  double se = std::sqrt(va / a.size() + vb / b.size());
  return se > 0 ? (ma - mb) / se : 0.0;
}

std::vector<std::size_t> rows_with(const SyntheticData& d, std::size_t type, std::uint32_t label) {
  std::vector<std::size_t> r;
  for (std::size_t i = 0; i < d.conds.n_rows; ++i)
    if (d.conds.at(i, type) == label) r.push_back(i);
  return r;
}

double sqdist(const GeneEmbeddingTable& e, std::size_t i, std::size_t j) {
  double s = 0;
  for (std::size_t d = 0; d < e.dim; ++d) s += std::pow(e.row(i)[d] - e.row(j)[d], 2);
  return s;
}

}  // namespace

TEST_CASE("standard design: shape and ground truth") {
  auto spec = SyntheticSpec::standard();
  auto d = synthesize(spec, 1);
  CHECK(d.counts.n_cells() == 2000);
  CHECK(d.counts.n_genes() == 200);
  CHECK(d.schema.n_types() == 2);
  CHECK(d.schema.type(0).labels == std::vector<std::string>{"A", "B", "C"});
  CHECK(d.conds.n_rows == 2000);
  for (auto v : d.conds.indices) CHECK(v != kMaskIndex);
  CHECK(d.embeddings.n_genes() == 200);
  CHECK(d.ground_truth["signatures"].size() == 5);
  for (double v : d.counts.values()) {
    CHECK(v >= 0.0);
    CHECK(v == std::floor(v));
  }
  for (std::size_t c = 0; c < d.counts.n_cells(); ++c) {
    double s = 0;
    for (double v : d.counts.row(c)) s += v;
    CHECK(s > 0.0);
  }
}

TEST_CASE("signature genes shift the matching population") {
  auto d = synthesize(SyntheticSpec::standard(), 2);
  const auto& sig = d.ground_truth["signatures"][0];  // cell_type A
  CHECK(sig["label"] == "A");
  auto in = rows_with(d, 0, 1), out = rows_with(d, 0, 2);
  std::size_t up = 0;
  for (std::size_t g : sig["gene_index"].get<std::vector<std::size_t>>()) up += welch_t(d.counts, in, out, g) > 2.576;
  CHECK(up >= 18);
}

TEST_CASE("null design: zero effects give no differential genes") {
  auto spec = SyntheticSpec::standard();
  spec.n_genes = 1000;
  for (auto& t : spec.types)
    for (auto& l : t.levels) l.effect = 0.0;
  auto d = synthesize(spec, 3);
  std::size_t tests = 0, rejected = 0;
  auto compare = [&](std::size_t type, std::uint32_t la, std::uint32_t lb) {
    auto a = rows_with(d, type, la), b = rows_with(d, type, lb);
    for (std::size_t g = 0; g < spec.n_genes; ++g) {
      ++tests;
      rejected += std::abs(welch_t(d.counts, a, b, g)) > 2.576;  // alpha = 0.01, two-sided
    }
  };
  compare(0, 1, 2);
  compare(0, 1, 3);
  compare(1, 1, 2);
  CHECK(static_cast<double>(rejected) / tests <= 0.02);
}

TEST_CASE("sparsity target is met") {
  for (double target : {0.5, 0.8, 0.9}) {
    auto spec = SyntheticSpec::standard();
    spec.sparsity = target;
    auto d = synthesize(spec, 4);
    std::size_t zeros = 0;
    for (double v : d.counts.values()) zeros += v == 0.0;
    double frac = static_cast<double>(zeros) / d.counts.values().size();
    CHECK(std::abs(frac - target) < 0.03);
    CHECK(d.ground_truth["zero_fraction"].get<double>() == doctest::Approx(frac));
  }
}

TEST_CASE("signature-sharing genes are embedded close together") {
  auto d = synthesize(SyntheticSpec::standard(), 5);
  auto genes = d.ground_truth["signatures"][1]["gene_index"].get<std::vector<std::size_t>>();
  auto other = d.ground_truth["signatures"][3]["gene_index"].get<std::vector<std::size_t>>();
  double within = 0, across = 0;
  for (std::size_t i = 0; i < genes.size(); ++i)
    for (std::size_t j = 0; j < genes.size(); ++j) {
      if (i != j) within += sqdist(d.embeddings, genes[i], genes[j]);
      across += sqdist(d.embeddings, genes[i], other[j]);
    }
  within /= genes.size() * (genes.size() - 1);
  across /= genes.size() * other.size();
  CHECK(within * 4 < across);
}

TEST_CASE("same seed gives byte-identical files") {
  auto base = fs::temp_directory_path() / "blockflow_test_synth";
  fs::remove_all(base);
  auto spec = SyntheticSpec::standard();
  spec.n_cells = 300;
  write_synthetic(synthesize(spec, 6), base / "a");
  write_synthetic(synthesize(spec, 6), base / "b");
  write_synthetic(synthesize(spec, 7), base / "c");
  auto pa = synthetic_paths(base / "a"), pb = synthetic_paths(base / "b"), pc = synthetic_paths(base / "c");
  CHECK(read_file(pa.counts) == read_file(pb.counts));
  CHECK(read_file(pa.conditions) == read_file(pb.conditions));
  CHECK(read_file(pa.embeddings) == read_file(pb.embeddings));
  CHECK(read_file(pa.ground_truth) == read_file(pb.ground_truth));
  CHECK(read_file(pa.counts) != read_file(pc.counts));
  fs::remove_all(base);
}

TEST_CASE("infeasible specs are rejected") {
  auto spec = SyntheticSpec::standard();
  spec.n_genes = 50;  // 5 signatures x 20 genes do not fit
  CHECK_THROWS_AS(synthesize(spec, 1), ValidationError);
  spec = SyntheticSpec::standard();
  spec.types[0].levels[0].genes = {500};
  CHECK_THROWS_AS(spec.validate(), ValidationError);
  spec = SyntheticSpec::standard();
  spec.sparsity = 1.0;
  CHECK_THROWS_AS(spec.validate(), ValidationError);
  auto round = SyntheticSpec::from_json(SyntheticSpec::perturbation(2.0).to_json());
  CHECK(round.to_json() == SyntheticSpec::perturbation(2.0).to_json());
}
