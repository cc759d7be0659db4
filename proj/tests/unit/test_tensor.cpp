#include <doctest.h>

#include <cmath>
#include <set>
#include <unordered_map>

#include "blockflow/rng.hpp"
#include "blockflow/tensor.hpp"
#include "gradcheck.hpp"

using namespace blockflow;
using blockflow::testing::grad_check;
using blockflow::testing::random_const;
using blockflow::testing::random_param;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// sum(f(x) * w) with fixed random weights, so every output entry matters.
Tensor weighted(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

constexpr double kTol = 1e-4;
constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

}  // namespace

TEST_CASE("matmul examples") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor::from({2, 2}, {3, 4, 5, 6});
  CHECK(vals(matmul(eye, b)) == std::vector<double>{3, 4, 5, 6});
  auto r = Tensor::from({1, 2}, {1, 2});
  auto c = Tensor::from({2, 1}, {3, 4});
  auto out = matmul(r, c);
  CHECK(out.shape() == Shape{1, 1});
  CHECK(out.item() == 11.0);
}

TEST_CASE("matmul shape errors name both shapes") {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3] and [2,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 2, 3}), Tensor::zeros({3, 3, 4})), DimensionError);
}

TEST_CASE("matmul batch broadcasting") {
  Rng rng(3);
  auto a = random_const(rng, {2, 1, 3, 4});
  auto b = random_const(rng, {5, 4, 2});
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 5, 3, 2});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t m = 0; m < 3; ++m)
        for (std::size_t n = 0; n < 2; ++n) {
          double s = 0;
          for (std::size_t k = 0; k < 4; ++k) s += a.at({i, 0, m, k}) * b.at({j, k, n});
          CHECK(c.at({i, j, m, n}) == doctest::Approx(s).epsilon(1e-14));
        }
}

TEST_CASE("grad of sum(A x B) wrt A is row-sums of B broadcast") {
  Rng rng(11);
  auto a = random_param(rng, {3, 4});
  auto b = random_const(rng, {4, 5});
  backward(sum(matmul(a, b)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      double expect = 0;
      for (std::size_t n = 0; n < 5; ++n) expect += b.at({k, n});
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
    }
  auto r = grad_check([&] { return sum(matmul(a, b)); }, {{"a", a}}, 200, 1);
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("softmax examples and normalization") {
  CHECK(vals(softmax_lastdim(Tensor::from({2}, {0, 0}))) == std::vector<double>{0.5, 0.5});
  CHECK(vals(softmax_lastdim(Tensor::from({2}, {1000, 1000}))) == std::vector<double>{0.5, 0.5});
  Rng rng(5);
  auto x = random_const(rng, {4, 7}, -50, 50);
  auto y = softmax_lastdim(x);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      CHECK(y.at({i, j}) > 0.0);
      s += y.at({i, j});
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("layernorm examples") {
  auto ones = layernorm_stats(Tensor::from({1, 4}, {1, 1, 1, 1}));
  for (double v : ones.normalized.values()) CHECK(std::abs(v) < 1e-12);
  auto two = layernorm(Tensor::from({1, 2}, {0, 2}));
  CHECK(two.values()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(two.values()[1] == doctest::Approx(1.0).epsilon(1e-4));

  Rng rng(8);
  auto h = random_const(rng, {6, 16}, -3, 3);
  auto st = layernorm_stats(h);
  for (std::size_t i = 0; i < 6; ++i) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 16; ++j) m += st.normalized.at({i, j});
    m /= 16;
    for (std::size_t j = 0; j < 16; ++j) v += std::pow(st.normalized.at({i, j}) - m, 2);
    v /= 16;
    CHECK(std::abs(m) < 1e-9);
    // eps in the denominator shrinks the variance by var / (var + eps)
    double raw_var = st.var.values()[i];
    CHECK(std::abs(v - raw_var / (raw_var + kLayerNormEps)) < 1e-9);
    CHECK(std::abs(v - 1.0) < 1e-4);
  }
}

TEST_CASE("backward basics") {
  auto p = Tensor::parameter({3}, {0.5, -1, 2});
  backward(sum(p));
  CHECK(std::vector<double>(p.grad().begin(), p.grad().end()) == std::vector<double>{1, 1, 1});
  auto q = Tensor::parameter({2}, {1, 2});
  backward(sum(mul(q, q)));
  CHECK(std::vector<double>(q.grad().begin(), q.grad().end()) == std::vector<double>{2, 4});
  // repeated calls accumulate
  backward(sum(mul(q, q)));
  CHECK(std::vector<double>(q.grad().begin(), q.grad().end()) == std::vector<double>{4, 8});
  q.zero_grad();
  CHECK(std::vector<double>(q.grad().begin(), q.grad().end()) == std::vector<double>{0, 0});
}

TEST_CASE("backward on non-scalar loss is a contract error") {
  auto p = Tensor::parameter({2}, {1, 2});
  CHECK_THROWS_AS(backward(mul(p, p)), ContractError);
}

TEST_CASE("tape orders every node before its consumers, once") {
  Rng rng(2);
  auto a = random_param(rng, {3, 3});
  auto b = random_param(rng, {3});
  auto h = add(matmul(a, a), b);
  auto loss = sum(mul(softmax_lastdim(h), layernorm(h)));
  auto tape = Tape::record(loss);
  std::unordered_map<detail::Node*, std::size_t> pos;
  for (std::size_t i = 0; i < tape.nodes().size(); ++i) {
    CHECK(pos.count(tape.nodes()[i]) == 0);
    pos[tape.nodes()[i]] = i;
  }
  for (std::size_t i = 0; i < tape.nodes().size(); ++i) {
    for (const auto& parent : tape.nodes()[i]->parents) {
      if (!parent->requires_grad) continue;
      REQUIRE(pos.count(parent.get()) == 1);
      CHECK(pos[parent.get()] < i);
    }
  }
  CHECK(tape.nodes().back() == loss.node().get());
}

TEST_CASE("NoGradGuard suppresses recording") {
  auto p = Tensor::parameter({2}, {1, 2});
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    auto y = mul(p, p);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(grad_enabled());
  CHECK(mul(p, p).requires_grad());
}

TEST_CASE("shape-violating calls leave inputs untouched") {
  auto a = Tensor::parameter({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from({4}, {1, 1, 1, 1});
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(reshape(a, {4, 2}), DimensionError);
  CHECK_THROWS_AS(concat({a, b}, 0), DimensionError);
  CHECK(vals(a) == std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(a.shape() == Shape{2, 3});
  CHECK_FALSE(a.has_grad());
}

TEST_CASE("broadcasting forward values") {
  auto a = Tensor::from({2, 1, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor::from({2, 1}, {10, 20});
  auto c = add(a, b);
  CHECK(c.shape() == Shape{2, 2, 3});
  CHECK(c.at({1, 0, 2}) == 16);
  CHECK(c.at({1, 1, 0}) == 24);
  CHECK(c.at({0, 1, 1}) == 22);
}

TEST_CASE("determinism: same seed and ops give bit-identical values") {
  auto run = [] {
    Rng rng(42);
    auto a = rng.normal_tensor({4, 5});
    auto b = rng.uniform_tensor({5, 3}, -1, 1);
    return vals(softmax_lastdim(layernorm(matmul(a, b))));
  };
  CHECK(run() == run());
}

TEST_CASE("gradient suite: elementwise and reductions") {
  for (auto seed : kSeeds) {
    CAPTURE(seed);
    Rng rng(seed);
    auto a = random_param(rng, {3, 1, 4});
    auto b = random_param(rng, {2, 4});
    auto pos = random_param(rng, {2, 4}, 0.5, 2.0);
    auto w = random_const(rng, {3, 2, 4});
    auto w2 = random_const(rng, {2, 4});
    auto wl = random_const(rng, {3, 2, 1});
    std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
        {"add", [&] { return weighted(add(a, b), w); }},
        {"sub", [&] { return weighted(sub(a, b), w); }},
        {"mul", [&] { return weighted(mul(a, b), w); }},
        {"div", [&] { return weighted(div(a, pos), w); }},
        {"scalar", [&] { return weighted(add_scalar(mul_scalar(b, 1.7), 0.3), w2); }},
        {"neg", [&] { return weighted(neg(b), w2); }},
        {"square", [&] { return weighted(square(b), w2); }},
        {"exp", [&] { return weighted(exp(b), w2); }},
        {"log", [&] { return weighted(log(pos), w2); }},
        {"sqrt", [&] { return weighted(sqrt(pos), w2); }},
        {"sigmoid", [&] { return weighted(sigmoid(b), w2); }},
        {"softplus", [&] { return weighted(softplus(b), w2); }},
        {"gelu", [&] { return weighted(gelu(b), w2); }},
        {"tanh", [&] { return weighted(tanh(b), w2); }},
        {"sum", [&] { return mul(sum(square(a)), sum(b)); }},
        {"mean", [&] { return mul(mean(square(a)), mean(b)); }},
        {"sum_lastdim", [&] { return weighted(sum_lastdim(mul(a, b)), wl); }},
        {"mean_lastdim", [&] { return weighted(mean_lastdim(mul(a, b)), wl); }},
    };
    for (auto& [name, fn] : cases) {
      CAPTURE(name);
      auto r = grad_check(fn, {{"a", a}, {"b", b}, {"pos", pos}}, 200, seed);
      INFO(r.worst);
      CHECK(r.max_rel_error < kTol);
    }
  }
}

TEST_CASE("gradient suite: shape ops") {
  for (auto seed : kSeeds) {
    CAPTURE(seed);
    Rng rng(seed);
    auto a = random_param(rng, {2, 3, 4});
    auto b = random_param(rng, {2, 3, 2});
    auto table = random_param(rng, {5, 3});
    std::vector<std::size_t> idx = {4, 0, 4, 2};
    auto w_perm = random_const(rng, {4, 2, 3});
    auto w_cat = random_const(rng, {2, 3, 6});
    auto w_sl = random_const(rng, {2, 3, 2});
    auto w_g = random_const(rng, {4, 3});
    auto w_r = random_const(rng, {6, 4});
    auto w_t = random_const(rng, {2, 4, 3});
    std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
        {"reshape", [&] { return weighted(square(reshape(a, {6, 4})), w_r); }},
        {"permute", [&] { return weighted(square(permute(a, {2, 0, 1})), w_perm); }},
        {"transpose_last2", [&] { return weighted(square(transpose_last2(a)), w_t); }},
        {"slice", [&] { return weighted(square(slice_lastdim(a, 1, 2)), w_sl); }},
        {"concat", [&] { return weighted(square(concat({a, b}, -1)), w_cat); }},
        {"gather_rows", [&] { return weighted(square(gather_rows(table, idx)), w_g); }},
    };
    for (auto& [name, fn] : cases) {
      CAPTURE(name);
      auto r = grad_check(fn, {{"a", a}, {"b", b}, {"table", table}}, 200, seed);
      INFO(r.worst);
      CHECK(r.max_rel_error < kTol);
    }
  }
}

TEST_CASE("gradient suite: matmul, softmax, layernorm") {
  for (auto seed : kSeeds) {
    CAPTURE(seed);
    Rng rng(seed);
    auto a = random_param(rng, {2, 3, 4});
    auto b = random_param(rng, {4, 5});
    auto x = random_param(rng, {3, 6});
    auto wm = random_const(rng, {2, 3, 5});
    auto wx = random_const(rng, {3, 6});
    auto r1 = grad_check([&] { return weighted(matmul(a, b), wm); }, {{"a", a}, {"b", b}}, 200, seed);
    INFO(r1.worst);
    CHECK(r1.max_rel_error < 1e-6);
    auto r2 = grad_check([&] { return weighted(softmax_lastdim(x), wx); }, {{"x", x}}, 200, seed);
    INFO(r2.worst);
    CHECK(r2.max_rel_error < 1e-6);
    auto r3 = grad_check([&] { return weighted(layernorm(x), wx); }, {{"x", x}}, 200, seed);
    INFO(r3.worst);
    CHECK(r3.max_rel_error < 1e-5);
  }
}

TEST_CASE("rng substreams are independent and reproducible") {
  Rng root(7);
  auto a = root.substream("vae").normal_tensor({5});
  auto a2 = Rng(7).substream("vae").normal_tensor({5});
  auto b = root.substream("flow").normal_tensor({5});
  CHECK(vals(a) == vals(a2));
  CHECK(vals(a) != vals(b));
  auto perm = Rng(1).permutation(20);
  CHECK(std::set<std::size_t>(perm.begin(), perm.end()).size() == 20);
}
