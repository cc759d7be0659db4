#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "blockflow/tensor.hpp"

namespace blockflow {

// Seedable generator. Named substreams derive independent seeds from a root
// seed so that toggling one pipeline stage never shifts another's draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

  std::uint64_t seed() const { return seed_; }
  Rng substream(std::string_view name) const;
  Rng substream(std::uint64_t index) const;

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double normal() { return normal_(engine_); }
  bool bernoulli(double p) { return uniform() < p; }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  std::uint64_t poisson(double lambda);
  std::vector<std::size_t> permutation(std::size_t n);

  Tensor normal_tensor(const Shape& shape);
  Tensor uniform_tensor(const Shape& shape, double lo, double hi);

  std::mt19937_64& engine() { return engine_; }

  static std::uint64_t mix(std::uint64_t x);

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace blockflow
