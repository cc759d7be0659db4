#include "blockflow/rng.hpp"

#include <numeric>

namespace blockflow {

std::uint64_t Rng::mix(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng Rng::substream(std::string_view name) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return Rng(mix(seed_ ^ mix(h)));
}

Rng Rng::substream(std::uint64_t index) const { return Rng(mix(seed_ + mix(index + 0x632be59bd9b4e019ULL))); }

std::uint64_t Rng::poisson(double lambda) {
  if (lambda <= 0.0) return 0;
  return std::poisson_distribution<std::uint64_t>(lambda)(engine_);
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  // Fisher-Yates with our own index draws; std::shuffle is implementation-defined.
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[index(i)]);
  return p;
}

Tensor Rng::normal_tensor(const Shape& shape) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = normal();
  return Tensor::from(shape, std::move(v));
}

Tensor Rng::uniform_tensor(const Shape& shape, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = lo + (hi - lo) * uniform();
  return Tensor::from(shape, std::move(v));
}

}  // namespace blockflow
