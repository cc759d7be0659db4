#pragma once

// Central finite-difference gradient checker shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "blockflow/rng.hpp"
#include "blockflow/tensor.hpp"

namespace blockflow::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "name[index]" of the worst entry
};

// Per-entry error |a - n| / max(|a|, |n|, floor), maximised over the probed
// entries. The floor keeps entries whose true gradient is ~0 from being judged
// on pure cancellation noise: below it the test is effectively absolute.
// The numeric side is a Richardson-extrapolated central difference,
// (4 D(h/2) - D(h)) / 3, so truncation is O(h^4) and h can stay large enough
// that round-off in the loss stays far below the 1e-4 target.
// `loss` must be a deterministic function of the parameter values.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  std::size_t max_entries, std::uint64_t seed, double step = 1e-3,
                                  double floor = 1e-6) {
  for (const auto& [name, p] : params) {
    Tensor q = p;
    q.zero_grad();
  }
  Tensor l = loss();
  backward(l);

  std::vector<std::pair<std::size_t, std::size_t>> entries;  // (param, flat index)
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (std::size_t j = 0; j < params[i].second.numel(); ++j) entries.emplace_back(i, j);
  }
  if (entries.size() > max_entries) {
    Rng rng(seed);
    auto perm = rng.permutation(entries.size());
    std::vector<std::pair<std::size_t, std::size_t>> picked;
    for (std::size_t k = 0; k < max_entries; ++k) picked.push_back(entries[perm[k]]);
    entries = std::move(picked);
  }

  GradCheckResult r;
  for (auto [pi, j] : entries) {
    Tensor p = params[pi].second;
    double analytic = p.has_grad() ? p.grad()[j] : 0.0;
    auto vals = p.mutable_values();
    double orig = vals[j];
    auto central = [&](double h) {
      NoGradGuard ng;
      vals[j] = orig + h;
      double plus = loss().item();
      vals[j] = orig - h;
      double minus = loss().item();
      vals[j] = orig;
      return (plus - minus) / (2.0 * h);
    };
    double numeric = (4.0 * central(0.5 * step) - central(step)) / 3.0;
    double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    double err = std::abs(analytic - numeric) / denom;
    if (!(err <= r.max_rel_error)) {
      r.max_rel_error = err;
      r.worst = params[pi].first + "[" + std::to_string(j) + "] analytic=" + std::to_string(analytic) +
                " numeric=" + std::to_string(numeric);
    }
    ++r.checked;
  }
  for (const auto& [name, p] : params) {
    Tensor q = p;
    q.zero_grad();
  }
  return r;
}

inline Tensor random_param(Rng& rng, const Shape& shape, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::parameter(shape, std::move(v));
}

inline Tensor random_const(Rng& rng, const Shape& shape, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::from(shape, std::move(v));
}

}  // namespace blockflow::testing
