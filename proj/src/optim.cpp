#include "blockflow/optim.hpp"

#include <algorithm>
#include <cmath>

namespace blockflow {

Tensor ParamSet::add(const std::string& name, Tensor t) {
  if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
  if (!t.requires_grad() || !t.is_leaf()) throw ContractError("parameter must be a gradient leaf: " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, t);
  return t;
}

const Tensor& ParamSet::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return items_[it->second].second;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

bool ParamSet::all_finite() const {
  for (const auto& [name, t] : items_) {
    for (double x : t.values()) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

Tensor init_uniform(Rng& rng, const Shape& shape, double bound) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = (2.0 * rng.uniform() - 1.0) * bound;
  return Tensor::parameter(shape, std::move(v));
}

Tensor init_xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return init_uniform(rng, {fan_in, fan_out}, bound);
}

Tensor init_zeros(const Shape& shape) { return Tensor::parameter(shape, std::vector<double>(shape_numel(shape), 0.0)); }

AdamW::AdamW(const ParamSet& params, AdamWConfig config) : params_(&params), config_(config) {
  for (const auto& [name, t] : params.items()) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  ++steps_;
  double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  const auto& items = params_->items();
  for (std::size_t p = 0; p < items.size(); ++p) {
    Tensor t = items[p].second;
    if (!t.has_grad()) continue;
    auto w = t.mutable_values();
    auto g = t.grad();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      w[i] -= lr * config_.weight_decay * w[i];
      w[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

std::vector<std::pair<std::string, Tensor>> AdamW::state() const {
  std::vector<std::pair<std::string, Tensor>> out;
  const auto& items = params_->items();
  for (std::size_t p = 0; p < items.size(); ++p) {
    const Shape& s = items[p].second.shape();
    out.emplace_back(items[p].first + ".adam_m", Tensor::from(s, m_[p]));
    out.emplace_back(items[p].first + ".adam_v", Tensor::from(s, v_[p]));
  }
  return out;
}

void AdamW::load_state(const std::map<std::string, Tensor>& tensors, std::size_t steps) {
  const auto& items = params_->items();
  for (std::size_t p = 0; p < items.size(); ++p) {
    auto mi = tensors.find(items[p].first + ".adam_m");
    auto vi = tensors.find(items[p].first + ".adam_v");
    if (mi == tensors.end() || vi == tensors.end()) {
      throw ContractError("optimizer state missing for " + items[p].first);
    }
    if (mi->second.numel() != m_[p].size() || vi->second.numel() != v_[p].size()) {
      throw DimensionError("optimizer state shape mismatch for " + items[p].first);
    }
    m_[p].assign(mi->second.values().begin(), mi->second.values().end());
    v_[p].assign(vi->second.values().begin(), vi->second.values().end());
  }
  steps_ = steps;
}

double warmup_factor(std::size_t epoch, std::size_t warmup) {
  if (warmup == 0 || epoch >= warmup) return 1.0;
  return static_cast<double>(epoch + 1) / static_cast<double>(warmup);
}

}  // namespace blockflow
