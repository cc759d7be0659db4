#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "blockflow/rng.hpp"
#include "blockflow/tensor.hpp"

namespace blockflow {

// Named, ordered collection of trainable leaves. Order is registration order
// and defines checkpoint layout.
class ParamSet {
 public:
  Tensor add(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();
  bool all_finite() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, std::size_t> index_;
};

// Parameter initializers.
Tensor init_uniform(Rng& rng, const Shape& shape, double bound);
Tensor init_xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out);
Tensor init_zeros(const Shape& shape);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 2.5e-5;
};

// Decoupled weight decay Adam. Moments live alongside the parameters they
// track and are serialized with them.
class AdamW {
 public:
  AdamW(const ParamSet& params, AdamWConfig config = {});
  void step(double lr);
  std::size_t steps() const { return steps_; }

  // Moments exported as "<param>.adam_m" / "<param>.adam_v".
  std::vector<std::pair<std::string, Tensor>> state() const;
  void load_state(const std::map<std::string, Tensor>& tensors, std::size_t steps);

 private:
  const ParamSet* params_;
  AdamWConfig config_;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Linear warmup from lr/warmup to lr over `warmup` epochs, constant after.
double warmup_factor(std::size_t epoch, std::size_t warmup);

}  // namespace blockflow
