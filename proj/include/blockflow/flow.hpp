#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockflow/checkpoint.hpp"
#include "blockflow/conditioning.hpp"
#include "blockflow/gene_blocks.hpp"
#include "blockflow/optim.hpp"
#include "blockflow/preprocess.hpp"
#include "blockflow/rng.hpp"
#include "blockflow/tensor.hpp"
#include "blockflow/transformer.hpp"
#include "blockflow/vae.hpp"

namespace blockflow {

enum class Integrator { Euler, Heun };

struct FlowConfig {
  std::size_t tokens = 7;      // T, one per gene block
  std::size_t token_dim = 8;   // D, latent width per token
  std::size_t n_blocks = 3;
  std::size_t width = 32;
  std::size_t heads = 2;
  std::size_t ff_mult = 2;
  std::size_t ode_steps = 100;
  double cfg_weight = 2.0;
  double uncond_p = 0.1;
  double mask_p = 0.6;
  Integrator integrator = Integrator::Euler;

  void validate() const;
  nlohmann::json to_json() const;
  static FlowConfig from_json(const nlohmann::json& j);
};

// v(x, t, s). x is [N, T, D]; t holds one time per row.
class VelocityField {
 public:
  virtual ~VelocityField() = default;
  virtual Tensor velocity(const Tensor& x, std::span<const double> t, const ConditionTable& conds) const = 0;
};

// Wraps a plain function; handy for analytic fields.
class FunctionField : public VelocityField {
 public:
  using Fn = std::function<Tensor(const Tensor&, std::span<const double>, const ConditionTable&)>;
  explicit FunctionField(Fn fn) : fn_(std::move(fn)) {}
  Tensor velocity(const Tensor& x, std::span<const double> t, const ConditionTable& conds) const override {
    return fn_(x, t, conds);
  }

 private:
  Fn fn_;
};

class FlowNetwork : public VelocityField {
 public:
  FlowNetwork(const FlowConfig& config, const ConditionSchema& schema, std::uint64_t seed);
  FlowNetwork(const FlowNetwork&) = delete;
  FlowNetwork& operator=(const FlowNetwork&) = delete;

  Tensor velocity(const Tensor& x, std::span<const double> t, const ConditionTable& conds) const override;

  const FlowConfig& config() const { return config_; }
  const ConditionSchema& schema() const { return schema_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }
  void load_tensors(const std::map<std::string, Tensor>& tensors);

 private:
  FlowConfig config_;
  ConditionSchema schema_;
  ParamSet params_;
  ConditionEmbedder embedder_;
  Tensor w_in_, b_in_, pos_;
  AdaLNStack stack_;
  Tensor w_out_, b_out_;
  bool trained_ = false;
};

// (1-t) x0 + t x1 with one t per row. Throws ValidationError if any t is outside [0,1].
Tensor affine_point(const Tensor& x0, const Tensor& x1, std::span<const double> t);
Tensor affine_point(const Tensor& x0, const Tensor& x1, double t);
// x1 - x0.
Tensor target_field(const Tensor& x0, const Tensor& x1);

// Random quantities of one flow-matching step.
struct FlowDraws {
  Tensor x0;                  // N(0, I), shape of x1
  std::vector<double> t;      // U[0,1], one per row
  ConditionTable conds;       // rows replaced by all-MASK with probability uncond_p
};
FlowDraws draw_flow_inputs(const Tensor& x1, const ConditionTable& conds, double uncond_p, Rng& rng);
// Mean over rows of the squared norm of v(x_t, t, s) - (x1 - x0).
Tensor fm_loss(const VelocityField& field, const Tensor& x1, const FlowDraws& draws);
Tensor fm_loss(const VelocityField& field, const Tensor& x1, const ConditionTable& conds, double uncond_p, Rng& rng);

// (1-w) v(x,t,MASK) + w v(x,t,s). w == 1 and w == 0 skip the unused branch.
Tensor cfg_field(const VelocityField& field, const Tensor& x, std::span<const double> t, const ConditionTable& conds,
                 double w);

struct OdeOptions {
  std::size_t steps = 100;
  Integrator integrator = Integrator::Euler;
  double cfg_weight = 1.0;
};
// Integrates dx/dt = cfg_field(...) from t=0 to t=1 on the grid t_k = k/steps.
// Throws NumericalError (carrying the step index) on a non-finite state.
Tensor integrate(const VelocityField& field, const Tensor& x0, const ConditionTable& conds, const OdeOptions& options);
// Draws x0 ~ N(0, I) with shape [n, T, D] and integrates under the network's config.
Tensor sample_ode(const FlowNetwork& net, const ConditionTable& conds, Rng& rng);

struct FlowTrainOptions {
  std::size_t epochs = 500;
  std::size_t batch_size = 128;
  double lr = 1e-3;
  double weight_decay = 2.5e-5;
  std::size_t warmup_epochs = 50;
};

// Targets: either fixed points (var undefined) or a diagonal Gaussian per row
// from which a fresh x1 = mu + sqrt(var) * noise is drawn every batch.
struct LatentTargets {
  Tensor mu;
  Tensor var;
};
LatentTargets encode_corpus(const VaeModel& vae, const Tensor& x, const ConditionTable& conds,
                            std::size_t chunk = 512);

struct FlowEpochLoss {
  std::size_t epoch = 0;
  double loss = 0.0;
};
std::vector<FlowEpochLoss> train_flow(FlowNetwork& net, const LatentTargets& targets, const ConditionTable& conds,
                                      const FlowTrainOptions& options, Rng& rng, AdamW* optimizer = nullptr);

// Checks that the flow network was built for this VAE's latent grid.
void check_compatible(const VaeModel& vae, const FlowNetwork& net, const BlockLayout& layout);

// Flow samples decoded to max-abs space, genes in layout order, scale factors attached.
ExpressionMatrix generate_scaled(const VaeModel& vae, const FlowNetwork& net, const BlockLayout& layout,
                                 const std::vector<double>& scale_factors, const ConditionTable& conds,
                                 std::vector<std::string> cell_ids, Rng& rng);
// generate_scaled followed by unscaling to depth-normalized space.
ExpressionMatrix generate(const VaeModel& vae, const FlowNetwork& net, const BlockLayout& layout,
                          const std::vector<double>& scale_factors, const ConditionTable& conds,
                          std::vector<std::string> cell_ids, Rng& rng);
// Baseline: decode z ~ N(0, I) directly, skipping the flow.
ExpressionMatrix decode_prior_scaled(const VaeModel& vae, const BlockLayout& layout,
                                     const std::vector<double>& scale_factors, const ConditionTable& conds,
                                     std::vector<std::string> cell_ids, Rng& rng);

Checkpoint flow_checkpoint(const FlowNetwork& net, const AdamW* optimizer, const nlohmann::json& extra);
std::unique_ptr<FlowNetwork> flow_from_checkpoint(const Checkpoint& ckpt);

}  // namespace blockflow
