#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include <nlohmann/json.hpp>

#include "blockflow/checkpoint.hpp"
#include "blockflow/conditioning.hpp"
#include "blockflow/optim.hpp"
#include "blockflow/rng.hpp"
#include "blockflow/tensor.hpp"
#include "blockflow/transformer.hpp"

namespace blockflow {

struct VaeConfig {
  std::size_t width = 32;       // e
  std::size_t latent = 8;       // d, per block token
  std::size_t enc_blocks = 2;
  std::size_t dec_blocks = 2;
  std::size_t heads = 2;
  std::size_t ff_mult = 2;
  std::size_t n_blocks = 7;     // L
  std::size_t block_size = 32;  // K
  double kl_weight = 1e-3;
  double mask_p = 0.6;

  void validate() const;
  nlohmann::json to_json() const;
  static VaeConfig from_json(const nlohmann::json& j);
};

struct TrainOptions {
  std::size_t epochs = 300;
  std::size_t batch_size = 128;
  double lr = 1e-3;
  double weight_decay = 2.5e-5;
  std::size_t warmup_epochs = 50;
};

struct LatentCode {
  Tensor mu;   // [N, L, d]
  Tensor var;  // [N, L, d], > 0
  Tensor z;    // [N, L, d]
};

// Floor added after softplus on the variance head.
inline constexpr double kVarianceFloor = 1e-6;

class VaeModel {
 public:
  // `slot_mask` has L*K entries, 0 marking padding slots.
  VaeModel(const VaeConfig& config, const ConditionSchema& schema, std::vector<double> slot_mask, std::uint64_t seed);
  VaeModel(const VaeModel&) = delete;
  VaeModel& operator=(const VaeModel&) = delete;

  // x [N, L, K] in [0,1]. z = mu + sqrt(var) * noise, noise drawn from rng.
  LatentCode encode(const Tensor& x, const ConditionTable& conds, Rng& rng) const;
  // Deterministic part of encode (mu, var only; z left undefined).
  LatentCode encode_stats(const Tensor& x, const ConditionTable& conds) const;
  // z [N, L, d] -> x_hat [N, L, K] in (0,1), padding slots zeroed.
  Tensor decode(const Tensor& z, const ConditionTable& conds) const;

  const VaeConfig& config() const { return config_; }
  const ConditionSchema& schema() const { return schema_; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }
  const Tensor& slot_mask() const { return slot_mask_; }
  const ConditionEmbedder& embedder() const { return embedder_; }
  const AdaLNStack& encoder() const { return encoder_; }
  const AdaLNStack& decoder() const { return decoder_; }

  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  // Parameter tensors for serialization.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  // Overwrites parameter values in place.
  void load_tensors(const std::map<std::string, Tensor>& tensors);

 private:
  void check_input(const Tensor& x, const ConditionTable& conds) const;

  VaeConfig config_;
  ConditionSchema schema_;
  ParamSet params_;
  Tensor slot_mask_;  // [1, L, K]
  ConditionEmbedder embedder_;
  Tensor w_in_, b_in_, pos_enc_;
  AdaLNStack encoder_;
  Tensor w_mu_, b_mu_, w_var_, b_var_;
  Tensor w_din_, b_din_, pos_dec_;
  AdaLNStack decoder_;
  Tensor w_out_, b_out_;
  bool trained_ = false;
};

// Mean over all N*L*d entries of 0.5 * (-log var + var + mu^2 - 1).
Tensor kl_divergence(const LatentCode& code);
// Mean squared error over non-padding slots. mask broadcasts against x.
Tensor reconstruction_loss(const Tensor& x_hat, const Tensor& x, const Tensor& mask);

struct VaeLoss {
  Tensor total;
  Tensor recon;
  Tensor kl;
};
// recon + kl_weight * kl; with kl_weight == 0 the KL term is left out of the graph.
VaeLoss vae_loss(const VaeModel& model, const Tensor& x, const ConditionTable& conds, double kl_weight, Rng& rng);

struct EpochLoss {
  std::size_t epoch = 0;
  double total = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

// Minibatch AdamW with linear warmup of both the learning rate and the KL
// weight; conditions are masked per entry at config.mask_p each batch.
// Throws NumericalError on a non-finite loss.
std::vector<EpochLoss> train_vae(VaeModel& model, const Tensor& data, const ConditionTable& conds,
                                 const TrainOptions& options, Rng& rng, AdamW* optimizer = nullptr);

// Encode under source conditions, decode under target conditions.
Tensor transfer(const VaeModel& model, const Tensor& x, const ConditionTable& source, const ConditionTable& target,
                Rng& rng);

// Rows [begin, end) of the leading axis.
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end);
// Rows of the leading axis in the given order (no history).
Tensor take_rows(const Tensor& t, std::span<const std::size_t> rows);

Checkpoint vae_checkpoint(const VaeModel& model, const AdamW* optimizer, const nlohmann::json& extra);
// Restores architecture and weights; optimizer state is left in the checkpoint.
std::unique_ptr<VaeModel> vae_from_checkpoint(const Checkpoint& ckpt);

}  // namespace blockflow
