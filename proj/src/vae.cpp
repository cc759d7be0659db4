#include "blockflow/vae.hpp"

#include <algorithm>
#include <cmath>

namespace blockflow {

using nlohmann::json;

void VaeConfig::validate() const {
  if (width == 0 || latent == 0 || heads == 0 || ff_mult == 0 || n_blocks == 0 || block_size == 0) {
    throw ValidationError("vae config: all extents must be positive");
  }
  if (width % heads != 0) throw ValidationError("vae config: width must be divisible by heads");
  if (!(kl_weight >= 0.0)) throw ValidationError("vae config: kl_weight must be >= 0");
  if (!(mask_p >= 0.0 && mask_p <= 1.0)) throw ValidationError("vae config: mask_p must lie in [0,1]");
}

json VaeConfig::to_json() const {
  return {{"width", width},         {"latent", latent},       {"enc_blocks", enc_blocks}, {"dec_blocks", dec_blocks},
          {"heads", heads},         {"ff_mult", ff_mult},     {"n_blocks", n_blocks},     {"block_size", block_size},
          {"kl_weight", kl_weight}, {"mask_p", mask_p}};
}

VaeConfig VaeConfig::from_json(const json& j) {
  VaeConfig c;
  c.width = j.value("width", c.width);
  c.latent = j.value("latent", c.latent);
  c.enc_blocks = j.value("enc_blocks", c.enc_blocks);
  c.dec_blocks = j.value("dec_blocks", c.dec_blocks);
  c.heads = j.value("heads", c.heads);
  c.ff_mult = j.value("ff_mult", c.ff_mult);
  c.n_blocks = j.value("n_blocks", c.n_blocks);
  c.block_size = j.value("block_size", c.block_size);
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  c.mask_p = j.value("mask_p", c.mask_p);
  c.validate();
  return c;
}

namespace {

Tensor position_table(Rng& rng, std::size_t tokens, std::size_t width) {
  std::vector<double> v(tokens * width);
  for (double& x : v) x = 0.02 * rng.normal();
  return Tensor::parameter({tokens, width}, std::move(v));
}

}  // namespace

VaeModel::VaeModel(const VaeConfig& config, const ConditionSchema& schema, std::vector<double> slot_mask,
                   std::uint64_t seed)
    : config_(config), schema_(schema) {
  config_.validate();
  const std::size_t e = config.width, d = config.latent, l = config.n_blocks, k = config.block_size;
  if (slot_mask.size() != l * k) throw DimensionError("vae: slot mask needs L*K entries");
  slot_mask_ = Tensor::from({1, l, k}, std::move(slot_mask));
  Rng rng(seed);
  BlockConfig bc{e, config.heads, config.ff_mult};
  embedder_ = ConditionEmbedder(schema, e, false, rng, params_, "vae.cond");
  w_in_ = params_.add("vae.in.w", init_xavier(rng, k, e));
  b_in_ = params_.add("vae.in.b", init_zeros({e}));
  pos_enc_ = params_.add("vae.in.pos", position_table(rng, l, e));
  encoder_ = AdaLNStack(config.enc_blocks, bc, rng, params_, "vae.enc");
  w_mu_ = params_.add("vae.mu.w", init_xavier(rng, e, d));
  b_mu_ = params_.add("vae.mu.b", init_zeros({d}));
  w_var_ = params_.add("vae.var.w", init_xavier(rng, e, d));
  b_var_ = params_.add("vae.var.b", init_zeros({d}));
  w_din_ = params_.add("vae.din.w", init_xavier(rng, d, e));
  b_din_ = params_.add("vae.din.b", init_zeros({e}));
  pos_dec_ = params_.add("vae.din.pos", position_table(rng, l, e));
  decoder_ = AdaLNStack(config.dec_blocks, bc, rng, params_, "vae.dec");
  w_out_ = params_.add("vae.out.w", init_xavier(rng, e, k));
  b_out_ = params_.add("vae.out.b", init_zeros({k}));
}

void VaeModel::check_input(const Tensor& x, const ConditionTable& conds) const {
  if (x.rank() != 3 || x.dim(1) != config_.n_blocks || x.dim(2) != config_.block_size) {
    throw DimensionError("vae: input " + shape_str(x.shape()) + " does not match [N, " + std::to_string(config_.n_blocks) +
                         ", " + std::to_string(config_.block_size) + "]");
  }
  if (conds.n_rows != x.dim(0)) throw DimensionError("vae: condition rows do not match batch size");
  conds.validate(schema_);
}

LatentCode VaeModel::encode_stats(const Tensor& x, const ConditionTable& conds) const {
  check_input(x, conds);
  Tensor cond = embedder_.embed(conds);
  Tensor h = add(linear(x, w_in_, b_in_), pos_enc_);
  h = layernorm(encoder_.forward(h, cond));
  LatentCode code;
  code.mu = linear(h, w_mu_, b_mu_);
  code.var = add_scalar(softplus(linear(h, w_var_, b_var_)), kVarianceFloor);
  return code;
}

LatentCode VaeModel::encode(const Tensor& x, const ConditionTable& conds, Rng& rng) const {
  LatentCode code = encode_stats(x, conds);
  Tensor noise = rng.normal_tensor(code.mu.shape());
  code.z = add(code.mu, mul(sqrt(code.var), noise));
  for (double v : code.z.values()) {
    if (!std::isfinite(v)) throw NumericalError("vae: non-finite latent sample", 0);
  }
  return code;
}

Tensor VaeModel::decode(const Tensor& z, const ConditionTable& conds) const {
  if (z.rank() != 3 || z.dim(1) != config_.n_blocks || z.dim(2) != config_.latent) {
    throw DimensionError("vae: latent " + shape_str(z.shape()) + " does not match [N, " +
                         std::to_string(config_.n_blocks) + ", " + std::to_string(config_.latent) + "]");
  }
  if (conds.n_rows != z.dim(0)) throw DimensionError("vae: condition rows do not match batch size");
  conds.validate(schema_);
  Tensor cond = embedder_.embed(conds);
  Tensor h = add(linear(z, w_din_, b_din_), pos_dec_);
  h = layernorm(decoder_.forward(h, cond));
  return mul(sigmoid(linear(h, w_out_, b_out_)), slot_mask_);
}

std::vector<std::pair<std::string, Tensor>> VaeModel::named_tensors() const { return params_.items(); }

void VaeModel::load_tensors(const std::map<std::string, Tensor>& tensors) {
  for (const auto& [name, t] : params_.items()) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError("checkpoint is missing parameter " + name);
    if (it->second.shape() != t.shape()) {
      throw DimensionError("checkpoint parameter " + name + " has shape " + shape_str(it->second.shape()) +
                           ", model expects " + shape_str(t.shape()));
    }
    Tensor dst = t;
    auto src = it->second.values();
    std::copy(src.begin(), src.end(), dst.mutable_values().begin());
  }
}

Tensor kl_divergence(const LatentCode& code) {
  Tensor terms = add_scalar(add(sub(code.var, log(code.var)), square(code.mu)), -1.0);
  return mul_scalar(mean(terms), 0.5);
}

Tensor reconstruction_loss(const Tensor& x_hat, const Tensor& x, const Tensor& mask) {
  if (x_hat.shape() != x.shape()) {
    throw DimensionError("reconstruction_loss: " + shape_str(x_hat.shape()) + " vs " + shape_str(x.shape()));
  }
  Tensor diff = mul(sub(x_hat, x), mask);
  double real_slots = 0.0;
  for (double m : mask.values()) real_slots += m;
  double count = real_slots * static_cast<double>(x.numel() / mask.numel());
  return mul_scalar(sum(square(diff)), 1.0 / count);
}

VaeLoss vae_loss(const VaeModel& model, const Tensor& x, const ConditionTable& conds, double kl_weight, Rng& rng) {
  LatentCode code = model.encode(x, conds, rng);
  Tensor x_hat = model.decode(code.z, conds);
  VaeLoss out;
  out.recon = reconstruction_loss(x_hat, x, model.slot_mask());
  out.kl = kl_divergence(code);
  out.total = kl_weight > 0.0 ? add(out.recon, mul_scalar(out.kl, kl_weight)) : out.recon;
  return out;
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  std::size_t row = t.numel() / t.dim(0);
  Shape s = t.shape();
  s[0] = end - begin;
  auto v = t.values();
  return Tensor::from(s, std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(begin * row),
                                             v.begin() + static_cast<std::ptrdiff_t>(end * row)));
}

Tensor take_rows(const Tensor& t, std::span<const std::size_t> rows) {
  std::size_t row = t.numel() / t.dim(0);
  Shape s = t.shape();
  s[0] = rows.size();
  auto v = t.values();
  std::vector<double> out;
  out.reserve(rows.size() * row);
  for (std::size_t r : rows) {
    if (r >= t.dim(0)) throw DimensionError("take_rows: row out of range");
    out.insert(out.end(), v.begin() + static_cast<std::ptrdiff_t>(r * row), v.begin() + static_cast<std::ptrdiff_t>((r + 1) * row));
  }
  return Tensor::from(s, std::move(out));
}

std::vector<EpochLoss> train_vae(VaeModel& model, const Tensor& data, const ConditionTable& conds,
                                 const TrainOptions& options, Rng& rng, AdamW* optimizer) {
  const std::size_t n = data.dim(0);
  if (conds.n_rows != n) throw DimensionError("train_vae: conditions not aligned with data");
  if (options.batch_size == 0 || options.epochs == 0) throw ValidationError("train_vae: epochs and batch size must be positive");
  std::unique_ptr<AdamW> own;
  if (!optimizer) {
    own = std::make_unique<AdamW>(model.params(), AdamWConfig{.weight_decay = options.weight_decay});
    optimizer = own.get();
  }
  const double kl_target = model.config().kl_weight;
  std::vector<EpochLoss> trace;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    double ramp = warmup_factor(epoch, options.warmup_epochs);
    double lr = options.lr * ramp;
    double kl_weight = kl_target * ramp;
    std::vector<std::size_t> order = rng.permutation(n);
    EpochLoss acc{epoch, 0.0, 0.0, 0.0};
    for (std::size_t start = 0; start < n; start += options.batch_size) {
      std::size_t stop = std::min(n, start + options.batch_size);
      std::span<const std::size_t> rows(order.data() + start, stop - start);
      Tensor x = take_rows(data, rows);
      ConditionTable c = mask_conditions(conds.select_rows(rows), model.config().mask_p, rng);
      VaeLoss loss = vae_loss(model, x, c, kl_weight, rng);
      double total = loss.total.item();
      if (!std::isfinite(total)) {
        throw NumericalError("train_vae: non-finite loss at epoch " + std::to_string(epoch), epoch);
      }
      model.params().zero_grad();
      backward(loss.total);
      optimizer->step(lr);
      double w = static_cast<double>(rows.size()) / static_cast<double>(n);
      acc.total += w * total;
      acc.recon += w * loss.recon.item();
      acc.kl += w * loss.kl.item();
    }
    if (!model.params().all_finite()) {
      throw NumericalError("train_vae: non-finite parameters after epoch " + std::to_string(epoch), epoch);
    }
    trace.push_back(acc);
  }
  model.mark_trained();
  return trace;
}

Tensor transfer(const VaeModel& model, const Tensor& x, const ConditionTable& source, const ConditionTable& target,
                Rng& rng) {
  if (!model.trained()) throw ContractError("transfer: model has not been trained");
  if (source.n_rows != target.n_rows) throw DimensionError("transfer: source and target tables differ in length");
  NoGradGuard guard;
  LatentCode code = model.encode(x, source, rng);
  return model.decode(code.z, target);
}

Checkpoint vae_checkpoint(const VaeModel& model, const AdamW* optimizer, const json& extra) {
  Checkpoint c;
  c.component = "vae";
  c.config = extra;
  c.config["vae"] = model.config().to_json();
  c.config["schema"] = model.schema().to_json();
  auto mask = model.slot_mask().values();
  c.config["slot_mask"] = std::vector<double>(mask.begin(), mask.end());
  c.config["trained"] = model.trained();
  c.config["optimizer_steps"] = optimizer ? optimizer->steps() : 0;
  for (const auto& [name, t] : model.named_tensors()) c.tensors.emplace_back(name, t.detach());
  if (optimizer) {
    for (auto& kv : optimizer->state()) c.tensors.push_back(std::move(kv));
  }
  return c;
}

std::unique_ptr<VaeModel> vae_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.component != "vae") throw ValidationError("expected a vae checkpoint, found '" + ckpt.component + "'");
  try {
    VaeConfig cfg = VaeConfig::from_json(ckpt.config.at("vae"));
    ConditionSchema schema = ConditionSchema::from_json(ckpt.config.at("schema"));
    auto mask = ckpt.config.at("slot_mask").get<std::vector<double>>();
    auto model = std::make_unique<VaeModel>(cfg, schema, std::move(mask), 0);
    model->load_tensors(ckpt.tensor_map());
    if (ckpt.config.value("trained", false)) model->mark_trained();
    return model;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("vae checkpoint config: ") + e.what());
  }
}

}  // namespace blockflow
