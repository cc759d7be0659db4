#include "blockflow/flow.hpp"

#include <algorithm>
#include <cmath>

namespace blockflow {

using nlohmann::json;

void FlowConfig::validate() const {
  if (tokens == 0 || token_dim == 0 || width == 0 || heads == 0 || ff_mult == 0) {
    throw ValidationError("flow config: all extents must be positive");
  }
  if (width % heads != 0) throw ValidationError("flow config: width must be divisible by heads");
  if (ode_steps < 1) throw ValidationError("flow config: ode_steps must be >= 1");
  if (!(cfg_weight >= 0.0) || !std::isfinite(cfg_weight)) throw ValidationError("flow config: cfg_weight must be >= 0");
  if (!(uncond_p >= 0.0 && uncond_p <= 1.0)) throw ValidationError("flow config: uncond_p must lie in [0,1]");
  if (!(mask_p >= 0.0 && mask_p <= 1.0)) throw ValidationError("flow config: mask_p must lie in [0,1]");
}

json FlowConfig::to_json() const {
  return {{"tokens", tokens},
          {"token_dim", token_dim},
          {"n_blocks", n_blocks},
          {"width", width},
          {"heads", heads},
          {"ff_mult", ff_mult},
          {"ode_steps", ode_steps},
          {"cfg_weight", cfg_weight},
          {"uncond_p", uncond_p},
          {"mask_p", mask_p},
          {"integrator", integrator == Integrator::Euler ? "euler" : "heun"}};
}

FlowConfig FlowConfig::from_json(const json& j) {
  FlowConfig c;
  c.tokens = j.value("tokens", c.tokens);
  c.token_dim = j.value("token_dim", c.token_dim);
  c.n_blocks = j.value("n_blocks", c.n_blocks);
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.ff_mult = j.value("ff_mult", c.ff_mult);
  c.ode_steps = j.value("ode_steps", c.ode_steps);
  c.cfg_weight = j.value("cfg_weight", c.cfg_weight);
  c.uncond_p = j.value("uncond_p", c.uncond_p);
  c.mask_p = j.value("mask_p", c.mask_p);
  std::string integ = j.value("integrator", std::string("euler"));
  if (integ == "euler") {
    c.integrator = Integrator::Euler;
  } else if (integ == "heun") {
    c.integrator = Integrator::Heun;
  } else {
    throw ValidationError("flow config: unknown integrator '" + integ + "'");
  }
  c.validate();
  return c;
}

FlowNetwork::FlowNetwork(const FlowConfig& config, const ConditionSchema& schema, std::uint64_t seed)
    : config_(config), schema_(schema) {
  config_.validate();
  const std::size_t e = config.width, d = config.token_dim, l = config.tokens;
  Rng rng(seed);
  embedder_ = ConditionEmbedder(schema, e, true, rng, params_, "flow.cond");
  w_in_ = params_.add("flow.in.w", init_xavier(rng, d, e));
  b_in_ = params_.add("flow.in.b", init_zeros({e}));
  std::vector<double> pos(l * e);
  for (double& x : pos) x = 0.02 * rng.normal();
  pos_ = params_.add("flow.in.pos", Tensor::parameter({l, e}, std::move(pos)));
  stack_ = AdaLNStack(config.n_blocks, BlockConfig{e, config.heads, config.ff_mult}, rng, params_, "flow.blk");
  w_out_ = params_.add("flow.out.w", init_xavier(rng, e, d));
  b_out_ = params_.add("flow.out.b", init_zeros({d}));
}

Tensor FlowNetwork::velocity(const Tensor& x, std::span<const double> t, const ConditionTable& conds) const {
  if (x.rank() != 3 || x.dim(1) != config_.tokens || x.dim(2) != config_.token_dim) {
    throw DimensionError("flow: input " + shape_str(x.shape()) + " does not match [N, " + std::to_string(config_.tokens) +
                         ", " + std::to_string(config_.token_dim) + "]");
  }
  if (conds.n_rows != x.dim(0) || t.size() != x.dim(0)) throw DimensionError("flow: conditions/time not aligned with batch");
  conds.validate(schema_);
  Tensor cond = embedder_.embed(conds, t);
  Tensor h = add(linear(x, w_in_, b_in_), pos_);
  h = layernorm(stack_.forward(h, cond));
  return linear(h, w_out_, b_out_);
}

void FlowNetwork::load_tensors(const std::map<std::string, Tensor>& tensors) {
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

// ---------------------------------------------------------------- path

namespace {

void check_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// [N] times -> [N, 1, ..., 1] matching x's rank.
Tensor row_column(std::span<const double> t, const Tensor& like) {
  Shape s(like.rank(), 1);
  s[0] = t.size();
  return Tensor::from(s, std::vector<double>(t.begin(), t.end()));
}

}  // namespace

Tensor affine_point(const Tensor& x0, const Tensor& x1, std::span<const double> t) {
  check_same(x0, x1, "affine_point");
  if (t.size() != x0.dim(0)) throw DimensionError("affine_point: one t per row required");
  for (double v : t) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("affine_point: t = " + std::to_string(v) + " outside [0,1]");
  }
  // Anchor at the nearer endpoint: exact at t = 0, t = 1 and whenever x0 == x1.
  std::vector<double> lo(t.size()), rest(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    lo[i] = t[i] <= 0.5 ? 1.0 : 0.0;
    rest[i] = 1.0 - t[i];
  }
  Tensor d = sub(x1, x0);
  Tensor from0 = add(x0, mul(d, row_column(t, x0)));
  Tensor from1 = sub(x1, mul(d, row_column(rest, x0)));
  Tensor m = row_column(lo, x0);
  return add(mul(from0, m), mul(from1, add_scalar(neg(m), 1.0)));
}

Tensor affine_point(const Tensor& x0, const Tensor& x1, double t) {
  std::vector<double> ts(x0.dim(0), t);
  return affine_point(x0, x1, ts);
}

Tensor target_field(const Tensor& x0, const Tensor& x1) {
  check_same(x0, x1, "target_field");
  return sub(x1, x0);
}

FlowDraws draw_flow_inputs(const Tensor& x1, const ConditionTable& conds, double uncond_p, Rng& rng) {
  const std::size_t n = x1.dim(0);
  if (conds.n_rows != n) throw DimensionError("flow draws: conditions not aligned with batch");
  FlowDraws d;
  d.x0 = rng.normal_tensor(x1.shape());
  d.t.resize(n);
  for (double& v : d.t) v = rng.uniform();
  d.conds = conds;
  for (std::size_t r = 0; r < n; ++r) {
    if (rng.bernoulli(uncond_p)) {
      for (std::size_t k = 0; k < conds.n_types; ++k) d.conds.at(r, k) = kMaskIndex;
    }
  }
  return d;
}

Tensor fm_loss(const VelocityField& field, const Tensor& x1, const FlowDraws& draws) {
  Tensor xt = affine_point(draws.x0, x1, draws.t);
  Tensor v = field.velocity(xt, draws.t, draws.conds);
  check_same(v, x1, "fm_loss");
  Tensor diff = sub(v, target_field(draws.x0, x1));
  return mul_scalar(sum(square(diff)), 1.0 / static_cast<double>(x1.dim(0)));
}

Tensor fm_loss(const VelocityField& field, const Tensor& x1, const ConditionTable& conds, double uncond_p, Rng& rng) {
  return fm_loss(field, x1, draw_flow_inputs(x1, conds, uncond_p, rng));
}

Tensor cfg_field(const VelocityField& field, const Tensor& x, std::span<const double> t, const ConditionTable& conds,
                 double w) {
  if (!(w >= 0.0)) throw ValidationError("cfg_field: guidance weight must be >= 0");
  if (w == 1.0) return field.velocity(x, t, conds);
  Tensor uncond = field.velocity(x, t, ConditionTable::all_mask(conds.n_rows, conds.n_types));
  if (w == 0.0) return uncond;
  Tensor cond = field.velocity(x, t, conds);
  return add(mul_scalar(uncond, 1.0 - w), mul_scalar(cond, w));
}

// ---------------------------------------------------------------- sampling

Tensor integrate(const VelocityField& field, const Tensor& x0, const ConditionTable& conds, const OdeOptions& options) {
  if (options.steps < 1) throw ValidationError("integrate: steps must be >= 1");
  NoGradGuard guard;
  const std::size_t n = x0.dim(0);
  const double h = 1.0 / static_cast<double>(options.steps);
  std::vector<double> x(x0.values().begin(), x0.values().end());
  std::vector<double> ts(n);
  auto eval = [&](const std::vector<double>& state, double t) {
    std::fill(ts.begin(), ts.end(), t);
    Tensor v = cfg_field(field, Tensor::from(x0.shape(), state), ts, conds, options.cfg_weight);
    if (v.shape() != x0.shape()) throw DimensionError("integrate: field returned " + shape_str(v.shape()));
    return std::vector<double>(v.values().begin(), v.values().end());
  };
  for (std::size_t k = 0; k < options.steps; ++k) {
    const double t = static_cast<double>(k) * h;
    std::vector<double> v = eval(x, t);
    if (options.integrator == Integrator::Euler) {
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += h * v[i];
    } else {
      std::vector<double> pred(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) pred[i] = x[i] + h * v[i];
      std::vector<double> v2 = eval(pred, static_cast<double>(k + 1) * h);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += 0.5 * h * (v[i] + v2[i]);
    }
    for (double xi : x) {
      if (!std::isfinite(xi)) throw NumericalError("integrate: non-finite state at step " + std::to_string(k), k);
    }
  }
  return Tensor::from(x0.shape(), std::move(x));
}

Tensor sample_ode(const FlowNetwork& net, const ConditionTable& conds, Rng& rng) {
  const FlowConfig& c = net.config();
  Tensor x0 = rng.normal_tensor({conds.n_rows, c.tokens, c.token_dim});
  return integrate(net, x0, conds, OdeOptions{c.ode_steps, c.integrator, c.cfg_weight});
}

// ---------------------------------------------------------------- training

LatentTargets encode_corpus(const VaeModel& vae, const Tensor& x, const ConditionTable& conds, std::size_t chunk) {
  NoGradGuard guard;
  const std::size_t n = x.dim(0);
  std::vector<double> mu, var;
  for (std::size_t start = 0; start < n; start += chunk) {
    std::size_t stop = std::min(n, start + chunk);
    std::vector<std::size_t> rows(stop - start);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = start + i;
    LatentCode code = vae.encode_stats(slice_rows(x, start, stop), conds.select_rows(rows));
    mu.insert(mu.end(), code.mu.values().begin(), code.mu.values().end());
    var.insert(var.end(), code.var.values().begin(), code.var.values().end());
  }
  Shape s{n, vae.config().n_blocks, vae.config().latent};
  return {Tensor::from(s, std::move(mu)), Tensor::from(s, std::move(var))};
}

std::vector<FlowEpochLoss> train_flow(FlowNetwork& net, const LatentTargets& targets, const ConditionTable& conds,
                                      const FlowTrainOptions& options, Rng& rng, AdamW* optimizer) {
  const std::size_t n = targets.mu.dim(0);
  if (conds.n_rows != n) throw DimensionError("train_flow: conditions not aligned with latents");
  if (targets.var.defined() && targets.var.shape() != targets.mu.shape()) {
    throw DimensionError("train_flow: variance shape differs from mean shape");
  }
  if (options.batch_size == 0 || options.epochs == 0) throw ValidationError("train_flow: epochs and batch size must be positive");
  std::unique_ptr<AdamW> own;
  if (!optimizer) {
    own = std::make_unique<AdamW>(net.params(), AdamWConfig{.weight_decay = options.weight_decay});
    optimizer = own.get();
  }
  const FlowConfig& cfg = net.config();
  std::vector<FlowEpochLoss> trace;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    double lr = options.lr * warmup_factor(epoch, options.warmup_epochs);
    std::vector<std::size_t> order = rng.permutation(n);
    FlowEpochLoss acc{epoch, 0.0};
    for (std::size_t start = 0; start < n; start += options.batch_size) {
      std::size_t stop = std::min(n, start + options.batch_size);
      std::span<const std::size_t> rows(order.data() + start, stop - start);
      Tensor x1 = take_rows(targets.mu, rows);
      if (targets.var.defined()) {
        Tensor var = take_rows(targets.var, rows);
        Tensor noise = rng.normal_tensor(x1.shape());
        std::vector<double> z(x1.numel());
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = x1.values()[i] + std::sqrt(var.values()[i]) * noise.values()[i];
        x1 = Tensor::from(x1.shape(), std::move(z));
      }
      ConditionTable c = mask_conditions(conds.select_rows(rows), cfg.mask_p, rng);
      Tensor loss = fm_loss(net, x1, c, cfg.uncond_p, rng);
      double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericalError("train_flow: non-finite loss at epoch " + std::to_string(epoch), epoch);
      }
      net.params().zero_grad();
      backward(loss);
      optimizer->step(lr);
      acc.loss += value * static_cast<double>(rows.size()) / static_cast<double>(n);
    }
    if (!net.params().all_finite()) {
      throw NumericalError("train_flow: non-finite parameters after epoch " + std::to_string(epoch), epoch);
    }
    trace.push_back(acc);
  }
  net.mark_trained();
  return trace;
}

// ---------------------------------------------------------------- generation

void check_compatible(const VaeModel& vae, const FlowNetwork& net, const BlockLayout& layout) {
  const VaeConfig& v = vae.config();
  const FlowConfig& f = net.config();
  if (v.n_blocks != layout.n_blocks || v.block_size != layout.block_size) {
    throw ValidationError("layout (L=" + std::to_string(layout.n_blocks) + ", K=" + std::to_string(layout.block_size) +
                          ") does not match the VAE (L=" + std::to_string(v.n_blocks) +
                          ", K=" + std::to_string(v.block_size) + ")");
  }
  auto mask = layout.slot_mask();
  auto vm = vae.slot_mask().values();
  if (!std::equal(mask.begin(), mask.end(), vm.begin(), vm.end())) {
    throw ValidationError("layout padding pattern does not match the VAE checkpoint");
  }
  if (f.tokens != v.n_blocks || f.token_dim != v.latent) {
    throw ValidationError("flow latent grid [" + std::to_string(f.tokens) + ", " + std::to_string(f.token_dim) +
                          "] does not match the VAE [" + std::to_string(v.n_blocks) + ", " + std::to_string(v.latent) + "]");
  }
  if (!(vae.schema() == net.schema())) throw ValidationError("flow and VAE were trained with different condition schemas");
}

namespace {

template <class Sampler>
ExpressionMatrix decode_chunks(const VaeModel& vae, const BlockLayout& layout, const std::vector<double>& scale_factors,
                               const ConditionTable& conds, std::vector<std::string> cell_ids, Sampler&& sample) {
  if (cell_ids.size() != conds.n_rows) throw DimensionError("generate: one cell id per condition row required");
  if (scale_factors.size() != layout.gene_ids.size()) throw DimensionError("generate: one scale factor per gene required");
  NoGradGuard guard;
  const std::size_t n = conds.n_rows, chunk = 512;
  const VaeConfig& v = vae.config();
  std::vector<double> out;
  out.reserve(n * v.n_blocks * v.block_size);
  for (std::size_t start = 0; start < n; start += chunk) {
    std::size_t stop = std::min(n, start + chunk);
    std::vector<std::size_t> rows(stop - start);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = start + i;
    ConditionTable c = conds.select_rows(rows);
    Tensor x = vae.decode(sample(c), c);
    out.insert(out.end(), x.values().begin(), x.values().end());
  }
  Tensor blocks = Tensor::from({n, v.n_blocks, v.block_size}, std::move(out));
  return with_scale(scatter_from_blocks(blocks, layout, std::move(cell_ids)), scale_factors);
}

}  // namespace

ExpressionMatrix generate_scaled(const VaeModel& vae, const FlowNetwork& net, const BlockLayout& layout,
                                 const std::vector<double>& scale_factors, const ConditionTable& conds,
                                 std::vector<std::string> cell_ids, Rng& rng) {
  check_compatible(vae, net, layout);
  if (!vae.trained() || !net.trained()) throw ContractError("generate: both models must be trained");
  return decode_chunks(vae, layout, scale_factors, conds, std::move(cell_ids),
                       [&](const ConditionTable& c) { return sample_ode(net, c, rng); });
}

ExpressionMatrix generate(const VaeModel& vae, const FlowNetwork& net, const BlockLayout& layout,
                          const std::vector<double>& scale_factors, const ConditionTable& conds,
                          std::vector<std::string> cell_ids, Rng& rng) {
  return unscale(generate_scaled(vae, net, layout, scale_factors, conds, std::move(cell_ids), rng));
}

ExpressionMatrix decode_prior_scaled(const VaeModel& vae, const BlockLayout& layout,
                                     const std::vector<double>& scale_factors, const ConditionTable& conds,
                                     std::vector<std::string> cell_ids, Rng& rng) {
  const VaeConfig& v = vae.config();
  return decode_chunks(vae, layout, scale_factors, conds, std::move(cell_ids), [&](const ConditionTable& c) {
    return rng.normal_tensor({c.n_rows, v.n_blocks, v.latent});
  });
}

// ---------------------------------------------------------------- persistence

Checkpoint flow_checkpoint(const FlowNetwork& net, const AdamW* optimizer, const json& extra) {
  Checkpoint c;
  c.component = "flow";
  c.config = extra;
  c.config["flow"] = net.config().to_json();
  c.config["schema"] = net.schema().to_json();
  c.config["trained"] = net.trained();
  c.config["optimizer_steps"] = optimizer ? optimizer->steps() : 0;
  for (const auto& [name, t] : net.params().items()) c.tensors.emplace_back(name, t.detach());
  if (optimizer) {
    for (auto& kv : optimizer->state()) c.tensors.push_back(std::move(kv));
  }
  return c;
}

std::unique_ptr<FlowNetwork> flow_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.component != "flow") throw ValidationError("expected a flow checkpoint, found '" + ckpt.component + "'");
  try {
    FlowConfig cfg = FlowConfig::from_json(ckpt.config.at("flow"));
    ConditionSchema schema = ConditionSchema::from_json(ckpt.config.at("schema"));
    auto net = std::make_unique<FlowNetwork>(cfg, schema, 0);
    net->load_tensors(ckpt.tensor_map());
    if (ckpt.config.value("trained", false)) net->mark_trained();
    return net;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("flow checkpoint config: ") + e.what());
  }
}

}  // namespace blockflow
