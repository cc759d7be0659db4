#include "blockflow/transformer.hpp"

#include <cmath>

namespace blockflow {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

Tensor adaln(const Tensor& h, const Tensor& gamma, const Tensor& beta) {
  return add(mul(layernorm(h), add_scalar(gamma, 1.0)), beta);
}

AdaLNBlock::AdaLNBlock(const BlockConfig& config, Rng& rng, ParamSet& params, const std::string& prefix)
    : config_(config) {
  const std::size_t e = config.width;
  if (config.heads == 0 || e % config.heads != 0) {
    throw ContractError("width " + std::to_string(e) + " not divisible by heads " + std::to_string(config.heads));
  }
  const std::size_t f = config.ff_mult * e;
  w_mod_ = params.add(prefix + ".mod.w", init_zeros({e, 6 * e}));
  b_mod_ = params.add(prefix + ".mod.b", init_zeros({6 * e}));
  w_qkv_ = params.add(prefix + ".attn.qkv.w", init_xavier(rng, e, 3 * e));
  b_qkv_ = params.add(prefix + ".attn.qkv.b", init_zeros({3 * e}));
  w_o_ = params.add(prefix + ".attn.out.w", init_xavier(rng, e, e));
  b_o_ = params.add(prefix + ".attn.out.b", init_zeros({e}));
  w_ff1_ = params.add(prefix + ".ff.1.w", init_xavier(rng, e, f));
  b_ff1_ = params.add(prefix + ".ff.1.b", init_zeros({f}));
  w_ff2_ = params.add(prefix + ".ff.2.w", init_xavier(rng, f, e));
  b_ff2_ = params.add(prefix + ".ff.2.b", init_zeros({e}));
}

Modulation AdaLNBlock::modulation(const Tensor& cond) const {
  const std::size_t n = cond.dim(0), e = config_.width;
  if (cond.rank() != 2 || cond.dim(1) != e) {
    throw DimensionError("AdaLN: condition vector " + shape_str(cond.shape()) + " does not match width " + std::to_string(e));
  }
  Tensor m = reshape(linear(cond, w_mod_, b_mod_), {n, 1, 6 * e});
  return {slice_lastdim(m, 0, e),     slice_lastdim(m, e, e),     slice_lastdim(m, 2 * e, e),
          slice_lastdim(m, 3 * e, e), slice_lastdim(m, 4 * e, e), slice_lastdim(m, 5 * e, e)};
}

Tensor AdaLNBlock::attention(const Tensor& x) const {
  const std::size_t n = x.dim(0), l = x.dim(1), e = config_.width, h = config_.heads, dh = e / h;
  Tensor qkv = linear(x, w_qkv_, b_qkv_);  // [N, L, 3e]
  auto heads = [&](std::size_t offset) {
    return permute(reshape(slice_lastdim(qkv, offset, e), {n, l, h, dh}), {0, 2, 1, 3});  // [N, H, L, dh]
  };
  Tensor q = heads(0), k = heads(e), v = heads(2 * e);
  Tensor scores = mul_scalar(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor ctx = matmul(softmax_lastdim(scores), v);                       // [N, H, L, dh]
  Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {n, l, e});
  return linear(merged, w_o_, b_o_);
}

Tensor AdaLNBlock::feedforward(const Tensor& x) const {
  return linear(gelu(linear(x, w_ff1_, b_ff1_)), w_ff2_, b_ff2_);
}

Tensor AdaLNBlock::forward(const Tensor& h, const Tensor& cond) const {
  if (h.rank() != 3 || h.dim(2) != config_.width || h.dim(0) != cond.dim(0)) {
    throw DimensionError("AdaLN block: hidden " + shape_str(h.shape()) + " vs condition " + shape_str(cond.shape()));
  }
  Modulation mod = modulation(cond);
  Tensor h1 = add(h, mul(mod.alpha1, attention(adaln(h, mod.gamma1, mod.beta1))));
  return add(h1, mul(mod.alpha2, feedforward(adaln(h1, mod.gamma2, mod.beta2))));
}

AdaLNStack::AdaLNStack(std::size_t depth, const BlockConfig& config, Rng& rng, ParamSet& params,
                       const std::string& prefix) {
  for (std::size_t i = 0; i < depth; ++i) blocks_.emplace_back(config, rng, params, prefix + "." + std::to_string(i));
}

Tensor AdaLNStack::forward(Tensor h, const Tensor& cond) const {
  for (const auto& b : blocks_) h = b.forward(h, cond);
  return h;
}

}  // namespace blockflow
