#pragma once

#include <string>
#include <vector>

#include "blockflow/optim.hpp"
#include "blockflow/rng.hpp"
#include "blockflow/tensor.hpp"

namespace blockflow {

// x [..., in] W [in, out] + b [out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// layernorm(h) * (1 + gamma) + beta; gamma/beta broadcast against h.
Tensor adaln(const Tensor& h, const Tensor& gamma, const Tensor& beta);

struct BlockConfig {
  std::size_t width = 32;  // e
  std::size_t heads = 2;
  std::size_t ff_mult = 2;
};

// The six per-cell modulation chunks, each [N, 1, e].
struct Modulation {
  Tensor alpha1, beta1, gamma1, alpha2, beta2, gamma2;
};

// Pre-norm transformer block over L tokens with AdaLN condition injection:
//   h' = h  + alpha1 * Attention(AdaLN(h, gamma1, beta1))
//   out = h' + alpha2 * FeedForward(AdaLN(h', gamma2, beta2))
// The modulation projection is zero-initialized, so a fresh block is the
// identity map.
class AdaLNBlock {
 public:
  AdaLNBlock(const BlockConfig& config, Rng& rng, ParamSet& params, const std::string& prefix);

  // h [N, L, e], cond [N, e]
  Tensor forward(const Tensor& h, const Tensor& cond) const;
  Modulation modulation(const Tensor& cond) const;
  // Multi-head scaled dot-product self-attention over the token axis.
  Tensor attention(const Tensor& x) const;
  Tensor feedforward(const Tensor& x) const;

  const Tensor& modulation_weight() const { return w_mod_; }
  const Tensor& modulation_bias() const { return b_mod_; }

 private:
  BlockConfig config_;
  Tensor w_mod_, b_mod_;
  Tensor w_qkv_, b_qkv_, w_o_, b_o_;
  Tensor w_ff1_, b_ff1_, w_ff2_, b_ff2_;
};

class AdaLNStack {
 public:
  AdaLNStack() = default;
  AdaLNStack(std::size_t depth, const BlockConfig& config, Rng& rng, ParamSet& params, const std::string& prefix);
  Tensor forward(Tensor h, const Tensor& cond) const;
  const std::vector<AdaLNBlock>& blocks() const { return blocks_; }

 private:
  std::vector<AdaLNBlock> blocks_;
};

}  // namespace blockflow
