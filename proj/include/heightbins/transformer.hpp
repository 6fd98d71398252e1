#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "heightbins/nn.hpp"
#include "heightbins/ops.hpp"

namespace heightbins {

/// Pre-norm transformer encoder block: x + MHSA(LN(x)), then x + MLP(LN(x)).
class EncoderBlock {
 public:
  static EncoderBlock create(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t heads,
                             std::size_t mlp_hidden, nn::Rng& rng) {
    if (heads == 0 || dim % heads != 0) {
      throw ConfigError("transformer: embed_dim " + std::to_string(dim) + " not divisible by heads " +
                        std::to_string(heads));
    }
    EncoderBlock b;
    b.heads_ = heads;
    b.ln1_ = nn::LayerNorm::create(store, name + ".ln1", dim);
    b.qkv_ = nn::Linear::create(store, name + ".qkv", dim, 3 * dim, rng);
    b.proj_ = nn::Linear::create(store, name + ".proj", dim, dim, rng);
    b.ln2_ = nn::LayerNorm::create(store, name + ".ln2", dim);
    b.fc1_ = nn::Linear::create(store, name + ".fc1", dim, mlp_hidden, rng);
    b.fc2_ = nn::Linear::create(store, name + ".fc2", mlp_hidden, dim, rng);
    return b;
  }

  /// x: [B, S, d]
  Tensor operator()(const Tensor& x) const {
    Tensor h = add(x, attention(ln1_(x)));
    return add(h, fc2_(gelu(fc1_(ln2_(h)))));
  }

 private:
  Tensor attention(const Tensor& x) const {
    const std::size_t B = x.size(0), S = x.size(1), d = x.size(2), dh = d / heads_;
    Tensor qkv = reshape(qkv_(x), {B, S, 3, heads_, dh});
    qkv = permute(qkv, {2, 0, 3, 1, 4});  // [3, B, h, S, dh]
    auto part = [&](std::size_t i) { return reshape(slice(qkv, 0, i, i + 1), {B, heads_, S, dh}); };
    const Tensor q = part(0), k = part(1), v = part(2);
    Tensor scores = mul_scalar(matmul(q, transpose(k, -1, -2)), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor ctx = matmul(softmax(scores, -1), v);           // [B, h, S, dh]
    ctx = reshape(permute(ctx, {0, 2, 1, 3}), {B, S, d});  // [B, S, d]
    return proj_(ctx);
  }

  std::size_t heads_ = 1;
  nn::LayerNorm ln1_, ln2_;
  nn::Linear qkv_, proj_, fc1_, fc2_;
};

class TransformerEncoder {
 public:
  static TransformerEncoder create(ParameterStore& store, const std::string& name, std::size_t depth, std::size_t dim,
                                   std::size_t heads, std::size_t mlp_hidden, nn::Rng& rng) {
    TransformerEncoder enc;
    for (std::size_t i = 0; i < depth; ++i) {
      enc.blocks_.push_back(EncoderBlock::create(store, name + ".block" + std::to_string(i), dim, heads, mlp_hidden, rng));
    }
    return enc;
  }

  std::size_t depth() const { return blocks_.size(); }

  Tensor operator()(Tensor x) const {
    for (const auto& b : blocks_) x = b(x);
    return x;
  }

 private:
  std::vector<EncoderBlock> blocks_;
};

}  // namespace heightbins
