#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "heightbins/binset.hpp"
#include "heightbins/errors.hpp"
#include "heightbins/nn.hpp"
#include "heightbins/ops.hpp"
#include "heightbins/regression.hpp"
#include "heightbins/transformer.hpp"

namespace heightbins {

struct HeadConfig {
  std::size_t n_bins = 32;
  std::size_t tokens = 16;  // m
  std::size_t patch_size = 4;
  std::size_t embed_dim = 32;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 64;
  double h_min = 0.0;
  double h_max = 100.0;
  double fg_threshold = 1.0;
  /// Separate foreground/background token sets and the p_fg mask. When off,
  /// a single set of m tokens produces one RAM and one probability map.
  bool head_tail_cut = true;

  /// Learned tokens prepended to the patch sequence: bin token + fg + bg.
  std::size_t learned_tokens() const { return 1 + (head_tail_cut ? 2 : 1) * tokens; }

  void validate() const {
    if (!(h_max > h_min)) {
      throw ConfigError("head: h_max (" + std::to_string(h_max) + ") must exceed h_min (" + std::to_string(h_min) + ")");
    }
    if (n_bins < 1 || tokens < 1 || patch_size < 1 || embed_dim < 1 || heads < 1 || mlp_hidden < 1) {
      throw ConfigError("head: n_bins, tokens, patch_size, embed_dim, heads and mlp_hidden must be positive");
    }
    if (embed_dim % heads != 0) throw ConfigError("head: embed_dim must be divisible by heads");
  }
};

struct HeadOutput {
  BinSet bins;
  Tensor ram_fg;   // [B, m, H, W]; the single RAM when the cut is disabled
  Tensor ram_bg;   // [B, m, H, W]; undefined when the cut is disabled
  Tensor prob_fg;  // [B, N, H, W]
  Tensor prob_bg;  // [B, N, H, W]; undefined when the cut is disabled
  Tensor prob;     // [B, N, H, W]
  Tensor p_fg;     // [B, 1, H, W]; undefined when the cut is disabled
  Tensor height;   // [B, 1, H, W] meters
  /// (p_fg > 0.5) per pixel, [B*H*W]; empty when the cut is disabled.
  std::vector<std::uint8_t> fg_mask;
};

/// Bin-width embedding [B, d] -> BinSet via softmax(fc(e_b)).
inline BinSet compute_bins(const Tensor& bin_embedding, const nn::Linear& fc, const HeadConfig& cfg) {
  return bins_from_widths(softmax(fc(bin_embedding), -1), cfg.h_min, cfg.h_max);
}

/// R[b,k,h,w] = sum_d G[b,k,d] L[b,d,h,w].
inline Tensor range_attention(const Tensor& local, const Tensor& tokens) {
  if (local.dim() != 4 || tokens.dim() != 3 || local.size(0) != tokens.size(0) || local.size(1) != tokens.size(2)) {
    throw ContractViolation("range_attention: local features " + shape_str(local.shape()) + " and tokens " +
                            shape_str(tokens.shape()) + " disagree on batch or embedding dimension");
  }
  const std::size_t B = local.size(0), d = local.size(1), H = local.size(2), W = local.size(3);
  const Tensor r = matmul(tokens, reshape(local, {B, d, H * W}));
  return reshape(r, {B, tokens.size(1), H, W});
}

/// softmax over the bin axis of a 1x1 convolution (m -> N) of the RAMs.
inline Tensor bin_probabilities(const Tensor& ram, const nn::Conv2d& conv) { return softmax(conv(ram), 1); }

/// Foreground probability: sigmoid of a 1x1 convolution (m -> 1) of R_fg.
inline Tensor head_tail_cut(const Tensor& ram_fg, const nn::Conv2d& conv) { return sigmoid(conv(ram_fg)); }

/// (p_fg > 0.5) per pixel of a [B, 1, H, W] map.
inline std::vector<std::uint8_t> foreground_mask(const Tensor& p_fg) {
  std::vector<std::uint8_t> m(p_fg.numel());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = p_fg.data()[i] > 0.5 ? 1 : 0;
  return m;
}

/// P = mask * P_fg + (1 - mask) * P_bg with a per-pixel mask of [B*H*W].
inline Tensor combine(const Tensor& prob_fg, const Tensor& prob_bg, const std::vector<std::uint8_t>& pixel_mask) {
  if (prob_fg.shape() != prob_bg.shape() || prob_fg.dim() != 4) {
    throw ContractViolation("combine: probability maps " + shape_str(prob_fg.shape()) + " and " +
                            shape_str(prob_bg.shape()) + " differ");
  }
  const std::size_t B = prob_fg.size(0), N = prob_fg.size(1), HW = prob_fg.size(2) * prob_fg.size(3);
  if (pixel_mask.size() != B * HW) {
    throw ContractViolation("combine: mask of " + std::to_string(pixel_mask.size()) + " pixels for maps " +
                            shape_str(prob_fg.shape()));
  }
  std::vector<std::uint8_t> full(B * N * HW);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      std::copy_n(pixel_mask.begin() + static_cast<long>(b * HW), HW, full.begin() + static_cast<long>((b * N + n) * HW));
  return where(full, prob_fg, prob_bg);
}

inline Tensor combine(const Tensor& prob_fg, const Tensor& prob_bg, const Tensor& p_fg) {
  return combine(prob_fg, prob_bg, foreground_mask(p_fg));
}

/// Patch projection + learned tokens + transformer encoder.
class GlobalBranch {
 public:
  static GlobalBranch create(ParameterStore& store, const std::string& name, const HeadConfig& cfg,
                             std::size_t in_channels, std::size_t height, std::size_t width, nn::Rng& rng) {
    if (height % cfg.patch_size != 0 || width % cfg.patch_size != 0) {
      throw ContractViolation("global_branch: feature extents " + std::to_string(height) + "x" + std::to_string(width) +
                              " not divisible by patch size " + std::to_string(cfg.patch_size));
    }
    GlobalBranch g;
    g.patch_ = nn::Conv2d::create(store, name + ".patch", in_channels, cfg.embed_dim, cfg.patch_size, cfg.patch_size, 0,
                                  rng);
    const std::size_t n_patches = (height / cfg.patch_size) * (width / cfg.patch_size);
    g.tokens_ = store.add(name + ".tokens", {1, cfg.learned_tokens(), cfg.embed_dim},
                          nn::uniform_values(rng, cfg.learned_tokens() * cfg.embed_dim, 0.5));
    g.pos_ = store.add(name + ".pos", {n_patches, cfg.embed_dim},
                       nn::uniform_values(rng, n_patches * cfg.embed_dim, 0.02));
    g.encoder_ = TransformerEncoder::create(store, name + ".vit", cfg.depth, cfg.embed_dim, cfg.heads, cfg.mlp_hidden, rng);
    return g;
  }

  std::size_t learned_tokens() const { return tokens_.size(1); }
  const Tensor& positional() const { return pos_; }
  Tensor& positional() { return pos_; }

  /// [B, C, H, W] -> patch tokens with positional encodings, [B, T, d].
  Tensor embed_patches(const Tensor& features) const {
    const std::size_t p = patch_.weight.size(2);
    if (features.dim() != 4 || features.size(2) % p != 0 || features.size(3) % p != 0) {
      throw ContractViolation("global_branch: feature map " + shape_str(features.shape()) +
                              " not divisible by patch size " + std::to_string(p));
    }
    const Tensor e = patch_(features);  // [B, d, H/p, W/p]
    const std::size_t B = e.size(0), d = e.size(1), T = e.size(2) * e.size(3);
    if (T != pos_.size(0)) {
      throw ContractViolation("global_branch: " + std::to_string(T) + " patches, positional table holds " +
                              std::to_string(pos_.size(0)));
    }
    return add(transpose(reshape(e, {B, d, T}), 1, 2), pos_);
  }

  /// Prepends the learned tokens and runs the encoder: [B, K + T, d].
  Tensor encode(const Tensor& patch_tokens) const {
    const std::size_t B = patch_tokens.size(0);
    const Tensor learned = broadcast_to(tokens_, {B, tokens_.size(1), tokens_.size(2)});
    return encoder_(concat({learned, patch_tokens}, 1));
  }

  Tensor operator()(const Tensor& features) const { return encode(embed_patches(features)); }

 private:
  nn::Conv2d patch_;
  Tensor tokens_;
  Tensor pos_;
  TransformerEncoder encoder_;
};

/// Classification phase for one pyramid level plus the hybrid regression.
class HtcAdaBinsHead {
 public:
  static HtcAdaBinsHead create(ParameterStore& store, const std::string& name, const HeadConfig& cfg,
                               std::size_t in_channels, std::size_t height, std::size_t width, nn::Rng& rng) {
    cfg.validate();
    HtcAdaBinsHead h;
    h.cfg_ = cfg;
    h.local_ = nn::Conv2d::create(store, name + ".local", in_channels, cfg.embed_dim, 3, 1, 1, rng);
    h.global_ = GlobalBranch::create(store, name + ".global", cfg, in_channels, height, width, rng);
    h.bin_fc_ = nn::Linear::create(store, name + ".bin_fc", cfg.embed_dim, cfg.n_bins, rng);
    h.prob_fg_ = nn::Conv2d::create(store, name + ".prob_fg", cfg.tokens, cfg.n_bins, 1, 1, 0, rng);
    if (cfg.head_tail_cut) {
      h.prob_bg_ = nn::Conv2d::create(store, name + ".prob_bg", cfg.tokens, cfg.n_bins, 1, 1, 0, rng);
      h.cut_ = nn::Conv2d::create(store, name + ".cut", cfg.tokens, 1, 1, 1, 0, rng);
    }
    return h;
  }

  const HeadConfig& config() const { return cfg_; }
  const GlobalBranch& global_branch() const { return global_; }
  GlobalBranch& global_branch() { return global_; }

  Tensor local_branch(const Tensor& features) const { return local_(features); }

  /// Runs the head on [B, C, H, W] features. When `mask_override` is given it
  /// replaces (p_fg > 0.5) in the combination step.
  HeadOutput operator()(const Tensor& features, const std::vector<std::uint8_t>* mask_override = nullptr) const {
    const std::size_t m = cfg_.tokens;
    const Tensor local = local_branch(features);
    const Tensor emb = global_(features);
    if (emb.size(1) < cfg_.learned_tokens()) {
      throw ConfigError("run_head: sequence of " + std::to_string(emb.size(1)) + " embeddings, need " +
                        std::to_string(cfg_.learned_tokens()));
    }
    const std::size_t B = emb.size(0), d = emb.size(2);

    HeadOutput out;
    out.bins = compute_bins(reshape(slice(emb, 1, 0, 1), {B, d}), bin_fc_, cfg_);
    out.ram_fg = range_attention(local, slice(emb, 1, 1, 1 + m));
    out.prob_fg = bin_probabilities(out.ram_fg, prob_fg_);
    if (cfg_.head_tail_cut) {
      out.ram_bg = range_attention(local, slice(emb, 1, 1 + m, 1 + 2 * m));
      out.prob_bg = bin_probabilities(out.ram_bg, prob_bg_);
      out.p_fg = head_tail_cut(out.ram_fg, cut_);
      out.fg_mask = mask_override ? *mask_override : foreground_mask(out.p_fg);
      out.prob = combine(out.prob_fg, out.prob_bg, out.fg_mask);
    } else {
      out.prob = out.prob_fg;
    }
    out.height = predict_heights(out.prob, out.bins);
    return out;
  }

 private:
  HeadConfig cfg_;
  nn::Conv2d local_;
  GlobalBranch global_;
  nn::Linear bin_fc_;
  nn::Conv2d prob_fg_, prob_bg_, cut_;
};

}  // namespace heightbins
