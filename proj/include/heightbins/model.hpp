#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "heightbins/backbone.hpp"
#include "heightbins/htc_adabins.hpp"
#include "heightbins/params.hpp"

namespace heightbins {

struct ModelConfig {
  BackboneConfig backbone;
  HeadConfig head;
  /// Pyramid levels that receive a head, ascending; must include 5.
  std::vector<int> levels{2, 3, 4, 5};
  std::size_t image_size = 32;

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (levels.empty()) out.push_back("model: level subset must be nonempty");
    for (std::size_t i = 0; i < levels.size(); ++i) {
      if (levels[i] < 2 || levels[i] > 5) out.push_back("model: levels must be drawn from {2,3,4,5}");
      if (i > 0 && levels[i] <= levels[i - 1]) out.push_back("model: levels must be strictly ascending");
    }
    if (std::find(levels.begin(), levels.end(), 5) == levels.end()) {
      out.push_back("model: level 5 (finest) must be attached; it produces the final height map");
    }
    if (image_size == 0 || image_size % 16 != 0) out.push_back("model: image_size must be a positive multiple of 16");
    for (int l : levels) {
      if (l < 2 || l > 5 || image_size == 0) continue;
      const std::size_t side = level_extent(image_size, l);
      if (head.patch_size == 0 || side % head.patch_size != 0) {
        out.push_back("model: level F" + std::to_string(l) + " extent " + std::to_string(side) +
                      " not divisible by patch size " + std::to_string(head.patch_size));
      }
    }
    if (!(head.h_max > head.h_min)) out.push_back("model: h_max must exceed h_min");
    if (head.embed_dim == 0 || head.heads == 0 || head.embed_dim % head.heads != 0) {
      out.push_back("model: embed_dim must be a positive multiple of heads");
    }
    if (head.n_bins == 0 || head.tokens == 0 || head.mlp_hidden == 0) {
      out.push_back("model: n_bins, tokens and mlp_hidden must be positive");
    }
    return out;
  }
};

/// Backbone plus one HTC-AdaBins head per attached level.
class HeightNet {
 public:
  struct Output {
    FeaturePyramid features;
    std::vector<HeadOutput> heads;  // aligned with config().levels

    /// Finest level (F5) prediction.
    const HeadOutput& final_output() const { return heads.back(); }
    std::vector<const HeadOutput*> head_ptrs() const {
      std::vector<const HeadOutput*> p;
      for (const auto& h : heads) p.push_back(&h);
      return p;
    }
  };

  static HeightNet create(const ModelConfig& cfg, std::uint64_t seed) {
    const auto issues = cfg.problems();
    if (!issues.empty()) throw ConfigError(issues.front());
    HeightNet net;
    net.cfg_ = cfg;
    nn::Rng rng(seed);
    net.backbone_ = Backbone::create(net.params_, cfg.backbone, rng);
    for (int l : cfg.levels) {
      const std::size_t side = level_extent(cfg.image_size, l);
      net.heads_.push_back(HtcAdaBinsHead::create(net.params_, "head" + std::to_string(l), cfg.head,
                                                  cfg.backbone.level_channels(l), side, side, rng));
    }
    return net;
  }

  HeightNet(HeightNet&&) = default;
  HeightNet& operator=(HeightNet&&) = default;
  HeightNet(const HeightNet&) = delete;
  HeightNet& operator=(const HeightNet&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  const Backbone& backbone() const { return backbone_; }
  const std::vector<HtcAdaBinsHead>& heads() const { return heads_; }

  /// images: [B, C, S, S]. `masks`, when given, overrides the per-level
  /// foreground masks (one entry per attached level).
  Output forward(const Tensor& images, const std::vector<std::vector<std::uint8_t>>* masks = nullptr) const {
    if (images.dim() != 4 || images.size(2) != cfg_.image_size || images.size(3) != cfg_.image_size) {
      throw ContractViolation("HeightNet: expected [B," + std::to_string(cfg_.backbone.in_channels) + "," +
                              std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) +
                              "] images, got " + shape_str(images.shape()));
    }
    Output out;
    out.features = backbone_(images);
    for (std::size_t i = 0; i < heads_.size(); ++i) {
      const auto* override_mask = masks && !(*masks)[i].empty() ? &(*masks)[i] : nullptr;
      out.heads.push_back(heads_[i](out.features.level(cfg_.levels[i]), override_mask));
    }
    return out;
  }

 private:
  HeightNet() = default;

  ModelConfig cfg_;
  ParameterStore params_;
  Backbone backbone_;
  std::vector<HtcAdaBinsHead> heads_;
};

}  // namespace heightbins
