#pragma once

#include <array>
#include <string>
#include <vector>

#include "heightbins/errors.hpp"
#include "heightbins/nn.hpp"
#include "heightbins/ops.hpp"

namespace heightbins {

inline constexpr std::size_t kPyramidLevels = 5;

struct BackboneConfig {
  std::size_t in_channels = 3;
  /// Channel widths from F5 (finest) to F1 (coarsest).
  std::array<std::size_t, kPyramidLevels> widths{8, 16, 32, 64, 64};

  /// Channel count of decoded level F_i, i in 1..5.
  std::size_t level_channels(int level) const { return widths.at(static_cast<std::size_t>(kPyramidLevels - level)); }
};

/// Decoded feature maps F_1 (coarsest, H/16) .. F_5 (finest, H).
struct FeaturePyramid {
  std::array<Tensor, kPyramidLevels> levels;

  const Tensor& level(int i) const {
    if (i < 1 || i > static_cast<int>(kPyramidLevels)) {
      throw ContractViolation("FeaturePyramid: level " + std::to_string(i) + " outside 1..5");
    }
    return levels[static_cast<std::size_t>(i - 1)];
  }
};

/// Spatial side of level F_i for an input side of `input`.
inline std::size_t level_extent(std::size_t input, int level) { return input >> (kPyramidLevels - level); }

/// Small U-Net: four 2x downsamples, two 3x3 conv + GELU per stage, skip
/// connections by concatenation, nearest-neighbour upsampling.
class Backbone {
 public:
  Backbone() = default;

  static Backbone create(ParameterStore& store, const BackboneConfig& cfg, nn::Rng& rng) {
    Backbone b;
    b.cfg_ = cfg;
    std::size_t prev = cfg.in_channels;
    for (std::size_t s = 0; s < kPyramidLevels; ++s) {
      const std::size_t w = cfg.widths[s];
      const std::string name = "backbone.enc" + std::to_string(s);
      b.enc_[s] = {nn::Conv2d::create(store, name + ".conv1", prev, w, 3, 1, 1, rng),
                   nn::Conv2d::create(store, name + ".conv2", w, w, 3, 1, 1, rng)};
      prev = w;
    }
    for (std::size_t s = 0; s + 1 < kPyramidLevels; ++s) {
      const std::size_t w = cfg.widths[s];
      const std::size_t below = cfg.widths[s + 1];
      const std::string name = "backbone.dec" + std::to_string(s);
      b.dec_[s] = {nn::Conv2d::create(store, name + ".conv1", below + w, w, 3, 1, 1, rng),
                   nn::Conv2d::create(store, name + ".conv2", w, w, 3, 1, 1, rng)};
    }
    return b;
  }

  const BackboneConfig& config() const { return cfg_; }

  /// image: [B, C, H, W] with H and W divisible by 16.
  FeaturePyramid operator()(const Tensor& image) const {
    if (image.dim() != 4 || image.size(1) != cfg_.in_channels) {
      throw ContractViolation("extract_features: expected [B," + std::to_string(cfg_.in_channels) +
                              ",H,W] input, got " + shape_str(image.shape()));
    }
    constexpr std::size_t divisor = 1u << (kPyramidLevels - 1);
    if (image.size(2) % divisor != 0 || image.size(3) % divisor != 0) {
      throw ContractViolation("extract_features: spatial extents " + shape_str(image.shape()) +
                              " must be divisible by " + std::to_string(divisor));
    }
    std::array<Tensor, kPyramidLevels> skips;
    Tensor x = image;
    for (std::size_t s = 0; s < kPyramidLevels; ++s) {
      if (s > 0) x = avg_pool2d(x, 2);
      x = stage(enc_[s], x);
      skips[s] = x;
    }
    FeaturePyramid out;
    out.levels[0] = x;  // F1: bottleneck
    for (std::size_t s = kPyramidLevels - 1; s-- > 0;) {
      x = stage(dec_[s], concat({upsample_nearest(x, 2), skips[s]}, 1));
      out.levels[kPyramidLevels - 1 - s] = x;
    }
    return out;
  }

 private:
  struct Stage {
    nn::Conv2d conv1, conv2;
  };
  static Tensor stage(const Stage& st, const Tensor& x) { return gelu(st.conv2(gelu(st.conv1(x)))); }

  BackboneConfig cfg_;
  std::array<Stage, kPyramidLevels> enc_;
  std::array<Stage, kPyramidLevels - 1> dec_;
};

}  // namespace heightbins
