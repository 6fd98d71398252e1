#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "heightbins/ops.hpp"
#include "heightbins/params.hpp"

namespace heightbins::nn {

using Rng = std::mt19937_64;

inline std::vector<double> uniform_values(Rng& rng, std::size_t n, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

struct Conv2d {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  /// He-uniform kernel, zero bias.
  static Conv2d create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                       std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng) {
    const std::size_t fan_in = in * kernel * kernel;
    Conv2d c;
    c.weight = store.add(name + ".weight", {out, in, kernel, kernel},
                         uniform_values(rng, out * fan_in, std::sqrt(6.0 / static_cast<double>(fan_in))));
    c.bias = store.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
    c.stride = stride;
    c.padding = padding;
    return c;
  }

  std::size_t in_channels() const { return weight.size(1); }
  std::size_t out_channels() const { return weight.size(0); }

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
};

/// y = x W + b over the last axis; W is [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    Linear l;
    l.weight = store.add(name + ".weight", {in, out},
                         uniform_values(rng, in * out, 1.0 / std::sqrt(static_cast<double>(in))));
    l.bias = store.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
    return l;
  }

  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm create(ParameterStore& store, const std::string& name, std::size_t dim) {
    LayerNorm ln;
    ln.gamma = store.add(name + ".gamma", {dim}, std::vector<double>(dim, 1.0));
    ln.beta = store.add(name + ".beta", {dim}, std::vector<double>(dim, 0.0));
    return ln;
  }

  Tensor operator()(const Tensor& x) const { return add(mul(layer_norm(x), gamma), beta); }
};

}  // namespace heightbins::nn
