#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "heightbins/htc_adabins.hpp"
#include "heightbins/losses.hpp"
#include "heightbins/model.hpp"
#include "heightbins/nn.hpp"
#include "heightbins/ops.hpp"
#include "heightbins/seed.hpp"

namespace heightbins {

struct GradCheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-5;       // central-difference step
  double tolerance = 1e-4;  // on the relative error below
  /// rel = |analytic - numeric| / max(|analytic|, |numeric|, floor); the
  /// floor keeps near-zero gradients from turning rounding noise into
  /// large ratios.
  double floor = 1e-3;
  /// Entries checked per input tensor (evenly strided); 0 checks all.
  std::size_t max_entries = 0;
  LossConfig loss;  // families and weights of the end-to-end cases
};

struct GradCheckCase {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckCase> cases;
  double tolerance = 0.0;
  double seconds = 0.0;

  bool passed() const {
    return !cases.empty() && std::all_of(cases.begin(), cases.end(), [](const auto& c) { return c.passed; });
  }
  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& c : cases) {
      arr.push_back({{"name", c.name}, {"max_rel_error", c.max_rel_error}, {"entries", c.entries}, {"passed", c.passed}});
    }
    return {{"passed", passed()}, {"tolerance", tolerance}, {"seconds", seconds}, {"cases", arr}};
  }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of sum(R * f(inputs)) with central
/// differences, R a fixed random weighting of f's output.
inline GradCheckCase check_gradient(const std::string& name, std::vector<Tensor> inputs,
                                    const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                    const GradCheckOptions& opt) {
  std::mt19937_64 rng(derive_seed(opt.seed, std::hash<std::string>{}(name)));
  std::uniform_real_distribution<double> u(0.5, 1.5);
  Tensor weights;
  const auto objective = [&]() {
    const Tensor out = f(inputs);
    if (!weights.defined()) {
      std::vector<double> w(out.numel());
      for (auto& v : w) v = u(rng);
      weights = Tensor::from(out.shape(), std::move(w));
    }
    return sum(mul(out, weights));
  };

  for (auto& t : inputs) t.zero_grad();
  const Tensor loss = objective();
  backward(loss);

  GradCheckCase res{name, 0.0, 0, true};
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                                      : std::vector<double>(t.numel(), 0.0);
    const std::size_t n = t.numel();
    const std::size_t stride = opt.max_entries && n > opt.max_entries ? n / opt.max_entries : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      double& x = t.mutable_data()[i];
      const double x0 = x;
      double fp, fm;
      {
        NoGradGuard guard;
        x = x0 + opt.step;
        fp = objective().item();
        x = x0 - opt.step;
        fm = objective().item();
        x = x0;
      }
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double err = relative_error(analytic[i], numeric, opt.floor);
      if (!std::isfinite(err)) res.max_rel_error = INFINITY;
      res.max_rel_error = std::max(res.max_rel_error, err);
      ++res.entries;
    }
  }
  res.passed = res.max_rel_error < opt.tolerance;
  return res;
}

namespace detail {

/// Random values in [lo, hi] with |x| >= gap, keeping away from kinks at 0.
inline Tensor gc_tensor(std::mt19937_64& rng, Shape shape, double lo, double hi, double gap = 0.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) {
    do x = u(rng);
    while (std::abs(x) < gap);
  }
  return Tensor::from(std::move(shape), std::move(v), true);
}

/// Ground-truth heights straddling the 1 m cut, strictly inside (h_min, h_max).
inline Tensor gc_heights(std::mt19937_64& rng, Shape shape, double h_min, double h_max) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(numel_of(shape));
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double span = h_max - h_min;
    v[i] = i % 2 == 0 ? h_min + 0.02 * span + 0.9 * u(rng) * std::min(1.0, span)
                      : h_min + (0.1 + 0.8 * u(rng)) * span;
  }
  return Tensor::from(std::move(shape), std::move(v));
}

inline std::vector<Tensor> with_params(const ParameterStore& store, std::vector<Tensor> extra = {}) {
  for (const auto& p : store.items()) extra.push_back(p.tensor);
  return extra;
}

/// Loss of `heads` applied to `levels` (feature maps), with HTC masks and DC
/// targets captured at the current point and then held fixed.
struct FrozenHeadsLoss {
  std::vector<const HtcAdaBinsHead*> heads;
  std::vector<Tensor> gts;
  LossConfig cfg;
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<FrozenLevel> frozen;
  std::function<std::vector<Tensor>(const std::vector<Tensor>&)> features;

  void capture(const std::vector<Tensor>& inputs) {
    NoGradGuard guard;
    const auto feats = features(inputs);
    std::vector<HeadOutput> outs;
    for (std::size_t i = 0; i < heads.size(); ++i) outs.push_back((*heads[i])(feats[i]));
    masks.clear();
    for (const auto& o : outs) masks.push_back(o.fg_mask);
    std::vector<const HeadOutput*> ptrs;
    for (const auto& o : outs) ptrs.push_back(&o);
    total_loss(ptrs, gts, cfg, &frozen, true);
  }

  Tensor operator()(const std::vector<Tensor>& inputs) const {
    const auto feats = features(inputs);
    std::vector<HeadOutput> outs;
    for (std::size_t i = 0; i < heads.size(); ++i) {
      outs.push_back((*heads[i])(feats[i], masks[i].empty() ? nullptr : &masks[i]));
    }
    std::vector<const HeadOutput*> ptrs;
    for (const auto& o : outs) ptrs.push_back(&o);
    auto frozen_copy = frozen;
    return total_loss(ptrs, gts, cfg, &frozen_copy, false).total;
  }
};

inline HeadConfig gradcheck_head(bool htc) {
  HeadConfig h;
  h.n_bins = 8;
  h.tokens = 4;
  h.patch_size = 2;
  h.embed_dim = 8;
  h.depth = 1;
  h.heads = 2;
  h.mlp_hidden = 16;
  h.h_min = 0.0;
  h.h_max = 20.0;
  h.head_tail_cut = htc;
  return h;
}

}  // namespace detail

/// Finite-difference checks of every primitive plus end-to-end losses on a
/// 4x4, N=8, m=4 head.
inline GradCheckReport run_gradcheck(const GradCheckOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport rep;
  rep.tolerance = opt.tolerance;
  std::mt19937_64 rng(opt.seed);
  using V = std::vector<Tensor>;
  auto T = [&](Shape s, double lo = -2.0, double hi = 2.0, double gap = 0.0) {
    return detail::gc_tensor(rng, std::move(s), lo, hi, gap);
  };
  auto run = [&](const std::string& name, V inputs, const std::function<Tensor(const V&)>& f) {
    rep.cases.push_back(check_gradient(name, std::move(inputs), f, opt));
  };

  // Elementwise arithmetic, with and without broadcasting.
  run("add", {T({3, 4}), T({4})}, [](const V& x) { return add(x[0], x[1]); });
  run("sub", {T({2, 1, 3}), T({4, 1})}, [](const V& x) { return sub(x[0], x[1]); });
  run("mul", {T({3, 4}), T({3, 1})}, [](const V& x) { return mul(x[0], x[1]); });
  run("div", {T({3, 4}), T({4}, 0.5, 2.0)}, [](const V& x) { return div(x[0], x[1]); });
  run("add_scalar", {T({5})}, [](const V& x) { return add_scalar(x[0], 0.7); });
  run("mul_scalar", {T({5})}, [](const V& x) { return mul_scalar(x[0], -1.3); });
  run("neg", {T({5})}, [](const V& x) { return neg(x[0]); });
  // Elementwise functions.
  run("exp", {T({6})}, [](const V& x) { return exp(x[0]); });
  run("log", {T({6}, 0.2, 3.0)}, [](const V& x) { return log(x[0]); });
  run("sqrt", {T({6}, 0.2, 3.0)}, [](const V& x) { return sqrt(x[0]); });
  run("abs", {T({6}, -2, 2, 0.1)}, [](const V& x) { return abs(x[0]); });
  run("relu", {T({6}, -2, 2, 0.1)}, [](const V& x) { return relu(x[0]); });
  run("gelu", {T({6}, -3, 3)}, [](const V& x) { return gelu(x[0]); });
  run("sigmoid", {T({6}, -4, 4)}, [](const V& x) { return sigmoid(x[0]); });
  run("erf", {T({6})}, [](const V& x) { return erf(x[0]); });
  {
    // Keep inputs off the clamp threshold.
    Tensor x = T({8}, -2, 2);
    for (auto& v : x.mutable_data())
      if (std::abs(v - 0.25) < 0.1) v += 0.3;
    run("clamp_min", {x}, [](const V& v) { return clamp_min(v[0], 0.25); });
  }
  run("where", {T({2, 3}), T({2, 3})}, [](const V& x) { return where({1, 0, 1, 1, 0, 0}, x[0], x[1]); });
  // Reductions and normalization.
  run("sum_all", {T({2, 3, 4})}, [](const V& x) { return sum(x[0]); });
  run("sum_axes", {T({2, 3, 4})}, [](const V& x) { return sum(x[0], {0, 2}, true); });
  run("mean_axis", {T({2, 3, 4})}, [](const V& x) { return mean(x[0], {-1}); });
  run("softmax", {T({2, 5, 3})}, [](const V& x) { return softmax(x[0], 1); });
  run("layer_norm", {T({3, 6})}, [](const V& x) { return layer_norm(x[0]); });
  // Linear algebra and convolution.
  run("matmul", {T({3, 4}), T({4, 2})}, [](const V& x) { return matmul(x[0], x[1]); });
  run("matmul_batched", {T({2, 3, 4}), T({2, 4, 5})}, [](const V& x) { return matmul(x[0], x[1]); });
  run("matmul_shared_rhs", {T({2, 3, 4}), T({4, 5})}, [](const V& x) { return matmul(x[0], x[1]); });
  run("conv2d_1x1", {T({2, 3, 4, 4}), T({5, 3, 1, 1}), T({5})},
      [](const V& x) { return conv2d(x[0], x[1], x[2], 1, 0); });
  run("conv2d_3x3", {T({2, 3, 4, 4}), T({2, 3, 3, 3}), T({2})},
      [](const V& x) { return conv2d(x[0], x[1], x[2], 1, 1); });
  run("conv2d_patchify", {T({1, 2, 4, 6}), T({3, 2, 2, 2}), T({3})},
      [](const V& x) { return conv2d(x[0], x[1], x[2], 2, 0); });
  // Resampling and shape manipulation.
  run("avg_pool2d", {T({2, 2, 4, 4})}, [](const V& x) { return avg_pool2d(x[0], 2); });
  run("upsample_nearest", {T({1, 2, 2, 3})}, [](const V& x) { return upsample_nearest(x[0], 2); });
  run("reshape", {T({2, 6})}, [](const V& x) { return reshape(x[0], {3, 4}); });
  run("permute", {T({2, 3, 4})}, [](const V& x) { return permute(x[0], {2, 0, 1}); });
  run("transpose", {T({2, 3, 4})}, [](const V& x) { return transpose(x[0], 0, 2); });
  run("concat", {T({2, 3}), T({2, 2})}, [](const V& x) { return concat({x[0], x[1]}, 1); });
  run("slice", {T({4, 3})}, [](const V& x) { return slice(x[0], 0, 1, 3); });
  run("index_select", {T({4, 3})}, [](const V& x) { return index_select(x[0], 0, {3, 0, 3, 1}); });
  run("broadcast_to", {T({1, 3})}, [](const V& x) { return broadcast_to(x[0], {2, 4, 3}); });

  // Losses on their own.
  {
    const Tensor gt = detail::gc_heights(rng, {2, 1, 3, 3}, 0.0, 20.0);
    Tensor pred = T({2, 1, 3, 3}, 0.0, 20.0);
    for (std::size_t i = 0; i < pred.numel(); ++i)
      if (std::abs(pred.data()[i] - gt.data()[i]) < 0.1) pred.mutable_data()[i] += 0.5;
    run("l1_height_loss", {pred}, [gt](const V& x) { return l1_height_loss(x[0], gt); });
    run("htc_loss", {T({2, 1, 3, 3}, -3, 3)}, [gt](const V& x) { return htc_loss(sigmoid(x[0]), gt); });
    const std::vector<double> pts{0.3, 2.5, 7.1, 7.4, 15.0};
    run("chamfer_bin_loss", {Tensor::from({4}, {0.0, 3.9, 8.2, 20.0}, true)},
        [pts](const V& x) { return chamfer_bin_loss(x[0], pts); });
  }

  // End-to-end on a 4x4 feature map, N=8, m=4.
  const auto e2e = [&](const std::string& name, bool htc, Family fg, Family bg) {
    ParameterStore store;
    nn::Rng prng(derive_seed(opt.seed, std::hash<std::string>{}(name)));
    const HeadConfig hc = detail::gradcheck_head(htc);
    const HtcAdaBinsHead head = HtcAdaBinsHead::create(store, "head", hc, 4, 4, 4, prng);
    const Tensor x = T({2, 4, 4, 4}, -1.0, 1.0);
    detail::FrozenHeadsLoss fl;
    fl.heads = {&head};
    fl.gts = {detail::gc_heights(rng, {2, 1, 4, 4}, hc.h_min, hc.h_max)};
    fl.cfg = opt.loss;
    fl.cfg.lambdas = {1.0};
    fl.cfg.fg_family = fg;
    fl.cfg.bg_family = bg;
    fl.features = [](const V& in) { return V{in[0]}; };
    const V inputs = detail::with_params(store, {x});
    fl.capture(inputs);
    run(name, inputs, [&fl](const V& in) { return fl(in); });
  };
  e2e("total_loss_head_gaussian_uniform", true, opt.loss.fg_family, opt.loss.bg_family);
  e2e("total_loss_head_laplace_delta", true, Family::laplace, Family::delta);
  e2e("total_loss_head_without_htc", false, Family::gaussian, Family::uniform);

  // Two levels weighted by lambda: coarse head on pooled features.
  {
    ParameterStore store;
    nn::Rng prng(derive_seed(opt.seed, 77));
    const HeadConfig hc = detail::gradcheck_head(true);
    const HtcAdaBinsHead coarse = HtcAdaBinsHead::create(store, "coarse", hc, 4, 2, 2, prng);
    const HtcAdaBinsHead fine = HtcAdaBinsHead::create(store, "fine", hc, 4, 4, 4, prng);
    const Tensor x = T({1, 4, 4, 4}, -1.0, 1.0);
    const Tensor gt = detail::gc_heights(rng, {1, 1, 4, 4}, hc.h_min, hc.h_max);
    detail::FrozenHeadsLoss fl;
    fl.heads = {&coarse, &fine};
    fl.gts = {avg_pool2d(gt, 2), gt};
    fl.cfg = opt.loss;
    fl.cfg.lambdas = {0.5, 1.0};
    fl.features = [](const V& in) { return V{avg_pool2d(in[0], 2), in[0]}; };
    const V inputs = detail::with_params(store, {x});
    fl.capture(inputs);
    run("total_loss_two_levels", inputs, [&fl](const V& in) { return fl(in); });
  }

  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace heightbins
