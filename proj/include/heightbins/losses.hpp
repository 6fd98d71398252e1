#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "heightbins/distributions.hpp"
#include "heightbins/errors.hpp"
#include "heightbins/htc_adabins.hpp"
#include "heightbins/ops.hpp"

namespace heightbins {

struct LossConfig {
  double mu_bin = 0.01;   // mu1, Chamfer bin-edge loss
  double mu_htc = 1.0;    // mu2, head-tail cut cross-entropy
  double mu_dist = 1.0;   // mu3, distribution constraint
  /// One weight per attached level, coarse to fine.
  std::vector<double> lambdas{0.125, 0.25, 0.5, 1.0};
  Family fg_family = Family::gaussian;
  Family bg_family = Family::uniform;
  double fg_threshold = 1.0;
  double mode_prob_min = 1e-3;
  double mode_prob_max = 1.0 - 1e-3;
  double prob_floor = 1e-12;
  /// Cap on ground-truth values per image fed to the Chamfer loss (evenly
  /// strided subsample); 0 keeps all.
  std::size_t chamfer_max_points = 0;

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (mu_bin < 0 || mu_htc < 0 || mu_dist < 0) out.push_back("loss: mu weights must be nonnegative");
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
      if (lambdas[i] < 0) out.push_back("loss: lambda weights must be nonnegative");
      if (i > 0 && lambdas[i] < lambdas[i - 1]) out.push_back("loss: lambda weights must be nondecreasing with level");
    }
    if (!(mode_prob_min > 0.0 && mode_prob_min <= mode_prob_max && mode_prob_max < 1.0)) {
      out.push_back("loss: mode probability clamp must satisfy 0 < min <= max < 1");
    }
    if (!(prob_floor > 0.0 && prob_floor < 1.0)) out.push_back("loss: prob_floor must lie in (0,1)");
    return out;
  }
};

// ---------------------------------------------------------------------------
// Pixel-wise height loss

inline Tensor l1_height_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) {
    throw ContractViolation("l1_height_loss: shapes " + shape_str(pred.shape()) + " and " + shape_str(gt.shape()) +
                            " differ");
  }
  return mean(abs(sub(pred, gt)));
}

// ---------------------------------------------------------------------------
// Chamfer bin-edge loss

namespace detail {
/// Index into `sorted_idx` order of the value nearest to x.
inline std::size_t nearest_sorted(std::span<const double> values, std::span<const std::size_t> sorted_idx, double x) {
  auto it = std::lower_bound(sorted_idx.begin(), sorted_idx.end(), x,
                             [&](std::size_t i, double v) { return values[i] < v; });
  if (it == sorted_idx.end()) return sorted_idx.back();
  if (it == sorted_idx.begin()) return *it;
  const std::size_t hi = *it, lo = *(it - 1);
  return (x - values[lo]) <= (values[hi] - x) ? lo : hi;
}

inline std::vector<std::size_t> argsort(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  return idx;
}
}  // namespace detail

/// Bidirectional squared 1-D Chamfer distance between a set of bin edges
/// (1-D tensor) and ground-truth values; each direction is mean-reduced.
/// Gradients reach the edges only.
inline Tensor chamfer_bin_loss(const Tensor& edges, std::span<const double> gt) {
  if (edges.dim() != 1 || edges.numel() == 0) {
    throw ContractViolation("chamfer_bin_loss: edges must be a nonempty 1-D tensor, got " + shape_str(edges.shape()));
  }
  if (gt.empty()) throw ContractViolation("chamfer_bin_loss: ground-truth set is empty");
  const auto gt_order = detail::argsort(gt);
  const auto e = edges.data();
  const auto edge_order = detail::argsort(e);

  std::vector<double> nearest_gt(e.size());
  for (std::size_t j = 0; j < e.size(); ++j) nearest_gt[j] = gt[detail::nearest_sorted(gt, gt_order, e[j])];
  std::vector<std::size_t> nearest_edge(gt.size());
  for (std::size_t k = 0; k < gt.size(); ++k) nearest_edge[k] = detail::nearest_sorted(e, edge_order, gt[k]);

  const Tensor d_edges = sub(edges, Tensor::from({e.size()}, std::move(nearest_gt)));
  const Tensor d_gt = sub(index_select(edges, 0, nearest_edge), Tensor::from({gt.size()}, {gt.begin(), gt.end()}));
  return add(mean(mul(d_edges, d_edges)), mean(mul(d_gt, d_gt)));
}

/// Batched form: mean over images of the per-image Chamfer loss between the
/// image's edges and its flattened ground-truth heights.
inline Tensor chamfer_bin_loss(const BinSet& bins, const Tensor& height_gt, std::size_t max_points = 0) {
  const std::size_t B = bins.edges.size(0), N1 = bins.edges.size(1);
  const std::size_t per_image = height_gt.numel() / B;
  Tensor total;
  for (std::size_t b = 0; b < B; ++b) {
    std::span<const double> all = height_gt.data().subspan(b * per_image, per_image);
    std::vector<double> pts;
    if (max_points > 0 && all.size() > max_points) {
      for (std::size_t i = 0; i < max_points; ++i) pts.push_back(all[i * all.size() / max_points]);
    } else {
      pts.assign(all.begin(), all.end());
    }
    const Tensor row = reshape(slice(bins.edges, 0, b, b + 1), {N1});
    const Tensor l = chamfer_bin_loss(row, pts);
    total = total.defined() ? add(total, l) : l;
  }
  return mul_scalar(total, 1.0 / static_cast<double>(B));
}

// ---------------------------------------------------------------------------
// Head-tail cut loss

/// Mean binary cross-entropy of p_fg against the label (gt > threshold).
inline Tensor htc_loss(const Tensor& p_fg, const Tensor& height_gt, double threshold = 1.0) {
  if (p_fg.shape() != height_gt.shape()) {
    throw ContractViolation("htc_loss: shapes " + shape_str(p_fg.shape()) + " and " + shape_str(height_gt.shape()) +
                            " differ");
  }
  const std::size_t n = p_fg.numel();
  std::vector<double> label(n), inv_label(n);
  for (std::size_t i = 0; i < n; ++i) {
    label[i] = height_gt.data()[i] > threshold ? 1.0 : 0.0;
    inv_label[i] = 1.0 - label[i];
  }
  constexpr double eps = 1e-12;
  const Tensor log_p = log(clamp_min(p_fg, eps));
  const Tensor log_q = log(clamp_min(add_scalar(neg(p_fg), 1.0), eps));
  const Tensor y = Tensor::from(p_fg.shape(), std::move(label));
  const Tensor ny = Tensor::from(p_fg.shape(), std::move(inv_label));
  return neg(mean(add(mul(y, log_p), mul(ny, log_q))));
}

// ---------------------------------------------------------------------------
// Distribution-based constraint

/// KL(ref || pred) = sum ref * log(ref / max(pred, floor)), with 0 log 0 = 0.
inline double kl_divergence(std::span<const double> ref, std::span<const double> pred, double floor = 1e-12) {
  if (ref.size() != pred.size()) throw ContractViolation("kl_divergence: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (ref[i] > 0.0) s += ref[i] * (std::log(ref[i]) - std::log(std::max(pred[i], floor)));
  }
  return s;
}

/// Per-pixel reference bin probabilities, held constant during backprop.
struct DcTargets {
  Shape shape;                 // [B, N, H, W]
  std::vector<double> probs;   // same layout as the prediction
  double ref_log_ref = 0.0;    // sum of ref * log(ref) over everything
  std::size_t pixels = 0;      // B * H * W
};

/// Builds reference probabilities from the (detached) prediction: for each
/// pixel the family is chosen by gt > threshold, the mode probability is the
/// predicted mass of the bin holding the ground truth (clamped), and the
/// scale is solved from it.
inline DcTargets build_dc_targets(const Tensor& prob, const Tensor& height_gt, const BinSet& bins,
                                  const LossConfig& cfg) {
  if (prob.dim() != 4 || height_gt.dim() != 4 || height_gt.size(1) != 1 || prob.size(0) != height_gt.size(0) ||
      prob.size(2) != height_gt.size(2) || prob.size(3) != height_gt.size(3)) {
    throw ContractViolation("dc_loss: probabilities " + shape_str(prob.shape()) + " and ground truth " +
                            shape_str(height_gt.shape()) + " do not conform");
  }
  const std::size_t B = prob.size(0), N = prob.size(1), HW = prob.size(2) * prob.size(3);
  DcTargets t;
  t.shape = prob.shape();
  t.probs.assign(prob.numel(), 0.0);
  t.pixels = B * HW;
  std::vector<double> row(N);
  const auto P = prob.data();
  for (std::size_t b = 0; b < B; ++b) {
    const std::span<const double> edges = bins.edges.data().subspan(b * (N + 1), N + 1);
    for (std::size_t p = 0; p < HW; ++p) {
      const double h = height_gt.data()[b * HW + p];
      const Family fam = h > cfg.fg_threshold ? cfg.fg_family : cfg.bg_family;
      if (fam == Family::none) continue;
      const auto j = containing_bin(edges, h);
      if (!j) continue;
      const double mode = std::clamp(P[(b * N + *j) * HW + p], cfg.mode_prob_min, cfg.mode_prob_max);
      const double width = edges[*j + 1] - edges[*j];
      if (!(width > 0.0)) continue;
      reference_bin_probs(make_reference(fam, mode, width, h), edges, row);
      for (std::size_t n = 0; n < N; ++n) {
        const double r = row[n];
        t.probs[(b * N + n) * HW + p] = r;
        if (r > 0.0) t.ref_log_ref += r * std::log(r);
      }
    }
  }
  return t;
}

/// Mean over pixels of KL(targets || prob).
inline Tensor kl_to_targets(const Tensor& prob, const DcTargets& targets, double floor = 1e-12) {
  if (prob.shape() != targets.shape) {
    throw ContractViolation("dc_loss: targets " + shape_str(targets.shape) + " for prediction " + shape_str(prob.shape()));
  }
  const double inv = 1.0 / static_cast<double>(targets.pixels);
  const Tensor ref = Tensor::from(targets.shape, targets.probs);
  const Tensor cross = sum(mul(ref, log(clamp_min(prob, floor))));
  return add_scalar(mul_scalar(cross, -inv), targets.ref_log_ref * inv);
}

inline Tensor dc_loss(const Tensor& prob, const Tensor& height_gt, const BinSet& bins, const LossConfig& cfg) {
  return kl_to_targets(prob, build_dc_targets(prob, height_gt, bins, cfg), cfg.prob_floor);
}

// ---------------------------------------------------------------------------
// Multi-level total

/// Ground truth average-pooled to each level's resolution.
inline std::vector<Tensor> gt_pyramid(const Tensor& height_gt, const std::vector<int>& levels) {
  std::vector<Tensor> out;
  NoGradGuard guard;
  for (int level : levels) {
    const std::size_t factor = std::size_t{1} << (5 - level);
    out.push_back(factor == 1 ? height_gt : avg_pool2d(height_gt, factor));
  }
  return out;
}

struct LevelLoss {
  double height = 0.0;
  double bin = 0.0;
  double htc = 0.0;
  double dist = 0.0;
  double total = 0.0;
};

struct LossBreakdown {
  Tensor total;
  std::vector<LevelLoss> levels;
};

/// Stop-gradient quantities of a forward pass, for replaying the loss with
/// them held fixed (finite-difference checks).
struct FrozenLevel {
  DcTargets dc;
};

/// L = sum_i lambda_i (L_h + mu1 L_b + mu2 L_htc + mu3 L_dist).
inline LossBreakdown total_loss(const std::vector<const HeadOutput*>& outputs, const std::vector<Tensor>& gts,
                                const LossConfig& cfg, std::vector<FrozenLevel>* frozen = nullptr,
                                bool capture = false) {
  if (outputs.size() != cfg.lambdas.size() || gts.size() != outputs.size()) {
    throw ConfigError("total_loss: " + std::to_string(outputs.size()) + " levels, " +
                      std::to_string(cfg.lambdas.size()) + " lambda weights, " + std::to_string(gts.size()) +
                      " ground-truth maps");
  }
  if (capture && frozen) frozen->assign(outputs.size(), {});
  LossBreakdown res;
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    const HeadOutput& o = *outputs[i];
    const Tensor& gt = gts[i];
    LevelLoss parts;
    Tensor level = l1_height_loss(o.height, gt);
    parts.height = level.item();
    if (cfg.mu_bin > 0) {
      const Tensor lb = chamfer_bin_loss(o.bins, gt, cfg.chamfer_max_points);
      parts.bin = lb.item();
      level = add(level, mul_scalar(lb, cfg.mu_bin));
    }
    if (cfg.mu_htc > 0 && o.p_fg.defined()) {
      const Tensor lh = htc_loss(o.p_fg, gt, cfg.fg_threshold);
      parts.htc = lh.item();
      level = add(level, mul_scalar(lh, cfg.mu_htc));
    }
    if (cfg.mu_dist > 0 && (cfg.fg_family != Family::none || cfg.bg_family != Family::none)) {
      DcTargets targets;
      if (frozen && !capture) {
        targets = (*frozen)[i].dc;
      } else {
        NoGradGuard guard;
        targets = build_dc_targets(o.prob, gt, o.bins, cfg);
      }
      const Tensor ld = kl_to_targets(o.prob, targets, cfg.prob_floor);
      parts.dist = ld.item();
      level = add(level, mul_scalar(ld, cfg.mu_dist));
      if (frozen && capture) (*frozen)[i].dc = std::move(targets);
    }
    parts.total = level.item();
    res.levels.push_back(parts);
    if (cfg.lambdas[i] != 0.0) total = add(total, mul_scalar(level, cfg.lambdas[i]));
  }
  res.total = total;
  return res;
}

}  // namespace heightbins
