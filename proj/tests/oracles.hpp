#pragma once

// Independent reference computations shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

namespace oracle {

/// Adaptive Simpson quadrature of f over [a, b].
inline double integrate(const std::function<double(double)>& f, double a, double b, double tol = 1e-13) {
  const std::function<double(double, double, double, double, double, double, double, int)> rec =
      [&](double lo, double hi, double flo, double fmid, double fhi, double whole, double eps, int depth) {
        const double mid = 0.5 * (lo + hi), lm = 0.5 * (lo + mid), rm = 0.5 * (mid + hi);
        const double flm = f(lm), frm = f(rm);
        const double left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid);
        const double right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi);
        if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * eps) return left + right + (left + right - whole) / 15.0;
        return rec(lo, mid, flo, flm, fmid, left, eps / 2, depth - 1) + rec(mid, hi, fmid, frm, fhi, right, eps / 2, depth - 1);
      };
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  return rec(a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 50);
}

inline double gaussian_pdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
}

inline double laplace_pdf(double x, double mu, double b) { return std::exp(-std::abs(x - mu) / b) / (2.0 * b); }

/// Length of [a1, b1] ∩ [a2, b2].
inline double overlap(double a1, double b1, double a2, double b2) { return std::max(0.0, std::min(b1, b2) - std::max(a1, a2)); }

/// Exhaustive nearest-neighbour Chamfer: mean squared distance from each
/// point of one set to its nearest point in the other, summed both ways.
inline double chamfer(const std::vector<double>& a, const std::vector<double>& b) {
  auto dir = [](const std::vector<double>& from, const std::vector<double>& to) {
    double s = 0.0;
    for (double x : from) {
      double best = std::numeric_limits<double>::infinity();
      for (double y : to) best = std::min(best, (x - y) * (x - y));
      s += best;
    }
    return s / static_cast<double>(from.size());
  };
  return dir(a, b) + dir(b, a);
}

/// Single-loop masked RMSE; empty mask yields nothing.
inline std::optional<double> rmse(const std::vector<double>& pred, const std::vector<double>& gt,
                                  const std::vector<bool>& mask) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (mask[i]) {
      s += (pred[i] - gt[i]) * (pred[i] - gt[i]);
      ++n;
    }
  if (n == 0) return std::nullopt;
  return std::sqrt(s / static_cast<double>(n));
}

/// Labels of 4-connected components by repeated relaxation (no flood-fill
/// queue); label 0 marks background, components numbered from 1 in order of
/// their smallest pixel index.
inline std::vector<int> components4(const std::vector<std::uint8_t>& mask, std::size_t w, std::size_t h) {
  std::vector<int> lab(mask.size(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) lab[i] = static_cast<int>(i) + 1;
  for (bool changed = true; changed;) {
    changed = false;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        if (!lab[i]) continue;
        auto pull = [&](std::size_t j) {
          if (lab[j] && lab[j] < lab[i]) {
            lab[i] = lab[j];
            changed = true;
          }
        };
        if (x > 0) pull(i - 1);
        if (x + 1 < w) pull(i + 1);
        if (y > 0) pull(i - w);
        if (y + 1 < h) pull(i + w);
      }
  }
  std::vector<int> remap(mask.size() + 1, 0);
  int next = 0;
  for (auto& l : lab) {
    if (!l) continue;
    if (!remap[l]) remap[l] = ++next;
    l = remap[l];
  }
  return lab;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// RMSE-B from labels: per-building |median(pred) - median(gt)|, then RMSE.
inline std::optional<double> rmse_b(const std::vector<double>& pred, const std::vector<double>& gt,
                                    const std::vector<int>& lab) {
  const int n = lab.empty() ? 0 : *std::max_element(lab.begin(), lab.end());
  if (n == 0) return std::nullopt;
  double s = 0.0;
  for (int k = 1; k <= n; ++k) {
    std::vector<double> p, g;
    for (std::size_t i = 0; i < lab.size(); ++i)
      if (lab[i] == k) {
        p.push_back(pred[i]);
        g.push_back(gt[i]);
      }
    const double e = median(p) - median(g);
    s += e * e;
  }
  return std::sqrt(s / n);
}

}  // namespace oracle
