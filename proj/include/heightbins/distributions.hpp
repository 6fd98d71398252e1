#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "heightbins/errors.hpp"
#include "heightbins/special.hpp"

namespace heightbins {

enum class Family { gaussian, laplace, uniform, delta, none };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::gaussian: return "gaussian";
    case Family::laplace: return "laplace";
    case Family::uniform: return "uniform";
    case Family::delta: return "delta";
    case Family::none: return "none";
  }
  return "none";
}

inline std::optional<Family> parse_family(const std::string& s) {
  for (Family f : {Family::gaussian, Family::laplace, Family::uniform, Family::delta, Family::none}) {
    if (to_string(f) == s) return f;
  }
  return std::nullopt;
}

/// Reference distribution centered at the ground-truth height. `scale` is
/// sigma (gaussian), b (laplace) or the full width w (uniform); unused for
/// delta and none.
struct ReferenceDistribution {
  Family family = Family::none;
  double location = 0.0;
  double scale = 0.0;
};

namespace detail {
inline void check_mode_inputs(const char* fn, double mode_prob, double bin_width) {
  if (!(bin_width > 0.0)) throw ContractViolation(std::string(fn) + ": bin width must be positive, got " + std::to_string(bin_width));
  if (!(mode_prob > 0.0 && mode_prob < 1.0)) {
    throw DomainError(std::string(fn) + ": mode probability must lie in (0,1), got " + std::to_string(mode_prob));
  }
}
}  // namespace detail

/// Gaussian scale whose mass over a bin of width `bin_width` centered on the
/// mean equals `mode_prob`: sigma = width / (2 sqrt2 ierf(P_m)).
inline double solve_gaussian_sigma(double mode_prob, double bin_width) {
  detail::check_mode_inputs("solve_gaussian_sigma", mode_prob, bin_width);
  return bin_width / (2.0 * std::numbers::sqrt2 * ierf(mode_prob));
}

/// Laplace scale for the same condition: b = -width / (2 ln(1 - P_m)).
inline double solve_laplace_b(double mode_prob, double bin_width) {
  detail::check_mode_inputs("solve_laplace_b", mode_prob, bin_width);
  return -bin_width / (2.0 * std::log1p(-mode_prob));
}

/// Uniform support [a, b] of width w = width / P_m centered on `center`.
inline std::pair<double, double> solve_uniform_bounds(double mode_prob, double bin_width, double center) {
  if (!(bin_width > 0.0)) throw ContractViolation("solve_uniform_bounds: bin width must be positive");
  if (!(mode_prob > 0.0 && mode_prob <= 1.0)) {
    throw DomainError("solve_uniform_bounds: mode probability must lie in (0,1], got " + std::to_string(mode_prob));
  }
  const double half = bin_width / (2.0 * mode_prob);
  return {center - half, center + half};
}

inline ReferenceDistribution make_reference(Family family, double mode_prob, double bin_width, double center) {
  ReferenceDistribution d{family, center, 0.0};
  switch (family) {
    case Family::gaussian: d.scale = solve_gaussian_sigma(mode_prob, bin_width); break;
    case Family::laplace: d.scale = solve_laplace_b(mode_prob, bin_width); break;
    case Family::uniform: {
      auto [a, b] = solve_uniform_bounds(mode_prob, bin_width, center);
      d.scale = b - a;
      break;
    }
    case Family::delta:
    case Family::none: break;
  }
  return d;
}

/// Cumulative distribution function; delta is a unit step at the location.
inline double cdf(const ReferenceDistribution& d, double x) {
  const double z = x - d.location;
  switch (d.family) {
    case Family::gaussian: return 0.5 * std::erfc(-z / (d.scale * std::numbers::sqrt2));
    case Family::laplace: return z < 0.0 ? 0.5 * std::exp(z / d.scale) : 1.0 - 0.5 * std::exp(-z / d.scale);
    case Family::uniform: return std::clamp(z / d.scale + 0.5, 0.0, 1.0);
    case Family::delta: return z >= 0.0 ? 1.0 : 0.0;
    case Family::none: return 0.0;
  }
  return 0.0;
}

/// Index of the bin holding `h` in strictly increasing `edges` (N+1 values).
/// A value on an interior edge belongs to the lower bin; values outside
/// [edges.front(), edges.back()] have no bin.
inline std::optional<std::size_t> containing_bin(std::span<const double> edges, double h) {
  if (edges.size() < 2 || h < edges.front() || h > edges.back()) return std::nullopt;
  const auto it = std::lower_bound(edges.begin() + 1, edges.end(), h);
  return static_cast<std::size_t>(it - edges.begin()) - 1;
}

/// Reference bin masses P~_i = F(b_i) - F(b_{i-1}). Mass outside the edge
/// range is dropped. Delta puts all mass on the containing bin.
inline void reference_bin_probs(const ReferenceDistribution& d, std::span<const double> edges, std::span<double> out) {
  const std::size_t N = edges.size() - 1;
  if (out.size() != N) throw ContractViolation("reference_bin_probs: output length does not match bin count");
  std::fill(out.begin(), out.end(), 0.0);
  if (d.family == Family::none) return;
  if (d.family == Family::delta) {
    if (auto j = containing_bin(edges, d.location)) out[*j] = 1.0;
    return;
  }
  double prev = cdf(d, edges[0]);
  for (std::size_t i = 0; i < N; ++i) {
    const double next = cdf(d, edges[i + 1]);
    out[i] = std::max(0.0, next - prev);
    prev = next;
  }
}

inline std::vector<double> reference_bin_probs(const ReferenceDistribution& d, std::span<const double> edges) {
  std::vector<double> out(edges.size() - 1);
  reference_bin_probs(d, edges, out);
  return out;
}

}  // namespace heightbins
