#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "heightbins/errors.hpp"

namespace heightbins {

inline double erf(double x) { return std::erf(x); }

/// Inverse of the Gaussian error function on (-1, 1).
///
/// Starts from Giles' single-precision rational approximation and polishes
/// with Newton steps on erf, falling back to bisection whenever a step would
/// leave the current bracket. Converges to |erf(x) - p| < 1e-12 across the
/// open interval.
inline double ierf(double p) {
  if (!(std::abs(p) < 1.0)) {
    throw DomainError("ierf: argument must satisfy |p| < 1, got " + std::to_string(p));
  }
  if (p == 0.0) return 0.0;

  double x;
  {
    double w = -std::log((1.0 - p) * (1.0 + p));
    double q;
    if (w < 5.0) {
      w -= 2.5;
      q = 2.81022636e-08;
      q = 3.43273939e-07 + q * w;
      q = -3.5233877e-06 + q * w;
      q = -4.39150654e-06 + q * w;
      q = 0.00021858087 + q * w;
      q = -0.00125372503 + q * w;
      q = -0.00417768164 + q * w;
      q = 0.246640727 + q * w;
      q = 1.50140941 + q * w;
    } else {
      w = std::sqrt(w) - 3.0;
      q = -0.000200214257;
      q = 0.000100950558 + q * w;
      q = 0.00134934322 + q * w;
      q = -0.00367342844 + q * w;
      q = 0.00573950773 + q * w;
      q = -0.0076224613 + q * w;
      q = 0.00943887047 + q * w;
      q = 1.00167406 + q * w;
      q = 2.83297682 + q * w;
    }
    x = q * p;
  }

  // erf is odd and increasing; bracket the root on the side of p.
  double lo = p > 0 ? 0.0 : -6.0;
  double hi = p > 0 ? 6.0 : 0.0;
  const double slope_scale = 2.0 / std::sqrt(std::numbers::pi);
  for (int iter = 0; iter < 100; ++iter) {
    const double f = std::erf(x) - p;
    if (f == 0.0) break;
    if (f > 0) hi = std::min(hi, x);
    else lo = std::max(lo, x);
    const double deriv = slope_scale * std::exp(-x * x);
    double next = x - f / deriv;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    if (std::abs(next - x) <= 1e-17 * std::max(1.0, std::abs(x))) {
      x = next;
      break;
    }
    x = next;
  }
  return x;
}

}  // namespace heightbins
