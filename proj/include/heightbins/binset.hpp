#pragma once

#include <vector>

#include "heightbins/errors.hpp"
#include "heightbins/ops.hpp"

namespace heightbins {

/// Per-image adaptive discretization of [h_min, h_max]; batched along axis 0.
struct BinSet {
  Tensor rel_widths;  // [B, N], softmax output
  Tensor edges;       // [B, N+1] meters
  Tensor centers;     // [B, N] meters
  double h_min = 0.0;
  double h_max = 0.0;

  std::size_t n_bins() const { return centers.size(1); }
};

/// Relative widths -> scaled edges and centers. `widths` is [B, N] with rows
/// summing to one; edges span [h_min, h_max].
inline BinSet bins_from_widths(const Tensor& widths, double h_min, double h_max) {
  if (widths.dim() != 2) throw ContractViolation("bins_from_widths: expected [B,N], got " + shape_str(widths.shape()));
  if (!(h_max > h_min)) throw ConfigError("bins_from_widths: h_max must exceed h_min");
  const std::size_t N = widths.size(1);
  // Running-sum operator: edges_j = sum_{i<j} w_i.
  std::vector<double> tri(N * (N + 1), 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j <= N; ++j) tri[i * (N + 1) + j] = 1.0;
  const Tensor cumulative = matmul(widths, Tensor::from({N, N + 1}, std::move(tri)));
  BinSet bins;
  bins.rel_widths = widths;
  bins.edges = add_scalar(mul_scalar(cumulative, h_max - h_min), h_min);
  bins.centers = mul_scalar(add(slice(bins.edges, 1, 0, N), slice(bins.edges, 1, 1, N + 1)), 0.5);
  bins.h_min = h_min;
  bins.h_max = h_max;
  return bins;
}

}  // namespace heightbins
