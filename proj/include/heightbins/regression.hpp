#pragma once

#include <cmath>
#include <string>

#include "heightbins/errors.hpp"
#include "heightbins/binset.hpp"
#include "heightbins/ops.hpp"

namespace heightbins {

/// Weighted average of bin centers: H[b,h,w] = sum_i P[b,i,h,w] c[b,i].
inline Tensor predict_heights(const Tensor& prob, const BinSet& bins) {
  if (prob.dim() != 4 || prob.size(0) != bins.centers.size(0) || prob.size(1) != bins.n_bins()) {
    throw ContractViolation("predict_heights: probabilities " + shape_str(prob.shape()) + " vs centers " +
                            shape_str(bins.centers.shape()));
  }
  const std::size_t B = prob.size(0), N = prob.size(1), HW = prob.size(2) * prob.size(3);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < HW; ++p) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) s += prob.data()[(b * N + n) * HW + p];
      if (std::abs(s - 1.0) > 1e-4) {
        throw ContractViolation("predict_heights: bin probabilities sum to " + std::to_string(s) + " at pixel " +
                                std::to_string(p) + " of image " + std::to_string(b));
      }
    }
  const Tensor c = reshape(bins.centers, {B, N, 1, 1});
  return sum(mul(prob, c), {1}, true);
}

}  // namespace heightbins
