#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "heightbins/errors.hpp"
#include "heightbins/tensor.hpp"

#ifdef HEIGHTBINS_USE_CBLAS
#include <cblas.h>
#endif

namespace heightbins {

namespace detail {

[[noreturn]] inline void shape_error(const char* op, const std::string& detail) {
  throw ContractViolation(std::string(op) + ": " + detail);
}

inline Shape broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (da != db && da != 1 && db != 1) {
      shape_error(op, "shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

/// Strides that read `in` while iterating over `out` (right-aligned, 0 on
/// broadcast axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> s(out.size(), 0);
  const auto in_strides = strides_of(in);
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) s[off + i] = in[i] == 1 ? 0 : in_strides[i];
  return s;
}

/// Calls f(out_index, a_offset, b_offset) for every element of `out`, in
/// row-major order.
template <class F>
void for_each_strided(const Shape& out, const std::vector<std::size_t>& sa,
                      const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t nd = out.size();
  if (nd == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t total = numel_of(out);
  if (total == 0) return;
  const std::size_t inner = out[nd - 1];
  const std::size_t ia_step = sa[nd - 1];
  const std::size_t ib_step = sb[nd - 1];
  std::vector<std::size_t> idx(nd, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(base + j, ia + j * ia_step, ib + j * ib_step);
    // advance the outer odometer
    for (std::size_t d = nd - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

/// Reference kernel for gemm_acc.
inline void gemm_loops(std::size_t M, std::size_t N, std::size_t K, const double* A, bool trans_a,
                       const double* B, bool trans_b, double* C) {
  if (!trans_a && !trans_b) {
    for (std::size_t i = 0; i < M; ++i) {
      double* c = C + i * N;
      for (std::size_t k = 0; k < K; ++k) {
        const double a = A[i * K + k];
        if (a == 0.0) continue;
        const double* b = B + k * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t k = 0; k < K; ++k) {
      const double* b = B + k * N;
      for (std::size_t i = 0; i < M; ++i) {
        const double a = A[k * M + i];
        if (a == 0.0) continue;
        double* c = C + i * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
      }
    }
  } else {
    // Transpose the operands held in transposed layout, then use the
    // row-streaming kernel above.
    std::vector<double> at, bt;
    if (trans_a) {
      at.resize(M * K);
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t i = 0; i < M; ++i) at[i * K + k] = A[k * M + i];
    }
    if (trans_b) {
      bt.resize(K * N);
      for (std::size_t j = 0; j < N; ++j)
        for (std::size_t k = 0; k < K; ++k) bt[k * N + j] = B[j * K + k];
    }
    gemm_loops(M, N, K, trans_a ? at.data() : A, false, trans_b ? bt.data() : B, false, C);
  }
}

#ifdef HEIGHTBINS_USE_CBLAS
inline void gemm_blas(std::size_t M, std::size_t N, std::size_t K, const double* A, bool trans_a, const double* B,
                      bool trans_b, double* C) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(M), static_cast<int>(N), static_cast<int>(K), 1.0, A,
              static_cast<int>(trans_a ? M : K), B, static_cast<int>(trans_b ? K : N), 1.0, C, static_cast<int>(N));
}

/// Some BLAS builds pick a kernel the host executes incorrectly (seen with
/// AVX-512 kernels under virtualized CPUs). The library is compared once
/// against the reference loops on shapes the model uses; on any mismatch
/// every product falls back to the loops.
inline bool blas_trusted() {
  static const bool ok = [] {
    const std::size_t shapes[][3] = {{2, 3, 4}, {8, 1024, 27}, {16, 256, 72}, {32, 1024, 8}, {64, 4, 576}, {8, 1024, 144}};
    std::uint64_t state = 0x9e3779b97f4a7c15ULL;
    auto next = [&] {
      state = state * 6364136223846793005ULL + 1442695040888963407ULL;
      return static_cast<double>(state >> 11) * 0x1.0p-53 * 2.0 - 1.0;
    };
    for (const auto& sh : shapes) {
      const std::size_t M = sh[0], N = sh[1], K = sh[2];
      std::vector<double> a(M * K), b(K * N);
      for (double& x : a) x = next();
      for (double& x : b) x = next();
      for (int t = 0; t < 4; ++t) {
        const bool ta = t & 1, tb = t & 2;
        std::vector<double> want(M * N, 0.5), got(M * N, 0.5);
        gemm_loops(M, N, K, a.data(), ta, b.data(), tb, want.data());
        gemm_blas(M, N, K, a.data(), ta, b.data(), tb, got.data());
        for (std::size_t i = 0; i < want.size(); ++i) {
          if (!(std::abs(want[i] - got[i]) <= 1e-9 * (1.0 + std::abs(want[i])))) return false;
        }
      }
    }
    return true;
  }();
  return ok;
}
#endif

/// C (MxN) += op(A) op(B), row-major, where op transposes when requested.
/// A is MxK (or KxM when trans_a), B is KxN (or NxK when trans_b).
inline void gemm_acc(std::size_t M, std::size_t N, std::size_t K, const double* A, bool trans_a,
                     const double* B, bool trans_b, double* C) {
  if (M == 0 || N == 0 || K == 0) return;
#ifdef HEIGHTBINS_USE_CBLAS
  if (blas_trusted()) {
    gemm_blas(M, N, K, A, trans_a, B, trans_b, C);
    return;
  }
#endif
  gemm_loops(M, N, K, A, trans_a, B, trans_b, C);
}

}  // namespace detail

/// Pins the matrix backend to one thread so reductions are reproducible.
inline void configure_backend() {
#ifdef HEIGHTBINS_USE_CBLAS
  openblas_set_num_threads(1);
  detail::blas_trusted();
#endif
}

/// Matrix-product backend in use: "blas", "loops (blas rejected)" or "loops".
inline std::string backend_name() {
#ifdef HEIGHTBINS_USE_CBLAS
  return detail::blas_trusted() ? "blas" : "loops (blas rejected)";
#else
  return "loops";
#endif
}

namespace detail {

inline std::size_t normalize_axis(const char* op, long axis, std::size_t nd) {
  const long n = static_cast<long>(nd);
  if (axis < -n || axis >= n) {
    shape_error(op, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(nd));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + n : axis);
}

template <class Fwd, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  if (a.shape() == b.shape()) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
    return make_result(name, a.shape(), std::move(out), {a, b}, [da, db](Node& self) {
      Node& na = *self.inputs[0];
      Node& nb = *self.inputs[1];
      const std::size_t n = self.data.size();
      if (na.requires_grad) {
        auto& g = na.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * da(na.data[i], nb.data[i], self.data[i]);
      }
      if (nb.requires_grad) {
        auto& g = nb.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * db(na.data[i], nb.data[i], self.data[i]);
      }
    });
  }
  Shape out_shape = broadcast_shapes(name, a.shape(), b.shape());
  auto sa = broadcast_strides(a.shape(), out_shape);
  auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<double> out(numel_of(out_shape));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for_each_strided(out_shape, sa, sb,
                   [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = fwd(pa[ia], pb[ib]); });
  return make_result(name, out_shape, std::move(out), {a, b},
                     [da, db, out_shape, sa, sb](Node& self) {
                       Node& na = *self.inputs[0];
                       Node& nb = *self.inputs[1];
                       double* ga = na.requires_grad ? na.ensure_grad().data() : nullptr;
                       double* gb = nb.requires_grad ? nb.ensure_grad().data() : nullptr;
                       for_each_strided(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                         const double g = self.grad[i];
                         if (ga) ga[ia] += g * da(na.data[ia], nb.data[ib], self.data[i]);
                         if (gb) gb[ib] += g * db(na.data[ia], nb.data[ib], self.data[i]);
                       });
                     });
}

/// Elementwise op; `deriv(x, y)` returns dy/dx given input x and output y.
template <class Fwd, class Deriv>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  const double* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(px[i]);
  return make_result(name, x.shape(), std::move(out), {x}, [deriv](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.ensure_grad();
    for (std::size_t i = 0; i < self.data.size(); ++i) g[i] += self.grad[i] * deriv(in.data[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.data()) {
    if (v == 0.0) throw DomainError("div: division by zero in denominator of shape " + shape_str(b.shape()));
  }
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary_op("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& x, double c) {
  return detail::unary_op("mul_scalar", x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

inline Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Elementwise functions

inline Tensor exp(const Tensor& x) {
  return detail::unary_op("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("log: non-positive argument " + std::to_string(v));
  }
  return detail::unary_op("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Tensor sqrt(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v >= 0.0)) throw DomainError("sqrt: negative argument " + std::to_string(v));
  }
  return detail::unary_op(
      "sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor abs(const Tensor& x) {
  return detail::unary_op(
      "abs", x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return detail::unary_op(
      "gelu", x, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      "sigmoid", x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor erf(const Tensor& x) {
  const double k = 2.0 / std::sqrt(std::numbers::pi);
  return detail::unary_op(
      "erf", x, [](double v) { return std::erf(v); }, [k](double v, double) { return k * std::exp(-v * v); });
}

/// max(x, lo); the gradient passes only where x > lo.
inline Tensor clamp_min(const Tensor& x, double lo) {
  return detail::unary_op(
      "clamp_min", x, [lo](double v) { return v > lo ? v : lo; }, [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

/// Elementwise selection `cond ? a : b`; cond is a constant of the same shape.
inline Tensor where(const std::vector<std::uint8_t>& cond, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || cond.size() != a.numel()) {
    detail::shape_error("where", "operands " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                                     " with mask of " + std::to_string(cond.size()) + " elements");
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = cond[i] ? a.data()[i] : b.data()[i];
  return make_result("where", a.shape(), std::move(out), {a, b}, [cond](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.requires_grad) {
      auto& g = na.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (cond[i]) g[i] += self.grad[i];
    }
    if (nb.requires_grad) {
      auto& g = nb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!cond[i]) g[i] += self.grad[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

/// Sums over `axes`; with no axes, reduces everything to a scalar.
inline Tensor sum(const Tensor& x, std::vector<long> axes = {}, bool keepdim = false) {
  const std::size_t nd = x.dim();
  std::vector<bool> reduce(nd, axes.empty());
  for (long a : axes) reduce[detail::normalize_axis("sum", a, nd)] = true;
  Shape kept(nd), out_shape;
  for (std::size_t i = 0; i < nd; ++i) {
    kept[i] = reduce[i] ? 1 : x.shape()[i];
    if (!reduce[i] || keepdim) out_shape.push_back(kept[i]);
  }
  const auto sx = strides_of(x.shape());
  const auto so = detail::broadcast_strides(kept, x.shape());
  std::vector<double> out(numel_of(kept), 0.0);
  const double* px = x.data().data();
  detail::for_each_strided(x.shape(), sx, so, [&](std::size_t, std::size_t ix, std::size_t io) { out[io] += px[ix]; });
  const Shape in_shape = x.shape();
  return make_result("sum", out_shape, std::move(out), {x}, [in_shape, sx, so](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    detail::for_each_strided(in_shape, sx, so,
                             [&](std::size_t, std::size_t ix, std::size_t io) { g[ix] += self.grad[io]; });
  });
}

inline Tensor mean(const Tensor& x, std::vector<long> axes = {}, bool keepdim = false) {
  std::size_t count = 1;
  if (axes.empty()) {
    count = x.numel();
  } else {
    for (long a : axes) count *= x.shape()[detail::normalize_axis("mean", a, x.dim())];
  }
  if (count == 0) detail::shape_error("mean", "empty reduction over shape " + shape_str(x.shape()));
  return mul_scalar(sum(x, std::move(axes), keepdim), 1.0 / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Normalizations

inline Tensor softmax(const Tensor& x, long axis) {
  const std::size_t ax = detail::normalize_axis("softmax", axis, x.dim());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (std::size_t i = ax + 1; i < x.dim(); ++i) inner *= x.shape()[i];
  const std::size_t n = x.shape()[ax];
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -INFINITY;
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, px[base + k * inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(px[base + k * inner] - mx);
        out[base + k * inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= s;
    }
  return make_result("softmax", x.shape(), std::move(out), {x}, [outer, inner, n](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const auto& y = self.data;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += gy[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t i = base + k * inner;
          g[i] += y[i] * (gy[i] - dot);
        }
      }
  });
}

/// Normalizes over the last axis to zero mean, unit variance (no affine).
inline Tensor layer_norm(const Tensor& x, double eps = 1e-5) {
  if (x.dim() == 0) detail::shape_error("layer_norm", "needs rank >= 1");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  std::vector<double> out(x.numel()), inv_std(rows);
  const double* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * n;
    double mu = 0.0;
    for (std::size_t k = 0; k < n; ++k) mu += row[k];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t k = 0; k < n; ++k) var += (row[k] - mu) * (row[k] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t k = 0; k < n; ++k) out[r * n + k] = (row[k] - mu) * inv_std[r];
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x}, [n, rows, inv_std](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* gy = self.grad.data() + r * n;
      double sum_g = 0.0, sum_gy = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        sum_g += gy[k];
        sum_gy += gy[k] * y[k];
      }
      for (std::size_t k = 0; k < n; ++k) {
        g[r * n + k] += inv_std[r] * (gy[k] - inv_n * sum_g - y[k] * inv_n * sum_gy);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Batched matrix product: [..., M, K] x [..., K, N]. The right operand may
/// also be a plain [K, N] matrix shared across the batch.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || b.dim() < 2) {
    detail::shape_error("matmul", "operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                                      shape_str(b.shape()));
  }
  const std::size_t M = a.shape()[a.dim() - 2], K = a.shape().back();
  const std::size_t Kb = b.shape()[b.dim() - 2], N = b.shape().back();
  const bool shared_b = b.dim() == 2;
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  if (K != Kb || (!shared_b && a_batch != b_batch)) {
    detail::shape_error("matmul", "incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t batch = numel_of(a_batch);
  Shape out_shape = a_batch;
  out_shape.push_back(M);
  out_shape.push_back(N);
  std::vector<double> out(batch * M * N, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t s = 0; s < batch; ++s) {
    detail::gemm_acc(M, N, K, pa + s * M * K, false, pb + (shared_b ? 0 : s * K * N), false, out.data() + s * M * N);
  }
  return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                     [batch, M, N, K, shared_b](Node& self) {
                       Node& na = *self.inputs[0];
                       Node& nb = *self.inputs[1];
                       const double* g = self.grad.data();
                       for (std::size_t s = 0; s < batch; ++s) {
                         const double* gs = g + s * M * N;
                         const double* bs = nb.data.data() + (shared_b ? 0 : s * K * N);
                         if (na.requires_grad) {
                           // dA = dC B^T
                           detail::gemm_acc(M, K, N, gs, false, bs, true, na.ensure_grad().data() + s * M * K);
                         }
                         if (nb.requires_grad) {
                           // dB = A^T dC
                           detail::gemm_acc(K, N, M, na.data.data() + s * M * K, true, gs, false,
                                            nb.ensure_grad().data() + (shared_b ? 0 : s * K * N));
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Convolution and resampling

namespace detail {

inline void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t stride,
                   std::size_t pad, std::size_t Ho, std::size_t Wo, double* col) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* row = col + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            const bool inside = iy >= 0 && iy < static_cast<long>(H) && ix >= 0 && ix < static_cast<long>(W);
            row[oy * Wo + ox] = inside ? x[(c * H + iy) * W + ix] : 0.0;
          }
        }
      }
}

inline void col2im_acc(const double* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
                       std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, double* gx) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < k; ++ki)
      for (std::size_t kj = 0; kj < k; ++kj) {
        const double* row = col + ((c * k + ki) * k + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            gx[(c * H + iy) * W + ix] += row[oy * Wo + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution over NCHW input with an [O, C, k, k] kernel and optional
/// [O] bias. Supported forms: 1x1 (stride 1, no padding), 3x3 (stride 1,
/// padding 1), and k x k patchify (stride k, no padding).
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
  if (x.dim() != 4 || weight.dim() != 4) {
    detail::shape_error("conv2d", "expects NCHW input and OCkk kernel, got " + shape_str(x.shape()) + " and " +
                                      shape_str(weight.shape()));
  }
  const std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t O = weight.size(0), k = weight.size(2);
  if (weight.size(1) != C || weight.size(3) != k) {
    detail::shape_error("conv2d", "kernel " + shape_str(weight.shape()) + " does not match input " +
                                      shape_str(x.shape()));
  }
  const bool one_by_one = k == 1 && stride == 1 && padding == 0;
  const bool three_by_three = k == 3 && stride == 1 && padding == 1;
  const bool patchify = k > 1 && stride == k && padding == 0;
  if (!(one_by_one || three_by_three || patchify)) {
    detail::shape_error("conv2d", "unsupported kernel/stride/padding " + std::to_string(k) + "/" +
                                      std::to_string(stride) + "/" + std::to_string(padding));
  }
  if (patchify && (H % k != 0 || W % k != 0)) {
    detail::shape_error("conv2d", "patch size " + std::to_string(k) + " does not divide input " + shape_str(x.shape()));
  }
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != O)) {
    detail::shape_error("conv2d", "bias shape " + shape_str(bias.shape()) + " for " + std::to_string(O) + " outputs");
  }
  const std::size_t Ho = (H + 2 * padding - k) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - k) / stride + 1;
  const std::size_t P = Ho * Wo, CK = C * k * k;

  std::vector<double> out(B * O * P, 0.0);
  std::vector<double> col(one_by_one ? 0 : CK * P);
  const double* px = x.data().data();
  const double* pw = weight.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    const double* xb = px + b * C * H * W;
    const double* cb = xb;
    if (!one_by_one) {
      detail::im2col(xb, C, H, W, k, stride, padding, Ho, Wo, col.data());
      cb = col.data();
    }
    double* ob = out.data() + b * O * P;
    if (bias.defined()) {
      for (std::size_t o = 0; o < O; ++o) std::fill(ob + o * P, ob + (o + 1) * P, bias.data()[o]);
    }
    detail::gemm_acc(O, P, CK, pw, false, cb, false, ob);
  }

  Shape out_shape{B, O, Ho, Wo};
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result("conv2d", std::move(out_shape), std::move(out), inputs,
                     [=](Node& self) {
                       Node& nx = *self.inputs[0];
                       Node& nw = *self.inputs[1];
                       Node* nb = self.inputs.size() > 2 ? self.inputs[2].get() : nullptr;
                       std::vector<double> col(one_by_one ? 0 : CK * P);
                       std::vector<double> dcol(one_by_one ? 0 : CK * P);
                       for (std::size_t b = 0; b < B; ++b) {
                         const double* gb = self.grad.data() + b * O * P;
                         const double* xb = nx.data.data() + b * C * H * W;
                         if (nb && nb->requires_grad) {
                           auto& g = nb->ensure_grad();
                           for (std::size_t o = 0; o < O; ++o)
                             for (std::size_t p = 0; p < P; ++p) g[o] += gb[o * P + p];
                         }
                         if (nw.requires_grad) {
                           const double* cb = xb;
                           if (!one_by_one) {
                             detail::im2col(xb, C, H, W, k, stride, padding, Ho, Wo, col.data());
                             cb = col.data();
                           }
                           // dW (O x CK) += dOut (O x P) * col^T
                           detail::gemm_acc(O, CK, P, gb, false, cb, true, nw.ensure_grad().data());
                         }
                         if (nx.requires_grad) {
                           double* gx = nx.ensure_grad().data() + b * C * H * W;
                           if (one_by_one) {
                             detail::gemm_acc(CK, P, O, nw.data.data(), true, gb, false, gx);
                           } else {
                             std::fill(dcol.begin(), dcol.end(), 0.0);
                             detail::gemm_acc(CK, P, O, nw.data.data(), true, gb, false, dcol.data());
                             detail::col2im_acc(dcol.data(), C, H, W, k, stride, padding, Ho, Wo, gx);
                           }
                         }
                       }
                     });
}

/// Non-overlapping k x k average pooling over NCHW input.
inline Tensor avg_pool2d(const Tensor& x, std::size_t k) {
  if (x.dim() != 4 || k == 0 || x.size(2) % k != 0 || x.size(3) % k != 0) {
    detail::shape_error("avg_pool2d", "window " + std::to_string(k) + " does not tile " + shape_str(x.shape()));
  }
  const std::size_t BC = x.size(0) * x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t Ho = H / k, Wo = W / k;
  const double scale = 1.0 / static_cast<double>(k * k);
  std::vector<double> out(BC * Ho * Wo, 0.0);
  const double* px = x.data().data();
  for (std::size_t c = 0; c < BC; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) out[(c * Ho + y / k) * Wo + xx / k] += px[(c * H + y) * W + xx] * scale;
  return make_result("avg_pool2d", {x.size(0), x.size(1), Ho, Wo}, std::move(out), {x},
                     [=](Node& self) {
                       auto& g = self.inputs[0]->ensure_grad();
                       for (std::size_t c = 0; c < BC; ++c)
                         for (std::size_t y = 0; y < H; ++y)
                           for (std::size_t xx = 0; xx < W; ++xx)
                             g[(c * H + y) * W + xx] += self.grad[(c * Ho + y / k) * Wo + xx / k] * scale;
                     });
}

/// Nearest-neighbour upsampling of NCHW input by an integer factor.
inline Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  if (x.dim() != 4 || factor == 0) detail::shape_error("upsample_nearest", "expects NCHW input, got " + shape_str(x.shape()));
  const std::size_t BC = x.size(0) * x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t Ho = H * factor, Wo = W * factor;
  std::vector<double> out(BC * Ho * Wo);
  const double* px = x.data().data();
  for (std::size_t c = 0; c < BC; ++c)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xx = 0; xx < Wo; ++xx) out[(c * Ho + y) * Wo + xx] = px[(c * H + y / factor) * W + xx / factor];
  return make_result("upsample_nearest", {x.size(0), x.size(1), Ho, Wo}, std::move(out), {x},
                     [=](Node& self) {
                       auto& g = self.inputs[0]->ensure_grad();
                       for (std::size_t c = 0; c < BC; ++c)
                         for (std::size_t y = 0; y < Ho; ++y)
                           for (std::size_t xx = 0; xx < Wo; ++xx)
                             g[(c * H + y / factor) * W + xx / factor] += self.grad[(c * Ho + y) * Wo + xx];
                     });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    detail::shape_error("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// General axis permutation: output axis i is input axis dims[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& dims) {
  const std::size_t nd = x.dim();
  if (dims.size() != nd) detail::shape_error("permute", "axis list length does not match rank " + std::to_string(nd));
  std::vector<bool> used(nd, false);
  Shape out_shape(nd);
  const auto in_strides = strides_of(x.shape());
  std::vector<std::size_t> read(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    if (dims[i] >= nd || used[dims[i]]) detail::shape_error("permute", "invalid axis permutation");
    used[dims[i]] = true;
    out_shape[i] = x.shape()[dims[i]];
    read[i] = in_strides[dims[i]];
  }
  const auto out_strides = strides_of(out_shape);
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  detail::for_each_strided(out_shape, read, out_strides,
                           [&](std::size_t i, std::size_t ix, std::size_t) { out[i] = px[ix]; });
  return make_result("permute", out_shape, std::move(out), {x}, [out_shape, read, out_strides](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    detail::for_each_strided(out_shape, read, out_strides,
                             [&](std::size_t i, std::size_t ix, std::size_t) { g[ix] += self.grad[i]; });
  });
}

inline Tensor transpose(const Tensor& x, long a, long b) {
  const std::size_t ia = detail::normalize_axis("transpose", a, x.dim());
  const std::size_t ib = detail::normalize_axis("transpose", b, x.dim());
  std::vector<std::size_t> dims(x.dim());
  std::iota(dims.begin(), dims.end(), 0);
  std::swap(dims[ia], dims[ib]);
  return permute(x, dims);
}

inline Tensor concat(const std::vector<Tensor>& xs, long axis) {
  if (xs.empty()) detail::shape_error("concat", "no operands");
  const std::size_t nd = xs[0].dim();
  const std::size_t ax = detail::normalize_axis("concat", axis, nd);
  Shape out_shape = xs[0].shape();
  out_shape[ax] = 0;
  for (const auto& t : xs) {
    bool ok = t.dim() == nd;
    for (std::size_t i = 0; ok && i < nd; ++i) ok = i == ax || t.shape()[i] == xs[0].shape()[i];
    if (!ok) detail::shape_error("concat", "shape " + shape_str(t.shape()) + " incompatible with " + shape_str(xs[0].shape()));
    out_shape[ax] += t.shape()[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= out_shape[i];
  for (std::size_t i = ax + 1; i < nd; ++i) inner *= out_shape[i];
  const std::size_t out_row = out_shape[ax] * inner;
  std::vector<double> out(numel_of(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& t : xs) {
    const std::size_t w = t.shape()[ax] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(t.data().data() + o * w, w, out.data() + o * out_row + offset);
    widths.push_back(w);
    offset += w;
  }
  return make_result("concat", out_shape, std::move(out), xs, [outer, out_row, widths](Node& self) {
    std::size_t offset = 0;
    for (std::size_t t = 0; t < widths.size(); ++t) {
      Node& in = *self.inputs[t];
      const std::size_t w = widths[t];
      if (in.requires_grad) {
        auto& g = in.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < w; ++j) g[o * w + j] += self.grad[o * out_row + offset + j];
      }
      offset += w;
    }
  });
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, long axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::normalize_axis("slice", axis, x.dim());
  if (begin > end || end > x.shape()[ax]) {
    detail::shape_error("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside axis of " +
                                     std::to_string(x.shape()[ax]));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (std::size_t i = ax + 1; i < x.dim(); ++i) inner *= x.shape()[i];
  const std::size_t in_row = x.shape()[ax] * inner;
  const std::size_t w = (end - begin) * inner;
  const std::size_t off = begin * inner;
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  std::vector<double> out(outer * w);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(x.data().data() + o * in_row + off, w, out.data() + o * w);
  return make_result("slice", std::move(out_shape), std::move(out), {x}, [outer, in_row, w, off](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < w; ++j) g[o * in_row + off + j] += self.grad[o * w + j];
  });
}

/// Gathers entries along `axis` at the given indices (repeats allowed).
inline Tensor index_select(const Tensor& x, long axis, const std::vector<std::size_t>& indices) {
  const std::size_t ax = detail::normalize_axis("index_select", axis, x.dim());
  const std::size_t n = x.shape()[ax];
  for (std::size_t i : indices)
    if (i >= n) detail::shape_error("index_select", "index " + std::to_string(i) + " out of range " + std::to_string(n));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.shape()[i];
  for (std::size_t i = ax + 1; i < x.dim(); ++i) inner *= x.shape()[i];
  Shape out_shape = x.shape();
  out_shape[ax] = indices.size();
  const std::size_t m = indices.size();
  std::vector<double> out(outer * m * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < m; ++j)
      std::copy_n(x.data().data() + (o * n + indices[j]) * inner, inner, out.data() + (o * m + j) * inner);
  return make_result("index_select", std::move(out_shape), std::move(out), {x}, [=](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < inner; ++i) g[(o * n + indices[j]) * inner + i] += self.grad[(o * m + j) * inner + i];
  });
}

inline Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (detail::broadcast_shapes("broadcast_to", x.shape(), shape) != shape) {
    detail::shape_error("broadcast_to", "cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const auto sx = detail::broadcast_strides(x.shape(), shape);
  const auto so = strides_of(shape);
  std::vector<double> out(numel_of(shape));
  const double* px = x.data().data();
  detail::for_each_strided(shape, sx, so, [&](std::size_t i, std::size_t ix, std::size_t) { out[i] = px[ix]; });
  return make_result("broadcast_to", shape, std::move(out), {x}, [shape, sx, so](Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    detail::for_each_strided(shape, sx, so, [&](std::size_t i, std::size_t ix, std::size_t) { g[ix] += self.grad[i]; });
  });
}

}  // namespace heightbins
