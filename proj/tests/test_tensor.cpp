#include <gtest/gtest.h>

#include <array>
#include <bit>
#include <cmath>
#include <functional>
#include <random>

#include "heightbins/gradcheck.hpp"
#include "heightbins/ops.hpp"
#include "heightbins/optim.hpp"
#include "heightbins/params.hpp"
#include "heightbins/special.hpp"

using namespace heightbins;

namespace {

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Central differences on every entry of every input; returns the worst
// relative error against the recorded gradient.
double worst_fd_error(std::vector<Tensor> inputs, const std::function<Tensor(const std::vector<Tensor>&)>& f) {
  for (auto& t : inputs) t.zero_grad();
  backward(f(inputs));
  double worst = 0.0;
  for (auto& t : inputs) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      double hi, lo;
      {
        NoGradGuard g;
        w[i] = orig + 1e-5;
        hi = f(inputs).item();
        w[i] = orig - 1e-5;
        lo = f(inputs).item();
        w[i] = orig;
      }
      const double numeric = (hi - lo) / 2e-5;
      const double a = analytic.empty() ? 0.0 : analytic[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3}));
    }
  }
  return worst;
}

}  // namespace

TEST(Tensor, DataLengthMustMatchShape) {
  EXPECT_THROW(Tensor::from({2, 3}, std::vector<double>(5)), ContractViolation);
  const Tensor t = Tensor::from({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.numel(), 6u);
}

TEST(Ops, SoftmaxOfZerosIsUniform) {
  const Tensor s = softmax(Tensor::zeros({4}), 0);
  for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Ops, IdentityCases) {
  EXPECT_EQ(erf(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
}

TEST(Ops, SoftmaxRowsSumToOneAndArePositive) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor(rng, {5, 7, 3}, -30.0, 30.0);
  for (long axis = 0; axis < 3; ++axis) {
    const Tensor s = softmax(x, axis);
    const Tensor total = sum(s, {axis});
    for (double v : total.data()) EXPECT_NEAR(v, 1.0, 1e-9);
    for (double v : s.data()) EXPECT_GT(v, 0.0);
  }
}

TEST(Ops, GradientOfSumOfSoftmaxIsZero) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor(rng, {3, 4}, -2.0, 2.0);
  backward(sum(softmax(x, 1)));
  for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Ops, ShapeMismatchNamesOperation) {
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected a contract violation";
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
  }
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5})), ContractViolation);
}

TEST(Ops, LogOfNonPositiveIsDomainError) {
  EXPECT_THROW(log(Tensor::from({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW(sqrt(Tensor::from({1}, {-1.0})), DomainError);
  EXPECT_THROW(div(Tensor::from({1}, {1.0}), Tensor::from({1}, {0.0})), DomainError);
}

TEST(Ops, MatmulAgainstLoopOracle) {
  std::mt19937_64 rng(9);
  for (auto [M, K, N] : std::vector<std::array<std::size_t, 3>>{{1, 1, 1}, {3, 5, 2}, {8, 144, 33}, {17, 4, 64}}) {
    const Tensor a = random_tensor(rng, {M, K}, -1, 1), b = random_tensor(rng, {K, N}, -1, 1);
    const Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += a.at(i * K + k) * b.at(k * N + j);
        EXPECT_NEAR(c.at(i * N + j), s, 1e-12);
      }
  }
}

TEST(Ops, Conv2dAgainstLoopOracle) {
  std::mt19937_64 rng(5);
  const std::size_t B = 2, C = 3, H = 6, W = 6, O = 4;
  for (auto [k, stride, pad] : std::vector<std::array<std::size_t, 3>>{{1, 1, 0}, {3, 1, 1}, {2, 2, 0}}) {
    const Tensor x = random_tensor(rng, {B, C, H, W}, -1, 1);
    const Tensor w = random_tensor(rng, {O, C, k, k}, -1, 1);
    const Tensor bias = random_tensor(rng, {O}, -1, 1);
    const Tensor y = conv2d(x, w, bias, stride, pad);
    const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{B, O, Ho, Wo}));
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t i = 0; i < Ho; ++i)
          for (std::size_t j = 0; j < Wo; ++j) {
            double s = bias.at(o);
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t u = 0; u < k; ++u)
                for (std::size_t v = 0; v < k; ++v) {
                  const long yy = static_cast<long>(i * stride + u) - static_cast<long>(pad);
                  const long xx = static_cast<long>(j * stride + v) - static_cast<long>(pad);
                  if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                  s += x.at(((b * C + c) * H + yy) * W + xx) * w.at(((o * C + c) * k + u) * k + v);
                }
            EXPECT_NEAR(y.at(((b * O + o) * Ho + i) * Wo + j), s, 1e-12);
          }
  }
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwiceInput) {
  Tensor x = Tensor::from({4}, {-1.5, 0.0, 2.0, 3.25}, true);
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(x.grad()[i], 2.0 * x.at(i));
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  EXPECT_THROW(backward(mul_scalar(x, 2.0)), ContractViolation);
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    std::mt19937_64 rng(11);
    Tensor x = random_tensor(rng, {3, 4}, -2, 2);
    Tensor w = random_tensor(rng, {4, 5}, -2, 2);
    backward(sum(gelu(matmul(layer_norm(x), w))));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, PrimitivesMatchFiniteDifferencesSeed42) {
  std::mt19937_64 rng(42);
  using V = std::vector<Tensor>;
  const auto R = [&](Shape s, double lo = -2.0, double hi = 2.0) { return random_tensor(rng, std::move(s), lo, hi); };
  const Tensor w = R({3, 4});
  const auto weighted = [w](const Tensor& y) { return sum(mul(y, w.detach())); };
  struct Case {
    const char* name;
    V in;
    std::function<Tensor(const V&)> f;
  };
  std::vector<Case> cases = {
      {"add", {R({3, 4}), R({3, 4})}, [&](const V& x) { return weighted(add(x[0], x[1])); }},
      {"sub", {R({3, 4}), R({3, 4})}, [&](const V& x) { return weighted(sub(x[0], x[1])); }},
      {"mul", {R({3, 4}), R({3, 4})}, [&](const V& x) { return weighted(mul(x[0], x[1])); }},
      {"div", {R({3, 4}), R({3, 4}, 0.5, 2.0)}, [&](const V& x) { return weighted(div(x[0], x[1])); }},
      {"exp", {R({3, 4})}, [&](const V& x) { return weighted(exp(x[0])); }},
      {"log", {R({3, 4}, 0.2, 3.0)}, [&](const V& x) { return weighted(log(x[0])); }},
      {"sqrt", {R({3, 4}, 0.2, 3.0)}, [&](const V& x) { return weighted(sqrt(x[0])); }},
      {"abs", {R({3, 4}, 0.1, 2.0)}, [&](const V& x) { return weighted(abs(x[0])); }},
      {"relu", {R({3, 4}, 0.1, 2.0)}, [&](const V& x) { return weighted(relu(x[0])); }},
      {"gelu", {R({3, 4})}, [&](const V& x) { return weighted(gelu(x[0])); }},
      {"sigmoid", {R({3, 4})}, [&](const V& x) { return weighted(sigmoid(x[0])); }},
      {"erf", {R({3, 4})}, [&](const V& x) { return weighted(erf(x[0])); }},
      {"softmax", {R({3, 4})}, [&](const V& x) { return weighted(softmax(x[0], 1)); }},
      {"layer_norm", {R({3, 4})}, [&](const V& x) { return weighted(layer_norm(x[0])); }},
      {"matmul", {R({3, 5}), R({5, 4})}, [&](const V& x) { return weighted(matmul(x[0], x[1])); }},
      {"transpose", {R({4, 3})}, [&](const V& x) { return weighted(transpose(x[0], 0, 1)); }},
      {"reshape", {R({2, 6})}, [&](const V& x) { return weighted(reshape(x[0], {3, 4})); }},
      {"concat", {R({3, 1}), R({3, 3})}, [&](const V& x) { return weighted(concat({x[0], x[1]}, 1)); }},
      {"slice", {R({3, 6})}, [&](const V& x) { return weighted(slice(x[0], 1, 1, 5)); }},
      {"sum_axis", {R({3, 4, 2})}, [&](const V& x) { return weighted(sum(x[0], {2})); }},
      {"mean_axis", {R({3, 2, 4})}, [&](const V& x) { return weighted(mean(x[0], {1})); }},
      {"conv2d", {R({1, 2, 3, 4}), R({1, 2, 3, 3}), R({1})},
       [&](const V& x) { return weighted(reshape(conv2d(x[0], x[1], x[2], 1, 1), {3, 4})); }},
  };
  for (auto& c : cases) EXPECT_LT(worst_fd_error(c.in, c.f), 1e-4) << c.name;
}

TEST(Gradcheck, SuitePassesForSeedsZeroToFour) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    GradCheckOptions opt;
    opt.seed = seed;
    const auto rep = run_gradcheck(opt);
    EXPECT_TRUE(rep.passed()) << "seed " << seed << ": " << rep.to_json().dump();
  }
}

TEST(Ierf, Anchors) {
  EXPECT_EQ(ierf(0.0), 0.0);
  EXPECT_NEAR(ierf(std::erf(1.0)), 1.0, 1e-12);
  // Independent oracle: bisection on std::erf.
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (std::erf(mid) < 0.5 ? lo : hi) = mid;
  }
  EXPECT_NEAR(ierf(0.5), 0.5 * (lo + hi), 1e-12);
  EXPECT_NEAR(ierf(0.5), 0.4769362762, 1e-10);
}

TEST(Ierf, RoundTripAndMonotoneOnGrid) {
  double prev = -INFINITY;
  for (int i = -999; i <= 999; ++i) {
    const double p = i / 1000.0;
    const double x = ierf(p);
    EXPECT_LT(std::abs(std::erf(x) - p), 1e-12) << p;
    EXPECT_GT(x, prev);
    prev = x;
  }
}

TEST(Ierf, OutOfDomainThrows) {
  EXPECT_THROW(ierf(1.0), DomainError);
  EXPECT_THROW(ierf(-1.0), DomainError);
  EXPECT_THROW(ierf(std::nan("")), DomainError);
}

TEST(Optimizer, ZeroGradientZeroDecayLeavesParameters) {
  ParameterStore store;
  Tensor w = store.add("w", {3}, {1.0, -2.0, 0.5});
  w.grad_buffer().assign(3, 0.0);
  OptimizerState st;
  st.weight_decay = 0.0;
  optimizer_step(store, st);
  EXPECT_EQ(std::vector<double>(w.data().begin(), w.data().end()), (std::vector<double>{1.0, -2.0, 0.5}));
  EXPECT_EQ(st.step, 1);
}

TEST(Optimizer, OneStepDescends) {
  ParameterStore store;
  Tensor w = store.add("w", {1}, {1.0});
  backward(sum(mul(w, w)));
  OptimizerState st;
  st.lr = 0.1;
  optimizer_step(store, st);
  EXPECT_LT(std::abs(w.at(0)), 1.0);
}

TEST(Optimizer, QuadraticConvergesToClosedFormMinimum) {
  // f(a, b) = (a - 3)^2 + 10 (b + 1)^2, minimum at (3, -1).
  ParameterStore store;
  Tensor p = store.add("p", {2}, {0.0, 0.0});
  OptimizerState st;
  st.lr = 0.1;
  st.weight_decay = 0.0;
  const Tensor target = Tensor::from({2}, {3.0, -1.0});
  const Tensor scale = Tensor::from({2}, {1.0, 10.0});
  auto grad_norm = [&] {
    const double ga = 2.0 * (p.at(0) - 3.0), gb = 20.0 * (p.at(1) + 1.0);
    return std::hypot(ga, gb);
  };
  // Adam moves about lr per step: travel at a fixed rate, then anneal.
  for (int i = 0; i < 6000; ++i) {
    store.zero_grad();
    const Tensor d = sub(p, target);
    backward(sum(mul(scale, mul(d, d))));
    optimizer_step(store, st);
    if (i >= 1000) st.lr *= 0.995;
  }
  EXPECT_LT(grad_norm(), 1e-6);
}

TEST(Optimizer, NonFiniteGradientNamesParameter) {
  ParameterStore store;
  Tensor a = store.add("layer.weight", {2}, {1.0, 1.0});
  a.grad_buffer() = {0.0, std::nan("")};
  OptimizerState st;
  try {
    optimizer_step(store, st);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer.weight"), std::string::npos);
  }
  EXPECT_EQ(a.at(0), 1.0);
  EXPECT_EQ(st.step, 0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ParameterStore a;
  a.add("x.weight", {2, 3}, {1.0, -0.0, 3.5e-300, 1e300, -7.25, 0.1});
  a.add("y", {1}, {42.0});
  const auto bytes = encode_checkpoint(a.items());
  const auto back = decode_checkpoint(bytes);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "x.weight");
  EXPECT_EQ(back[0].tensor.shape(), (Shape{2, 3}));
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(std::bit_cast<std::uint64_t>(back[0].tensor.at(i)), std::bit_cast<std::uint64_t>(a.items()[0].tensor.at(i)));
  }
  EXPECT_EQ(back[1].tensor.at(0), 42.0);
}

TEST(Checkpoint, RejectsShapeMismatchAndTruncation) {
  ParameterStore a;
  a.add("w", {2}, {1.0, 2.0});
  const std::string path = ::testing::TempDir() + "/ckpt_mismatch.ckpt";
  save_checkpoint(a, path);
  ParameterStore b;
  b.add("w", {3}, {0.0, 0.0, 0.0});
  EXPECT_THROW(load_checkpoint(b, path), DataError);
  const auto bytes = encode_checkpoint(a.items());
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
}
