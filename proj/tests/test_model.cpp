#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "heightbins/backbone.hpp"
#include "heightbins/htc_adabins.hpp"
#include "heightbins/model.hpp"
#include "heightbins/regression.hpp"

using namespace heightbins;

namespace {

Tensor random_tensor(std::uint64_t seed, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor param(const ParameterStore& store, const std::string& name) { return store.get(name); }

void fill(Tensor t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

HeadConfig toy_head() {
  HeadConfig c;
  c.n_bins = 8;
  c.tokens = 4;
  c.embed_dim = 16;
  c.patch_size = 4;
  c.depth = 1;
  c.heads = 2;
  c.mlp_hidden = 16;
  return c;
}

void expect_categorical(const Tensor& p, double tol) {
  const std::size_t B = p.size(0), N = p.size(1), HW = p.size(2) * p.size(3);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < HW; ++i) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double v = p.at((b * N + n) * HW + i);
        EXPECT_GE(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, tol);
    }
}

void expect_head_invariants(const HeadOutput& o, const HeadConfig& cfg) {
  const std::size_t B = o.bins.edges.size(0), N = cfg.n_bins;
  for (std::size_t b = 0; b < B; ++b) {
    double wsum = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      EXPECT_GT(o.bins.rel_widths.at(b * N + i), 0.0);
      wsum += o.bins.rel_widths.at(b * N + i);
    }
    EXPECT_NEAR(wsum, 1.0, 1e-9);
    const auto e = o.bins.edges.data().subspan(b * (N + 1), N + 1);
    EXPECT_EQ(e[0], cfg.h_min);
    EXPECT_NEAR(e[N], cfg.h_max, 1e-6);
    for (std::size_t i = 0; i < N; ++i) {
      EXPECT_LT(e[i], e[i + 1]);
      EXPECT_EQ(o.bins.centers.at(b * N + i), (e[i] + e[i + 1]) / 2);
    }
  }
  expect_categorical(o.prob, 1e-6);
  expect_categorical(o.prob_fg, 1e-6);
  if (cfg.head_tail_cut) {
    expect_categorical(o.prob_bg, 1e-6);
    const std::size_t HW = o.p_fg.size(2) * o.p_fg.size(3);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < HW; ++i) {
        const double q = o.p_fg.at(b * HW + i);
        EXPECT_GT(q, 0.0);
        EXPECT_LT(q, 1.0);
        const Tensor& src = q > 0.5 ? o.prob_fg : o.prob_bg;
        for (std::size_t n = 0; n < N; ++n) {
          EXPECT_EQ(o.prob.at((b * N + n) * HW + i), src.at((b * N + n) * HW + i));
        }
      }
  }
  for (double h : o.height.data()) {
    EXPECT_GE(h, cfg.h_min);
    EXPECT_LE(h, cfg.h_max);
  }
}

}  // namespace

// --- backbone ---------------------------------------------------------------

TEST(Backbone, LevelShapesFor32Input) {
  ParameterStore store;
  nn::Rng rng(0);
  BackboneConfig cfg;
  const Backbone bb = Backbone::create(store, cfg, rng);
  const FeaturePyramid f = bb(random_tensor(1, {2, 3, 32, 32}));
  const std::size_t sides[] = {2, 4, 8, 16, 32};
  for (int l = 1; l <= 5; ++l) {
    EXPECT_EQ(f.level(l).shape(), (Shape{2, cfg.level_channels(l), sides[l - 1], sides[l - 1]})) << "F" << l;
  }
  EXPECT_EQ(cfg.level_channels(5), 8u);
  EXPECT_EQ(cfg.level_channels(1), 64u);
}

TEST(Backbone, ShapeContractAcrossSizes) {
  for (std::size_t S : {32u, 64u, 128u}) {
    ParameterStore store;
    nn::Rng rng(0);
    const Backbone bb = Backbone::create(store, {}, rng);
    NoGradGuard g;
    const FeaturePyramid f = bb(random_tensor(2, {1, 3, S, S}));
    for (int l = 1; l <= 5; ++l) {
      EXPECT_EQ(f.level(l).size(2), level_extent(S, l));
      if (l > 1) {
        EXPECT_EQ(f.level(l).size(2), 2 * f.level(l - 1).size(2));
      }
    }
  }
}

TEST(Backbone, IndivisibleExtentNamesDivisibility) {
  ParameterStore store;
  nn::Rng rng(0);
  const Backbone bb = Backbone::create(store, {}, rng);
  try {
    bb(Tensor::zeros({1, 3, 24, 32}));
    FAIL() << "expected a contract violation";
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("divisible by 16"), std::string::npos) << e.what();
  }
}

TEST(Backbone, ZeroInputGivesFiniteFeatures) {
  ParameterStore store;
  nn::Rng rng(0);
  const Backbone bb = Backbone::create(store, {}, rng);
  for (const auto& [name, t] : store.items())
    if (name.ends_with(".bias")) {
      for (double v : t.data()) EXPECT_EQ(v, 0.0) << name;
    }
  const FeaturePyramid f = bb(Tensor::zeros({1, 3, 32, 32}));
  for (int l = 1; l <= 5; ++l) {
    const Tensor level = f.level(l);
    for (double v : level.data()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Backbone, Seed7IsBitIdentical) {
  auto run = [] {
    ParameterStore store;
    nn::Rng rng(7);
    const Backbone bb = Backbone::create(store, {}, rng);
    const FeaturePyramid f = bb(random_tensor(7, {1, 3, 32, 32}));
    std::vector<double> all;
    for (int l = 1; l <= 5; ++l) all.insert(all.end(), f.level(l).data().begin(), f.level(l).data().end());
    return all;
  };
  EXPECT_EQ(run(), run());
}

// --- bins -------------------------------------------------------------------

TEST(Bins, EqualLogitsGiveEvenEdges) {
  const BinSet b = bins_from_widths(softmax(Tensor::zeros({1, 4}), -1), 0.0, 100.0);
  const std::vector<double> edges(b.edges.data().begin(), b.edges.data().end());
  const std::vector<double> centers(b.centers.data().begin(), b.centers.data().end());
  EXPECT_EQ(edges, (std::vector<double>{0, 25, 50, 75, 100}));
  EXPECT_EQ(centers, (std::vector<double>{12.5, 37.5, 62.5, 87.5}));
}

TEST(Bins, ScaledCumulativeWidths) {
  const BinSet b = bins_from_widths(Tensor::from({1, 4}, {0.1, 0.2, 0.3, 0.4}), 0.0, 10.0);
  const std::vector<double> want{0, 1, 3, 6, 10};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(b.edges.at(i), want[i], 1e-12);
}

TEST(Bins, DegenerateRangeIsConfigError) {
  HeadConfig c = toy_head();
  c.h_max = c.h_min;
  ParameterStore store;
  nn::Rng rng(0);
  EXPECT_THROW(HtcAdaBinsHead::create(store, "h", c, 4, 8, 8, rng), ConfigError);
}

// --- local / global branches ------------------------------------------------

TEST(LocalBranch, IdentityKernelReproducesInput) {
  HeadConfig c = toy_head();
  ParameterStore store;
  nn::Rng rng(0);
  const HtcAdaBinsHead head = HtcAdaBinsHead::create(store, "h", c, c.embed_dim, 8, 8, rng);
  Tensor w = param(store, "h.local.weight");
  fill(w, 0.0);
  const std::size_t d = c.embed_dim;
  for (std::size_t o = 0; o < d; ++o) w.mutable_data()[((o * d + o) * 3 + 1) * 3 + 1] = 1.0;
  const Tensor f = random_tensor(4, {1, d, 8, 8});
  const Tensor l = head.local_branch(f);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_EQ(l.at(i), f.at(i));
  fill(w, 0.0);
  const Tensor zero = head.local_branch(f);
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
}

TEST(LocalBranch, MatchesDirectConvolutionSeed3) {
  HeadConfig c = toy_head();
  ParameterStore store;
  nn::Rng rng(3);
  const HtcAdaBinsHead head = HtcAdaBinsHead::create(store, "h", c, 4, 8, 8, rng);
  const Tensor f = random_tensor(3, {1, 4, 8, 8});
  const Tensor w = param(store, "h.local.weight"), b = param(store, "h.local.bias");
  const Tensor l = head.local_branch(f);
  for (std::size_t o = 0; o < c.embed_dim; ++o)
    for (long y = 0; y < 8; ++y)
      for (long x = 0; x < 8; ++x) {
        double s = b.at(o);
        for (std::size_t ch = 0; ch < 4; ++ch)
          for (long u = -1; u <= 1; ++u)
            for (long v = -1; v <= 1; ++v) {
              if (y + u < 0 || y + u >= 8 || x + v < 0 || x + v >= 8) continue;
              s += f.at((ch * 8 + (y + u)) * 8 + (x + v)) * w.at(((o * 4 + ch) * 3 + (u + 1)) * 3 + (v + 1));
            }
        EXPECT_NEAR(l.at((o * 8 + y) * 8 + x), s, 1e-12);
      }
}

TEST(GlobalBranch, PatchCountAndLearnedTokens) {
  HeadConfig c = toy_head();
  ParameterStore store;
  nn::Rng rng(0);
  const GlobalBranch g = GlobalBranch::create(store, "g", c, 4, 8, 8, rng);
  const Tensor e = g(random_tensor(1, {2, 4, 8, 8}));
  EXPECT_EQ(e.shape(), (Shape{2, 2 * c.tokens + 1 + 4, c.embed_dim}));
  EXPECT_THROW(GlobalBranch::create(store, "bad", c, 4, 6, 8, rng), ContractViolation);
}

TEST(GlobalBranch, DepthZeroEqualsPatchProjection) {
  HeadConfig c = toy_head();
  c.depth = 0;
  ParameterStore store;
  nn::Rng rng(0);
  const GlobalBranch g = GlobalBranch::create(store, "g", c, 4, 8, 8, rng);
  const Tensor f = random_tensor(2, {1, 4, 8, 8});
  const Tensor e = g(f);
  const Tensor p = g.embed_patches(f);
  const std::size_t K = c.learned_tokens(), d = c.embed_dim;
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t k = 0; k < d; ++k) EXPECT_EQ(e.at((K + t) * d + k), p.at(t * d + k));
}

TEST(GlobalBranch, PermutationEquivariantWithoutPositions) {
  HeadConfig c = toy_head();
  ParameterStore store;
  nn::Rng rng(1);
  GlobalBranch g = GlobalBranch::create(store, "g", c, 4, 8, 8, rng);
  fill(g.positional(), 0.0);
  const Tensor f = random_tensor(5, {1, 4, 8, 8});
  // Swap patch (0,0) with patch (1,1) and (0,1) with (1,0): patch order 3,2,1,0.
  std::vector<double> sw(f.numel());
  for (std::size_t ch = 0; ch < 4; ++ch)
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        const std::size_t ny = (y + 4) % 8, nx = (x + 4) % 8;
        sw[(ch * 8 + ny) * 8 + nx] = f.at((ch * 8 + y) * 8 + x);
      }
  const Tensor e1 = g(f), e2 = g(Tensor::from(f.shape(), sw));
  const std::size_t K = c.learned_tokens(), d = c.embed_dim;
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(e2.at((K + (3 - t)) * d + k), e1.at((K + t) * d + k), 1e-12);
  for (std::size_t t = 0; t < K; ++t)
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(e2.at(t * d + k), e1.at(t * d + k), 1e-12);
}

// --- range attention, probabilities, cut ------------------------------------

TEST(RangeAttention, OneHotTokensSelectChannels) {
  const Tensor L = random_tensor(1, {1, 3, 2, 2});
  std::vector<double> g(9, 0.0);
  g[0] = g[4] = g[8] = 1.0;
  const Tensor R = range_attention(L, Tensor::from({1, 3, 3}, g));
  for (std::size_t i = 0; i < L.numel(); ++i) EXPECT_EQ(R.at(i), L.at(i));
  const Tensor Z = range_attention(Tensor::zeros({1, 3, 2, 2}), random_tensor(2, {1, 5, 3}));
  for (double v : Z.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(range_attention(L, Tensor::zeros({1, 5, 4})), ContractViolation);
}

TEST(RangeAttention, SinglePixelEqualsMatrixVector) {
  const Tensor L = random_tensor(3, {1, 6, 1, 1});
  const Tensor G = random_tensor(4, {1, 5, 6});
  const Tensor R = range_attention(L, G);
  for (std::size_t k = 0; k < 5; ++k) {
    double s = 0.0;
    for (std::size_t d = 0; d < 6; ++d) s += G.at(k * 6 + d) * L.at(d);
    EXPECT_NEAR(R.at(k), s, 1e-14);
  }
}

TEST(BinProbabilities, ZeroWeightsAreUniformAndTwoBinsAreLogistic) {
  ParameterStore store;
  nn::Rng rng(0);
  nn::Conv2d conv = nn::Conv2d::create(store, "p", 3, 5, 1, 1, 0, rng);
  fill(conv.weight, 0.0);
  const Tensor p = bin_probabilities(random_tensor(1, {1, 3, 2, 2}), conv);
  for (double v : p.data()) EXPECT_NEAR(v, 0.2, 1e-15);

  nn::Conv2d two = nn::Conv2d::create(store, "q", 3, 2, 1, 1, 0, rng);
  const Tensor R = random_tensor(2, {1, 3, 2, 2});
  const Tensor q = bin_probabilities(R, two);
  const Tensor logits = two(R);
  for (std::size_t i = 0; i < 4; ++i) {
    const double a = logits.at(i), b = logits.at(4 + i);
    EXPECT_NEAR(q.at(i), 1.0 / (1.0 + std::exp(-(a - b))), 1e-14);
  }
  expect_categorical(bin_probabilities(random_tensor(3, {2, 3, 4, 4}, -50, 50), two), 1e-9);
}

TEST(HeadTailCut, ZeroWeightsHalfAndMonotone) {
  ParameterStore store;
  nn::Rng rng(0);
  nn::Conv2d cut = nn::Conv2d::create(store, "c", 4, 1, 1, 1, 0, rng);
  Tensor w = cut.weight;
  fill(w, 0.0);
  const Tensor half = head_tail_cut(random_tensor(1, {1, 4, 3, 3}), cut);
  for (double v : half.data()) EXPECT_EQ(v, 0.5);
  fill(w, 0.3);
  Tensor R = random_tensor(2, {1, 4, 1, 1});
  const double before = head_tail_cut(R, cut).item();
  R.mutable_data()[0] += 0.5;
  EXPECT_GT(head_tail_cut(R, cut).item(), before);
}

TEST(Combine, SelectsByMask) {
  const Tensor pf = softmax(random_tensor(1, {1, 3, 2, 2}), 1), pb = softmax(random_tensor(2, {1, 3, 2, 2}), 1);
  const Tensor hi = combine(pf, pb, Tensor::full({1, 1, 2, 2}, 0.9));
  const Tensor lo = combine(pf, pb, Tensor::full({1, 1, 2, 2}, 0.1));
  for (std::size_t i = 0; i < pf.numel(); ++i) {
    EXPECT_EQ(hi.at(i), pf.at(i));
    EXPECT_EQ(lo.at(i), pb.at(i));
  }
  const Tensor checker = Tensor::from({1, 1, 2, 2}, {0.9, 0.2, 0.4, 0.7});
  const Tensor mixed = combine(pf, pb, checker);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 4; ++i) {
      const Tensor& src = checker.at(i) > 0.5 ? pf : pb;
      EXPECT_EQ(mixed.at(n * 4 + i), src.at(n * 4 + i));
    }
}

TEST(Combine, GradientFlowsOnlyThroughSelectedBranch) {
  Tensor pf = Tensor::from({1, 1, 1, 2}, {0.3, 0.6}, true), pb = Tensor::from({1, 1, 1, 2}, {0.8, 0.1}, true);
  backward(sum(combine(pf, pb, std::vector<std::uint8_t>{1, 0})));
  EXPECT_EQ(pf.grad()[0], 1.0);
  EXPECT_EQ(pf.grad()[1], 0.0);
  EXPECT_EQ(pb.grad()[0], 0.0);
  EXPECT_EQ(pb.grad()[1], 1.0);
}

// --- full head --------------------------------------------------------------

TEST(Head, ToyConfigInvariants) {
  for (bool htc : {true, false}) {
    HeadConfig c = toy_head();
    c.head_tail_cut = htc;
    ParameterStore store;
    nn::Rng rng(0);
    const HtcAdaBinsHead head = HtcAdaBinsHead::create(store, "h", c, 4, 8, 8, rng);
    const HeadOutput o = head(random_tensor(9, {2, 4, 8, 8}, -3, 3));
    expect_head_invariants(o, c);
    EXPECT_EQ(o.height.shape(), (Shape{2, 1, 8, 8}));
    EXPECT_EQ(o.ram_fg.shape(), (Shape{2, c.tokens, 8, 8}));
    EXPECT_EQ(o.p_fg.defined(), htc);
  }
}

TEST(Head, AdaptiveBinsAndDeterminism) {
  HeadConfig c = toy_head();
  ParameterStore store;
  nn::Rng rng(0);
  const HtcAdaBinsHead head = HtcAdaBinsHead::create(store, "h", c, 4, 8, 8, rng);
  const Tensor a = random_tensor(1, {1, 4, 8, 8}), b = random_tensor(2, {1, 4, 8, 8});
  const HeadOutput oa = head(a), ob = head(b), oa2 = head(a);
  const std::vector<double> ea(oa.bins.edges.data().begin(), oa.bins.edges.data().end());
  const std::vector<double> eb(ob.bins.edges.data().begin(), ob.bins.edges.data().end());
  EXPECT_NE(ea, eb);
  EXPECT_EQ(ea, std::vector<double>(oa2.bins.edges.data().begin(), oa2.bins.edges.data().end()));
  EXPECT_EQ(std::vector<double>(oa.height.data().begin(), oa.height.data().end()),
            std::vector<double>(oa2.height.data().begin(), oa2.height.data().end()));
}

TEST(Head, TokenSplitUsesDisjointEmbeddings) {
  // Perturbing only the bg token block must leave bins, R_fg and p_fg fixed.
  HeadConfig c = toy_head();
  c.depth = 0;
  ParameterStore store;
  nn::Rng rng(0);
  const HtcAdaBinsHead head = HtcAdaBinsHead::create(store, "h", c, 4, 8, 8, rng);
  const Tensor f = random_tensor(4, {1, 4, 8, 8});
  const HeadOutput before = head(f);
  Tensor tokens = param(store, "h.global.tokens");
  for (std::size_t t = 1 + c.tokens; t < 1 + 2 * c.tokens; ++t)
    for (std::size_t k = 0; k < c.embed_dim; ++k) tokens.mutable_data()[t * c.embed_dim + k] += 0.25;
  const HeadOutput after = head(f);
  for (std::size_t i = 0; i < before.bins.edges.numel(); ++i) EXPECT_EQ(before.bins.edges.at(i), after.bins.edges.at(i));
  for (std::size_t i = 0; i < before.ram_fg.numel(); ++i) EXPECT_EQ(before.ram_fg.at(i), after.ram_fg.at(i));
  bool bg_changed = false;
  for (std::size_t i = 0; i < before.ram_bg.numel(); ++i) bg_changed |= before.ram_bg.at(i) != after.ram_bg.at(i);
  EXPECT_TRUE(bg_changed);
}

TEST(Head, MaskOverrideReplacesThreshold) {
  HeadConfig c = toy_head();
  ParameterStore store;
  nn::Rng rng(0);
  const HtcAdaBinsHead head = HtcAdaBinsHead::create(store, "h", c, 4, 8, 8, rng);
  const std::vector<std::uint8_t> ones(64, 1);
  const HeadOutput o = head(random_tensor(4, {1, 4, 8, 8}), &ones);
  for (std::size_t i = 0; i < o.prob.numel(); ++i) EXPECT_EQ(o.prob.at(i), o.prob_fg.at(i));
}

// --- hybrid regression ------------------------------------------------------

TEST(Regression, Examples) {
  const BinSet even = bins_from_widths(softmax(Tensor::zeros({1, 4}), -1), 0.0, 100.0);
  for (std::size_t j = 0; j < 4; ++j) {
    std::vector<double> p(4, 0.0);
    p[j] = 1.0;
    EXPECT_DOUBLE_EQ(predict_heights(Tensor::from({1, 4, 1, 1}, p), even).item(), even.centers.at(j));
  }
  EXPECT_DOUBLE_EQ(predict_heights(Tensor::full({1, 4, 1, 1}, 0.25), even).item(), 50.0);
  const BinSet two = bins_from_widths(Tensor::from({1, 2}, {0.5, 0.5}), 0.0, 4.0);  // centers 1, 3
  EXPECT_DOUBLE_EQ(predict_heights(Tensor::from({1, 2, 1, 1}, {0.25, 0.75}), two).item(), 2.5);
}

TEST(Regression, UnnormalizedProbabilitiesRejected) {
  const BinSet even = bins_from_widths(softmax(Tensor::zeros({1, 2}), -1), 0.0, 10.0);
  EXPECT_THROW(predict_heights(Tensor::from({1, 2, 1, 1}, {0.5, 0.6}), even), ContractViolation);
}

TEST(Regression, BoundedAndMonotoneUnderMassShift) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const BinSet bins = bins_from_widths(softmax(random_tensor(trial, {1, 6}, -3, 3), -1), 0.0, 100.0);
    const Tensor p = softmax(random_tensor(1000 + trial, {1, 6, 1, 1}, -4, 4), 1);
    const double h = predict_heights(p, bins).item();
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, 100.0);
    std::vector<double> q(p.data().begin(), p.data().end());
    const double moved = q[1] * u(rng);
    q[1] -= moved;
    q[4] += moved;
    EXPECT_GE(predict_heights(Tensor::from({1, 6, 1, 1}, q), bins).item(), h);
  }
}

// --- full model ------------------------------------------------------------

TEST(Model, ConfigValidation) {
  ModelConfig m;
  m.levels = {2, 3, 4};
  EXPECT_FALSE(m.problems().empty());
  m.levels = {3, 2, 5};
  EXPECT_FALSE(m.problems().empty());
  m.levels = {};
  EXPECT_FALSE(m.problems().empty());
  m.levels = {2, 5};
  EXPECT_TRUE(m.problems().empty());
  m.head.patch_size = 3;
  EXPECT_FALSE(m.problems().empty());
  EXPECT_THROW(HeightNet::create(m, 0), ConfigError);
}

TEST(Model, ForwardProducesOneHeadPerLevel) {
  ModelConfig m;
  const HeightNet net = HeightNet::create(m, 0);
  NoGradGuard g;
  const auto out = net.forward(random_tensor(1, {1, 3, 32, 32}, 0, 1));
  ASSERT_EQ(out.heads.size(), 4u);
  const std::size_t sides[] = {4, 8, 16, 32};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(out.heads[i].height.size(2), sides[i]);
    expect_head_invariants(out.heads[i], m.head);
  }
  EXPECT_THROW(net.forward(Tensor::zeros({1, 3, 16, 16})), ContractViolation);
}
