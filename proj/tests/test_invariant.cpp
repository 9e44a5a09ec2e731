#include "rinv/invariant.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace rinv;
using rinv::testing::gradient_check;
using rinv::testing::random_tensor;
using rinv::testing::smooth_disk_image;
using rinv::testing::smooth_image;

namespace {

// Independent scalar evaluation of a monomial group average over valid centres.
double monomial_oracle(const Tensor<double>& s, std::size_t ch, const MonomialSpec& spec, std::size_t n_alpha) {
  const long h = static_cast<long>(s.dim(1)), w = static_cast<long>(s.dim(2));
  const long m = static_cast<long>(std::ceil(*std::max_element(spec.distances.begin(), spec.distances.end()) - 1e-12));
  auto pixel = [&](long y, long x) { return s(ch, static_cast<std::size_t>(y), static_cast<std::size_t>(x)); };
  auto bilinear = [&](double y, double x) {
    const long y0 = static_cast<long>(std::floor(y)), x0 = static_cast<long>(std::floor(x));
    const double fy = y - y0, fx = x - x0;
    double v = (1 - fy) * (1 - fx) * pixel(y0, x0);
    if (fx > 0) v += (1 - fy) * fx * pixel(y0, x0 + 1);
    if (fy > 0) v += fy * (1 - fx) * pixel(y0 + 1, x0);
    if (fy > 0 && fx > 0) v += fy * fx * pixel(y0 + 1, x0 + 1);
    return v;
  };
  double acc = 0;
  long count = 0;
  for (long u = m; u < h - m; ++u)
    for (long v = m; v < w - m; ++v)
      for (std::size_t k = 0; k < n_alpha; ++k) {
        const double phi = 2 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n_alpha);
        double prod = 1;
        for (std::size_t i = 0; i < spec.distances.size(); ++i) {
          // snap tiny trig residue so lattice offsets stay on the lattice
          double dy = std::cos(phi) * spec.distances[i], dx = std::sin(phi) * spec.distances[i];
          if (std::abs(dy - std::round(dy)) < 1e-12) dy = std::round(dy);
          if (std::abs(dx - std::round(dx)) < 1e-12) dx = std::round(dx);
          prod *= std::pow(bilinear(u + dy, v + dx), spec.exponents[i]);
        }
        acc += prod;
        ++count;
      }
  return acc / static_cast<double>(count);
}

std::vector<MonomialSpec> sample_specs() {
  return {{{0, 1, 2}, {0.7, 1.1, 0.4}}, {{0, 1.5, 1}, {1.3, 0.2, 0.9}}, {{0, 0, 2}, {0.5, 0.5, 1.0}}};
}

std::vector<IIHead<double>> all_heads(std::size_t c, std::size_t hw, std::uint64_t seed) {
  std::vector<IIHead<double>> heads;
  heads.emplace_back(make_monomial_head<double>("mono", sample_specs()));
  heads.emplace_back(make_ws_head<double>("gws", WSMode::global, 3, c, hw, seed));
  heads.emplace_back(make_ws_head<double>("lws", WSMode::local, 3, c, 3, seed));
  heads.emplace_back(make_mlp_head<double>("mlp", c, 3, {6, 4}, seed));
  heads.emplace_back(make_sa_head<double>("sa", c, 4, 2, 3, hw, hw, seed));
  return heads;
}

const char* head_name(std::size_t i) {
  static const char* names[] = {"monomial", "global-ws", "local-ws", "mlp", "sa"};
  return names[i];
}

}  // namespace

// Monomials ------------------------------------------------------------------------

TEST(Monomial, ZeroExponentsGiveOne) {
  const auto head = make_monomial_head<double>("m", {{{0, 1, 2}, {0, 0, 0}}});
  const auto out = ii_monomial(Var<double>(random_tensor({2, 7, 7}, 1)), head, CyclicRotationGroup(8)).value();
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], 1.0);
}

TEST(Monomial, SingleCentreFactorIsSpatialMean) {
  const auto head = make_monomial_head<double>("m", {{{0}, {1}}});
  const auto x = random_tensor({3, 5, 6}, 2);
  for (std::size_t n : {1, 4, 8}) {
    const auto out = ii_monomial(Var<double>(x), head, CyclicRotationGroup(n)).value();
    for (std::size_t c = 0; c < 3; ++c) {
      const double* p = x.data() + c * 30;
      const double lo = *std::min_element(p, p + 30);
      double mean = 0;
      for (int i = 0; i < 30; ++i) mean += p[i];
      mean /= 30;
      EXPECT_NEAR(out[c], mean - lo + 1, 1e-12);
    }
  }
}

TEST(Monomial, MatchesScalarOracle) {
  const auto specs = sample_specs();
  const auto head = make_monomial_head<double>("m", specs);
  for (std::size_t n : {4, 8}) {
    const auto s = random_tensor({2, 7, 7}, 3 + n, 0.5, 2.0);
    const auto out =
        monomial_features(Var<double>(s.reshaped({1, 2, 7, 7})), head.exponents.var, head.distances, CyclicRotationGroup(n))
            .value();
    for (std::size_t j = 0; j < specs.size(); ++j)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(out[j * 2 + c], monomial_oracle(s, c, specs[j], n), 1e-12);
  }
}

TEST(Monomial, NonPositiveSampleRejected) {
  const auto head = make_monomial_head<double>("m", {{{0, 1}, {0.5, 0.5}}});
  auto s = Tensor<double>::ones({1, 1, 5, 5});
  s[12] = -1;
  EXPECT_THROW(monomial_features(Var<double>(s), head.exponents.var, head.distances, CyclicRotationGroup(4)), DomainError);
}

TEST(Monomial, SpecsValidated) {
  EXPECT_THROW(make_monomial_head<double>("m", {{{1, 2}, {1, 1}}}), ContractError);
  EXPECT_THROW(make_monomial_head<double>("m", {{{0, 2}, {1, 1}}, {{0}, {1}}}), ContractError);
  const auto head = make_monomial_head<double>("m", {{{0, 3}, {1, 1}}});
  EXPECT_THROW(ii_monomial(Var<double>(random_tensor({1, 6, 6}, 1)), head, CyclicRotationGroup(4)), ContractError);
}

TEST(Monomial, QuarterTurnInvariance) {
  const auto head = make_monomial_head<double>("m", sample_specs());
  const CyclicRotationGroup c4(4);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto x = random_tensor({2, 6, 6}, seed, 0.1, 1.0);
    for (std::size_t g = 0; g < 4; ++g) EXPECT_LE(invariance_residual<double>(head, x, c4, g), 1e-5);
  }
}

TEST(Monomial, GradientsIncludingExponents) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto head = make_monomial_head<double>("m", sample_specs());
    auto f = [&](const std::vector<Var<double>>& v) {
      return monomial_features(positive_shift(v[0]), v[1], head.distances, CyclicRotationGroup(8));
    };
    const double err = gradient_check(f, {random_tensor({1, 2, 5, 5}, seed), head.exponents.value()}, seed);
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}

TEST(Monomial, FullHeadLossGradientOnSmallInput) {
  // 4x4 input keeps one valid centre ring for distance 1 monomials
  const std::vector<MonomialSpec> specs{{{0, 1}, {0.8, 1.2}}, {{0, 0.5}, {1.0, 0.6}}};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto head = make_monomial_head<double>("m", specs);
    const auto w = random_tensor({4, 3}, seed + 100);
    auto f = [&](const std::vector<Var<double>>& v) {
      MonomialHead<double> h = head;
      h.exponents.var = v[1];
      const auto feats = ii_monomial(v[0], h, CyclicRotationGroup(4));
      const int labels[2] = {0, 2};
      return cross_entropy(matmul(feats, Var<double>(w)), std::span<const int>(labels, 2));
    };
    const double err = gradient_check(f, {random_tensor({2, 2, 4, 4}, seed), head.exponents.value()}, seed);
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}

// Weighted sums --------------------------------------------------------------------

TEST(WeightedSum, UniformKernelIsRotationSymmetric) {
  for (std::size_t n : {1, 4, 8}) {
    const CyclicRotationGroup group(n);
    WSHead<double> head;
    head.mode = WSMode::global;
    head.kernel = Parameter<double>("psi", Tensor<double>::full({1, 2, 5, 5}, 0.5));
    const auto x = random_tensor({2, 5, 5}, n);
    const double expected = 0.5 * x.vec().sum();
    if (group.acts_exactly()) {
      for (std::size_t g = 0; g < n; ++g) EXPECT_LE(invariance_residual<double>(head, x, group, g), 1e-12);
      EXPECT_NEAR(ii_ws(Var<double>(x), head, group).value()[0], expected, 1e-12);
    }
  }
}

TEST(WeightedSum, LocalEqualsPooledLiftingConvolution) {
  double worst = 0;
  for (std::size_t n : {1, 4, 8}) {
    const CyclicRotationGroup group(n);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto x = random_tensor({2, 7, 7}, seed);
      const auto psi = random_tensor({3, 2, 3, 3}, seed + 1000);
      worst = std::max(worst, ws_groupconv_equivalence(x, psi, group));
    }
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(WeightedSum, EquivalenceDegenerateCases) {
  const CyclicRotationGroup c4(4);
  EXPECT_EQ(ws_groupconv_equivalence(Tensor<double>({1, 5, 5}), random_tensor({2, 1, 3, 3}, 1), c4), 0.0);
  Tensor<double> delta({1, 1, 3, 3});
  delta[4] = 1;
  const auto x = random_tensor({1, 6, 6}, 2);
  EXPECT_LE(ws_groupconv_equivalence(x, delta, c4), 1e-12);
  WSHead<double> head;
  head.kernel = Parameter<double>("psi", delta);
  EXPECT_NEAR(ii_ws(Var<double>(x), head, c4).value()[0], x.vec().mean(), 1e-12);
}

TEST(WeightedSum, GlobalKernelMustCoverInput) {
  const auto head = make_ws_head<double>("g", WSMode::global, 2, 1, 5, 1);
  EXPECT_THROW(ii_ws(Var<double>(random_tensor({1, 6, 6}, 1)), head, CyclicRotationGroup(4)), DimensionError);
}

TEST(WeightedSum, Gradients) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const CyclicRotationGroup group(seed % 2 ? 4 : 8);
    auto local = [&](const std::vector<Var<double>>& v) {
      WSHead<double> h;
      h.kernel.var = v[1];
      return ii_ws(v[0], h, group);
    };
    EXPECT_LE(gradient_check(local, {random_tensor({2, 2, 5, 5}, seed), random_tensor({3, 2, 3, 3}, seed + 1)}, seed),
              1e-4);
    auto global = [&](const std::vector<Var<double>>& v) {
      WSHead<double> h;
      h.mode = WSMode::global;
      h.kernel.var = v[1];
      return ii_ws(v[0], h, group);
    };
    EXPECT_LE(gradient_check(global, {random_tensor({2, 2, 4, 4}, seed), random_tensor({3, 2, 4, 4}, seed + 1)}, seed),
              1e-4);
  }
}

// MLP ----------------------------------------------------------------------------------

TEST(MLPHead, SingleLinearLayerIsLocalWeightedSum) {
  for (std::size_t n : {1, 4}) {
    const CyclicRotationGroup group(n);
    auto head = make_mlp_head<double>("mlp", 2, 3, {1}, 1);
    head.weights[0].mutable_value() = Tensor<double>::full({18, 1}, 0.25);
    WSHead<double> ws;
    ws.kernel = Parameter<double>("psi", Tensor<double>::full({1, 2, 3, 3}, 0.25));
    const Var<double> x(random_tensor({2, 6, 6}, n, 0.1, 1.0));
    EXPECT_LE(max_abs_diff(ii_mlp(x, head, group).value(), ii_ws(x, ws, group).value()), 1e-6);
  }
}

TEST(MLPHead, ZeroLastLayerGivesZero) {
  auto head = make_mlp_head<double>("mlp", 2, 3, {5, 3}, 1);
  head.weights[1].mutable_value() = Tensor<double>({5, 3});
  EXPECT_EQ(max_abs(ii_mlp(Var<double>(random_tensor({2, 5, 5}, 1)), head, CyclicRotationGroup(8)).value()), 0.0);
}

TEST(MLPHead, Gradients) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto head = make_mlp_head<double>("mlp", 2, 3, {4, 3}, seed);
    auto f = [&](const std::vector<Var<double>>& v) {
      MLPHead<double> h = head;
      h.weights[0].var = v[1];
      h.weights[1].var = v[2];
      return ii_mlp(v[0], h, CyclicRotationGroup(8));
    };
    EXPECT_LE(gradient_check(f, {random_tensor({1, 2, 4, 4}, seed), head.weights[0].value(), head.weights[1].value()},
                             seed),
              1e-4)
        << "seed " << seed;
  }
}

// Self-attention ---------------------------------------------------------------------------

TEST(SelfAttention, HeadCountMustDivideWidth) {
  EXPECT_THROW(make_sa_head<double>("sa", 2, 6, 4, 3, 4, 4, 1), ContractError);
}

TEST(SelfAttention, ZeroQueryKeyGivesUniformAttention) {
  auto head = make_sa_head<double>("sa", 2, 4, 2, 3, 4, 4, 1);
  head.wq.mutable_value() = Tensor<double>({2, 4});
  head.wk.mutable_value() = Tensor<double>({2, 4});
  const auto x = random_tensor({2, 4, 4}, 2);
  const CyclicRotationGroup c4(4);
  const auto out = ii_sa(Var<double>(x), head, c4).value();
  // every token sees mean(x) W_V W_o; rotation only permutes tokens
  Tensor<double> mean({1, 2});
  for (std::size_t c = 0; c < 2; ++c) mean[c] = x.vec().segment(c * 16, 16).mean();
  const auto expected = matmul(matmul(Var<double>(mean), head.wv.var), head.wo.var).value();
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t o = 0; o < 3; ++o) EXPECT_NEAR(out(t, o), expected[o], 1e-12);
}

TEST(SelfAttention, SingleTokenPassesValues) {
  const auto head = make_sa_head<double>("sa", 3, 2, 1, 2, 1, 1, 4);
  const auto x = random_tensor({3, 1, 1}, 5);
  const auto out = ii_sa(Var<double>(x), head, CyclicRotationGroup(8)).value();
  const auto expected = matmul(matmul(Var<double>(x.reshaped({1, 3})), head.wv.var), head.wo.var).value();
  EXPECT_LE(max_abs_diff(out.reshaped(expected.shape()), expected), 1e-12);
}

TEST(SelfAttention, RelativeLogitsMatchTableLookup) {
  const std::size_t h = 3, w = 4;
  const auto q = random_tensor({h * w, 2}, 1);
  const auto pk = random_tensor({(2 * h - 1) * (2 * w - 1), 2}, 2);
  const auto r = relative_logits(Var<double>(q), Var<double>(pk), h, w).value();
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t j = 0; j < h * w; ++j) {
      const long dy = long(j / w) - long(i / w), dx = long(j % w) - long(i % w);
      const std::size_t row = std::size_t((dy + 2) * 7 + dx + 3);
      EXPECT_NEAR(r(i, j), q(i, 0) * pk(row, 0) + q(i, 1) * pk(row, 1), 1e-14);
    }
}

TEST(SelfAttention, GradientsIncludingEncodings) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto head = make_sa_head<double>("sa", 2, 4, 2, 2, 3, 3, seed);
    auto f = [&](const std::vector<Var<double>>& v) {
      SAHead<double> h = head;
      h.wq.var = v[1];
      h.wk.var = v[2];
      h.wv.var = v[3];
      h.pos.var = v[4];
      h.wo.var = v[5];
      return ii_sa(v[0], h, CyclicRotationGroup(4));
    };
    const double err = gradient_check(f,
                                      {random_tensor({1, 2, 3, 3}, seed), head.wq.value(), head.wk.value(),
                                       head.wv.value(), head.pos.value(), head.wo.value()},
                                      seed);
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}

// Invariance across heads --------------------------------------------------------------------

TEST(Invariance, EveryHeadUnderQuarterTurns) {
  const CyclicRotationGroup c4(4);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto heads = all_heads(2, 6, seed);
    const auto x = random_tensor({2, 6, 6}, 500 + seed);
    for (std::size_t i = 0; i < heads.size(); ++i)
      for (std::size_t g = 0; g < 4; ++g)
        EXPECT_LE(invariance_residual(heads[i], x, c4, g), 1e-4) << head_name(i) << " seed " << seed << " g " << g;
  }
}

TEST(Invariance, IdentityProbeAndConstantInput) {
  const CyclicRotationGroup c8(8);
  const auto heads = all_heads(2, 7, 3);
  const auto x = random_tensor({2, 7, 7}, 4);
  const auto flat = Tensor<double>::full({2, 7, 7}, 0.7);
  for (std::size_t i = 0; i < heads.size(); ++i) {
    EXPECT_EQ(invariance_residual(heads[i], x, c8, 0), 0.0) << head_name(i);
  }
  // a constant plane is unchanged by rotation only away from the zero-padded corners,
  // so use the exact quarter turns
  const CyclicRotationGroup c4(4);
  const auto heads4 = all_heads(2, 7, 3);
  for (std::size_t i = 0; i < heads4.size(); ++i)
    for (std::size_t g = 0; g < 4; ++g) EXPECT_LE(invariance_residual(heads4[i], flat, c4, g), 1e-12) << head_name(i);
}

TEST(Invariance, EightfoldResidualOnSmoothInput) {
  // Regression bounds for bilinear resampling, measured on disk-supported 25x25 inputs.
  const CyclicRotationGroup c8(8);
  const double bounds[] = {3e-3, 1.5e-2, 3e-4, 4e-2, 6e-3};
  double worst[5] = {0, 0, 0, 0, 0};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto heads = all_heads(2, 25, seed);
    const auto x = smooth_disk_image<double>(2, 25, seed, 5.0);
    for (std::size_t i = 0; i < heads.size(); ++i)
      for (std::size_t g = 1; g < 8; ++g) worst[i] = std::max(worst[i], invariance_residual(heads[i], x, c8, g));
  }
  for (std::size_t i = 0; i < 5; ++i) {
    RecordProperty(head_name(i), std::to_string(worst[i]));
    EXPECT_LE(worst[i], bounds[i]) << head_name(i);
  }
}

TEST(Invariance, BatchedMatchesPerSample) {
  const CyclicRotationGroup c4(4);
  const auto heads = all_heads(2, 5, 9);
  const auto xb = random_tensor({3, 2, 5, 5}, 10);
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const auto batched = apply_head(heads[i], Var<double>(xb), c4).value();
    for (std::size_t b = 0; b < 3; ++b) {
      Tensor<double> one({2, 5, 5});
      std::copy_n(xb.data() + b * 50, 50, one.data());
      const auto single = apply_head(heads[i], Var<double>(one), c4).value();
      for (std::size_t f = 0; f < single.numel(); ++f)
        EXPECT_NEAR(batched[b * single.numel() + f], single[f], 1e-12) << head_name(i);
    }
  }
}
