#include "rinv/model.hpp"
#include "rinv/steerable.hpp"
#include "rinv/train.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace rinv;
using rinv::testing::random_tensor;

namespace {

const HeadKind kAllHeads[] = {HeadKind::max_pool, HeadKind::monomial, HeadKind::ws_global,
                              HeadKind::ws_local, HeadKind::mlp,      HeadKind::sa};

ModelConfig with_head(HeadKind kind, Backbone backbone = Backbone::steerable) {
  ModelConfig c;
  c.backbone = backbone;
  c.head.kind = kind;
  if (kind == HeadKind::monomial)
    c.head.monomials = {{{0, 1, 2}, {1.0, 0.5, 2.0}}, {{0, 2, 1}, {0.3, 1.2, 0.7}}, {{0, 0, 1}, {2.0, 1.0, 1.0}}};
  return c;
}

ModelConfig small(HeadKind kind) {
  ModelConfig c = with_head(kind);
  c.image_size = 12;
  c.channels = {4, 4};
  c.n_alpha = 4;
  c.n_f = 3;
  c.kernel = 3;
  c.rescale = false;
  c.match_budget = false;
  c.dense = {6};
  c.head.out_channels = 3;
  c.head.sa_channels = 2;
  c.head.mlp_hidden = {3};
  return c;
}

// Zero border so quarter turns of the input keep all content on the grid.
Tensor<double> padded_input(std::size_t n, std::size_t size, std::uint64_t seed) {
  auto x = random_tensor<double>({n, 1, size, size}, seed);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j)
        if (i < 2 || j < 2 || i + 2 >= size || j + 2 >= size) x[(b * size + i) * size + j] = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = std::abs(x[i]);
  return x;
}

}  // namespace

TEST(Budget, EveryHeadWithinFivePercent) {
  for (const auto kind : kAllHeads) {
    const ModelConfig c = with_head(kind);
    const auto lay = resolve_layout(c);
    const double dev = std::abs(static_cast<double>(lay.parameters) / static_cast<double>(lay.reference_parameters) - 1);
    EXPECT_LE(dev, 0.05) << to_string(kind);
    Model<float> m(c, 1);
    EXPECT_EQ(m.parameter_count(), lay.parameters) << to_string(kind);
  }
}

TEST(Budget, ReferenceCountMatchesBuiltPlainModel) {
  const ModelConfig c = with_head(HeadKind::monomial);
  Model<float> ref(reference_config(c), 1);
  EXPECT_EQ(ref.parameter_count(), resolve_layout(c).reference_parameters);
  // hand count: 5x5 convs 1->8->12->16 with biases, 16 -> 90 -> 4 dense
  const std::size_t hand = (25 * 1 * 8 + 8) + (25 * 8 * 12 + 12) + (25 * 12 * 16 + 16) + (16 * 90 + 90) + (90 * 4 + 4);
  EXPECT_EQ(ref.parameter_count(), hand);
}

TEST(Budget, ChannelDivisorSixteenThirds) {
  const auto r = param_ratio(3, 8, 16);
  EXPECT_EQ(r.group_ratio, make_rational(256, 9));
  EXPECT_DOUBLE_EQ(r.channel_factor, 16.0 / 3.0);
  ModelConfig c = with_head(HeadKind::max_pool);
  c.kernel = 3;
  c.n_f = 16;
  c.channels = {32, 48, 64};
  const auto lay = resolve_layout(c);
  EXPECT_DOUBLE_EQ(lay.channel_divisor, 16.0 / 3.0);
  EXPECT_EQ(lay.widths, (std::vector<std::size_t>{6, 9, 12}));
}

TEST(Budget, PlainBaselineHasNoGroupAxes) {
  ModelConfig c = with_head(HeadKind::max_pool, Backbone::plain);
  Model<double> m(c, 2);
  EXPECT_EQ(m.group().order(), 1u);
  EXPECT_DOUBLE_EQ(m.layout().channel_divisor, 1.0);
  EXPECT_EQ(m.layout().widths, c.channels);
  for (const auto* p : m.params()) EXPECT_EQ(p->name.find("coeff"), std::string::npos) << p->name;
  const auto f = m.features(Var<double>(random_tensor<double>({2, 1, 24, 24}, 3)));
  EXPECT_EQ(f.shape(), (Shape{2, 16}));
}

TEST(Build, SfCnnFiveConvThreeDense) {
  ModelConfig c = with_head(HeadKind::monomial);
  c.image_size = 28;
  c.classes = 10;
  c.n_alpha = 16;
  c.channels = {8, 8, 12, 12, 16};
  c.pool_after = {1, 3};
  c.dense = {32, 32, 32};
  c.match_budget = false;
  Model<float> m(c, 4);
  EXPECT_EQ(m.layout().widths.size(), 5u);
  EXPECT_EQ(m.layout().dense.size(), 3u);
  EXPECT_EQ(m.layout().head_size, 7u);
  const auto y = m.forward(Var<float>(random_tensor<float>({2, 1, 28, 28}, 5)), false);
  EXPECT_EQ(y.shape(), (Shape{2, 10}));
  for (std::size_t i = 0; i < y.value().numel(); ++i) EXPECT_TRUE(std::isfinite(y.value()[i]));
}

TEST(Build, ErrorsNameTheLayerPair) {
  ModelConfig c = with_head(HeadKind::max_pool);
  c.image_size = 10;
  c.pool_after = {0, 1};
  try {
    resolve_layout(c);
    FAIL() << "odd feature map pooled";
  } catch (const BuildError& e) {
    EXPECT_NE(std::string(e.what()).find("conv1 -> pool"), std::string::npos) << e.what();
  }
  ModelConfig m = with_head(HeadKind::monomial);
  m.image_size = 8;
  m.pool_after = {0, 1};
  try {
    resolve_layout(m);
    FAIL() << "monomial distance larger than the feature map";
  } catch (const BuildError& e) {
    EXPECT_NE(std::string(e.what()).find("head.monomial"), std::string::npos) << e.what();
  }
  c = with_head(HeadKind::max_pool);
  c.kernel = 4;
  EXPECT_THROW(resolve_layout(c), BuildError);
}

TEST(Invariance, QuarterTurnLogitsEveryHead) {
  for (const auto kind : kAllHeads) {
    Model<double> m(small(kind), 7);
    const auto x = padded_input(3, 12, 8);
    const auto y = m.forward(Var<double>(x), false).value();
    double scale = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) scale = std::max(scale, std::abs(y[i]));
    for (std::size_t k = 1; k < 4; ++k) {
      const auto yr = m.forward(act_on_plane(CyclicRotationGroup(4), k, Var<double>(x)), false).value();
      double worst = 0;
      for (std::size_t i = 0; i < y.numel(); ++i) worst = std::max(worst, std::abs(yr[i] - y[i]));
      EXPECT_LE(worst / scale, 1e-3) << to_string(kind) << " k=" << k;
    }
  }
}

TEST(Invariance, ResidualHelperAgrees) {
  Model<double> m(small(HeadKind::monomial), 3);
  Dataset d;
  d.height = d.width = 12;
  d.classes = 4;
  const auto x = padded_input(4, 12, 9);
  d.pixels.assign(x.data(), x.data() + x.numel());
  d.labels = {0, 1, 2, 3};
  EXPECT_LE(model_invariance_residual(m, d, 4), 1e-3);
}

TEST(State, RoundTripAndShapeMismatch) {
  ModelConfig c = small(HeadKind::monomial);
  c.batch_norm = true;
  Model<double> a(c, 1), b(c, 2);
  const auto x = Var<double>(padded_input(2, 12, 4));
  std::mt19937_64 rng(3);
  a.forward(x, true, &rng);  // moves the running statistics
  b.load_state(a.state());
  const auto ya = a.forward(x, false).value(), yb = b.forward(x, false).value();
  EXPECT_TRUE(rinv::testing::bit_equal(ya, yb));

  ModelConfig other = c;
  other.dense = {7};
  Model<double> d(other, 1);
  EXPECT_THROW(d.load_state(a.state()), DimensionError);
}

TEST(State, KeepMonomialsCopiesRows) {
  Model<double> m(small(HeadKind::monomial), 5);
  const std::size_t ch = m.layout().widths.back();
  const auto w = m.first_dense_weight().value();
  const auto e = m.monomial_head().exponents.value();
  const std::size_t out = w.shape()[1], f = e.shape()[1];
  m.keep_monomials({0, 2});
  EXPECT_EQ(m.monomial_head().count(), 2u);
  EXPECT_EQ(m.config().head.monomials.size(), 2u);
  const auto& w2 = m.first_dense_weight().value();
  const auto& e2 = m.monomial_head().exponents.value();
  ASSERT_EQ(w2.shape(), (Shape{2 * ch, out}));
  const std::size_t src[] = {0, 2};
  for (std::size_t j = 0; j < 2; ++j) {
    for (std::size_t k = 0; k < f; ++k) EXPECT_EQ(e2[j * f + k], e[src[j] * f + k]);
    for (std::size_t r = 0; r < ch; ++r)
      for (std::size_t o = 0; o < out; ++o) EXPECT_EQ(w2[(j * ch + r) * out + o], w[(src[j] * ch + r) * out + o]);
  }
  EXPECT_EQ(m.parameter_count(), resolve_layout(m.config()).parameters);
}
