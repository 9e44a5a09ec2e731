#include "rinv/selection.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

using namespace rinv;
using rinv::testing::random_tensor;

namespace {

ModelConfig pool_model(const std::vector<MonomialSpec>& specs) {
  ModelConfig c;
  c.image_size = 12;
  c.channels = {3, 4};
  c.n_alpha = 4;
  c.n_f = 3;
  c.kernel = 3;
  c.rescale = false;
  c.match_budget = false;
  c.dense = {8};
  c.dropout = 0;
  c.head.kind = HeadKind::monomial;
  c.head.monomials = specs;
  return c;
}

SelectionConfig small_selection(std::size_t pool, std::size_t target) {
  SelectionConfig s;
  s.pool = pool;
  s.target = target;
  s.schedule = {{1, (pool + target) / 2}, {1, target}};
  s.seed = 4;
  return s;
}

}  // namespace

TEST(Pool, SingleMonomialSingleDistance) {
  SelectionConfig s;
  s.pool = 1;
  s.factors = 1;
  s.distance_set = {0};
  const auto pool = init_pool(s, 8);
  ASSERT_EQ(pool.size(), 1u);
  EXPECT_EQ(pool[0].distances, std::vector<double>{0});
}

TEST(Pool, CatalogCoversEveryDistanceCombination) {
  SelectionConfig s;
  s.pool = 7;
  s.factors = 2;
  s.init = PoolInit::catalog;
  const auto pool = init_pool(s, 8);
  ASSERT_EQ(pool.size(), 7u);
  std::set<std::vector<double>> seen;
  for (const auto& m : pool) seen.insert(m.distances);
  for (double d : {0.0, 1.0, 2.0}) EXPECT_TRUE(seen.count({0.0, d})) << d;
  s.pool = 2;
  EXPECT_THROW(init_pool(s, 8), ContractError);
}

TEST(Pool, RangesAndDeterminism) {
  SelectionConfig s;
  s.seed = 11;
  const auto a = init_pool(s, 8), b = init_pool(s, 8);
  ASSERT_EQ(a.size(), 50u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].distances, b[i].distances);
    EXPECT_EQ(a[i].exponents, b[i].exponents);
    ASSERT_EQ(a[i].distances.size(), 3u);
    EXPECT_EQ(a[i].distances[0], 0.0);
    for (double d : a[i].distances) EXPECT_TRUE(d == 0 || d == 1 || d == 2);
    for (double e : a[i].exponents) {
      EXPECT_GE(e, 0.0);
      EXPECT_LE(e, 8.0 / 3.0);
    }
  }
  s.seed = 12;
  EXPECT_NE(init_pool(s, 8)[0].exponents, a[0].exponents);
}

TEST(RandomSelection, EdgesAndStability) {
  const auto all = select_random(6, 6, 1);
  EXPECT_EQ(all, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
  EXPECT_TRUE(select_random(6, 0, 1).empty());
  const auto a = select_random(50, 5, 9);
  EXPECT_EQ(a, select_random(50, 5, 9));
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 5u);
  EXPECT_THROW(select_random(4, 5, 1), ContractError);
}

TEST(RandomSelection, RoughlyUniform) {
  std::vector<std::size_t> hits(10, 0);
  for (std::uint64_t s = 0; s < 2000; ++s)
    for (std::size_t i : select_random(10, 3, s)) ++hits[i];
  for (std::size_t h : hits) EXPECT_NEAR(static_cast<double>(h), 600.0, 90.0);  // about 4 sigma
}

TEST(Magnitude, ConstantAndZeroedColumns) {
  Tensor<double> w({3 * 4, 5});
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = -0.75;
  auto s = magnitude_scores(w, 3);
  EXPECT_EQ(s.kind, ScoreKind::magnitude);
  for (double v : s.values) EXPECT_DOUBLE_EQ(v, 0.75);
  for (std::size_t r = 4; r < 8; ++r)
    for (std::size_t k = 0; k < 5; ++k) w[r * 5 + k] = 0;
  s = magnitude_scores(w, 3);
  EXPECT_EQ(s.values[1], 0.0);
  EXPECT_EQ(top_k(s.values, 2), (std::vector<std::size_t>{0, 2}));
  EXPECT_THROW(magnitude_scores(w, 5), ContractError);
}

TEST(Magnitude, ScalarLoopOracle) {
  const std::size_t m = 6, c = 5, out = 7;
  const auto w = random_tensor<double>({m * c, out}, 21);
  const auto s = magnitude_scores(w, m);
  for (std::size_t j = 0; j < m; ++j) {
    double sum = 0;
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t l = 0; l < out; ++l) sum += std::abs(w[(j * c + k) * out + l]);
    EXPECT_NEAR(s.values[j], sum / static_cast<double>(c * out), 1e-12);
  }
}

TEST(Magnitude, PositiveScalingAndPermutation) {
  const std::size_t m = 8, c = 3, out = 4;
  const auto w = random_tensor<double>({m * c, out}, 5);
  const auto base = magnitude_scores(w, m).values;
  Tensor<double> scaled = w;
  for (std::size_t i = 0; i < scaled.numel(); ++i) scaled[i] *= 3.5;
  const auto s2 = magnitude_scores(scaled, m).values;
  for (std::size_t j = 0; j < m; ++j) EXPECT_NEAR(s2[j], 3.5 * base[j], 1e-12);
  EXPECT_EQ(top_k(s2, 3), top_k(base, 3));

  const std::vector<std::size_t> perm{3, 7, 0, 5, 1, 6, 2, 4};
  Tensor<double> pw({m * c, out});
  for (std::size_t j = 0; j < m; ++j)
    std::copy_n(w.data() + perm[j] * c * out, c * out, pw.data() + j * c * out);
  const auto ps = magnitude_scores(pw, m).values;
  for (std::size_t j = 0; j < m; ++j) EXPECT_EQ(ps[j], base[perm[j]]);
}

TEST(TopK, HandSetScoresAndTies) {
  EXPECT_EQ(top_k({3, 1, 4, 2}, 2), (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(top_k({1, 5, 5, 5}, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(top_k({1, 2}, 0), std::vector<std::size_t>{});
}

TEST(Validate, ScheduleRules) {
  SelectionConfig s;
  EXPECT_NO_THROW(validate(s));
  s.schedule = {{10, 25}, {5, 25}};
  EXPECT_THROW(validate(s), ContractError);
  s.schedule = {{10, 60}, {5, 5}};
  EXPECT_THROW(validate(s), ContractError);
  s.schedule = {{10, 25}, {5, 4}};
  EXPECT_THROW(validate(s), ContractError);
  s.schedule = {{0, 50}};
  s.target = 50;
  EXPECT_NO_THROW(validate(s));
}

TEST(Connectivity, ZeroWeightsDuplicatesAndFiniteDifferences) {
  const MonomialSpec a{{0, 1, 2}, {1.0, 0.5, 1.5}}, b{{0, 2, 1}, {0.5, 1.0, 1.0}};
  Model<double> m(pool_model({a, b, a}), 3);
  const std::size_t ch = m.layout().widths.back();
  auto& w = m.first_dense_weight().mutable_value();
  const std::size_t out = w.shape()[1];
  for (std::size_t r = 0; r < ch; ++r)
    for (std::size_t k = 0; k < out; ++k) {
      w[((2 * ch) + r) * out + k] = w[r * out + k];
      w[(ch + r) * out + k] = 0;
    }
  const Dataset data = synth_shapes(10, 12, 4, 8);
  const auto s = connectivity_scores(m, data, 5);
  EXPECT_EQ(s.kind, ScoreKind::sensitivity);
  EXPECT_EQ(s.values[1], 0.0);
  EXPECT_NEAR(s.values[0], s.values[2], 1e-10);

  // single monomial: |dL/dc| against central differences of the mask
  Model<double> one(pool_model({b}), 5);
  const auto g = connectivity_scores(one, data, 5).values[0];
  const std::vector<std::size_t> all{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto loss_at = [&](double cval, std::size_t lo) {
    const std::vector<std::size_t> idx(all.begin() + lo, all.begin() + lo + 5);
    Var<double> mask(Tensor<double>({1}, {cval}));
    const auto logits = one.forward(Var<double>(data.images<double>(idx)), false, nullptr, &mask);
    return cross_entropy(logits, data.labels_at(idx)).value()[0];
  };
  const double eps = 1e-4;
  const double fd = (loss_at(1 + eps, 0) + loss_at(1 + eps, 5) - loss_at(1 - eps, 0) - loss_at(1 - eps, 5)) / (2 * eps);
  EXPECT_LE(std::abs(g - std::abs(fd)) / std::max(std::abs(fd), 1e-12), 1e-3);
}

TEST(Selection, FullKeepScheduleLeavesPoolUnchanged) {
  const auto specs = init_pool(small_selection(6, 3), 4);
  Model<double> m(pool_model(specs), 1);
  const Dataset data = synth_shapes(20, 12, 4, 2);
  TrainConfig t;
  t.epochs = 1;
  t.batch_size = 10;
  Trainer<double> tr(m, data, nullptr, t);
  SelectionConfig s = small_selection(6, 6);
  s.schedule = {{0, 6}};
  const auto before = m.first_dense_weight().value();
  const auto r = select_monomials(m, tr, data, s);
  EXPECT_EQ(r.monomials.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(r.monomials[i].origin, i);
  EXPECT_TRUE(rinv::testing::bit_equal(before, m.first_dense_weight().value()));
}

TEST(Selection, MagnitudeScheduleKeepsSurvivorsAndIsDeterministic) {
  const Dataset data = synth_shapes(30, 12, 4, 2);
  std::vector<std::size_t> origins[2];
  for (int run = 0; run < 2; ++run) {
    SelectionConfig s = small_selection(8, 2);
    Model<double> m(pool_model(init_pool(s, 4)), 7);
    TrainConfig t;
    t.epochs = 4;
    t.batch_size = 10;
    t.seed = 2;
    Trainer<double> tr(m, data, nullptr, t);
    const auto r = select_monomials(m, tr, data, s);
    ASSERT_EQ(r.steps.size(), 2u);
    EXPECT_EQ(r.steps[0].before, 8u);
    EXPECT_EQ(r.steps[0].after, 5u);
    EXPECT_EQ(r.steps[1].after, 2u);
    EXPECT_EQ(r.steps[0].epoch, 1u);
    EXPECT_EQ(r.steps[1].epoch, 2u);
    for (const auto& step : r.steps) EXPECT_TRUE(step.continuous());
    EXPECT_EQ(m.monomial_head().count(), 2u);
    for (const auto& sm : r.monomials) origins[run].push_back(sm.origin);
    tr.run();
    EXPECT_EQ(tr.epoch(), 4u);
  }
  EXPECT_EQ(origins[0], origins[1]);
}

TEST(Selection, ConnectivityAtInitIdentityWhenKeepingAll) {
  SelectionConfig s = small_selection(4, 4);
  s.algorithm = SelectionAlgorithm::connectivity;
  s.schedule = {{0, 4}};
  Model<double> m(pool_model(init_pool(s, 4)), 2);
  const Dataset data = synth_shapes(10, 12, 4, 3);
  TrainConfig t;
  Trainer<double> tr(m, data, nullptr, t);
  const auto r = select_monomials(m, tr, data, s);
  EXPECT_EQ(r.kind, ScoreKind::sensitivity);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r.monomials[i].origin, i);
  EXPECT_EQ(tr.epoch(), 0u);
}

TEST(Selection, RandomAlgorithmNeedsNoTraining) {
  SelectionConfig s = small_selection(8, 3);
  s.algorithm = SelectionAlgorithm::random;
  Model<double> m(pool_model(init_pool(s, 4)), 2);
  const Dataset data = synth_shapes(10, 12, 4, 3);
  TrainConfig t;
  Trainer<double> tr(m, data, nullptr, t);
  const auto r = select_monomials(m, tr, data, s);
  EXPECT_EQ(tr.epoch(), 0u);
  ASSERT_EQ(r.monomials.size(), 3u);
  const auto expected = select_random(8, 3, s.seed);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(r.monomials[i].origin, expected[i]);
}

TEST(Sidecar, RoundTrip) {
  SelectionResult r;
  r.kind = ScoreKind::magnitude;
  r.monomials = {{{{0, 1, 2}, {0.1, 1.0 / 3.0, 2.5}}, 17, 0.125}, {{{0, 0, 1}, {1e-9, 2.0, 0.7}}, 3, 1.0 / 7.0}};
  std::stringstream io;
  write_sidecar(io, r);
  const auto back = read_sidecar(io);
  EXPECT_EQ(back.kind, r.kind);
  ASSERT_EQ(back.monomials.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back.monomials[i].origin, r.monomials[i].origin);
    EXPECT_EQ(back.monomials[i].score, r.monomials[i].score);
    EXPECT_EQ(back.monomials[i].spec.distances, r.monomials[i].spec.distances);
    EXPECT_EQ(back.monomials[i].spec.exponents, r.monomials[i].spec.exponents);
  }
  std::istringstream bad("[selection]\nscore = magnitude\ncount = 2\n[monomial.0]\norigin = 1\n");
  EXPECT_THROW(read_sidecar(bad), std::exception);
}
