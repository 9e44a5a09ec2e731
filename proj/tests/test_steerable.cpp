#include "rinv/steerable.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace rinv;
using rinv::testing::bit_equal;
using rinv::testing::disk_max_abs_diff;
using rinv::testing::interior_max_abs_diff;
using rinv::testing::random_tensor;
using rinv::testing::smooth_image;

namespace {

constexpr double kPi = std::numbers::pi;

Tensor<double> plane(const Tensor<double>& t, std::size_t first, std::size_t k) {
  Tensor<double> out({k, k});
  std::copy_n(t.data() + first * k * k, k * k, out.data());
  return out;
}

// Synthesised filter for one coefficient vector at group element r, summed in double.
Tensor<double> synth(const SteerableBasis<double>& basis, const double* coeff, std::size_t r) {
  const std::size_t k = basis.kernel_size, nb = basis.atom_count();
  Tensor<double> f({k, k});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t t = 0; t < k * k; ++t) f[t] += coeff[b] * basis.filters[(r * nb + b) * k * k + t];
  return f;
}

}  // namespace

TEST(SteerableBasis, EvenKernelRejected) {
  EXPECT_THROW(build_basis<double>(4, 3, 4), ContractError);
  EXPECT_THROW(build_basis<double>(3, 0, 4), ContractError);
}

TEST(SteerableBasis, AtomsHaveUnitNormAtZeroAngle) {
  for (std::size_t k : {3, 5, 7}) {
    const auto basis = build_basis<double>(k, 8, 4);
    for (std::size_t b = 0; b < basis.atom_count(); ++b)
      EXPECT_NEAR(plane(basis.filters, b, k).vec().norm(), 1.0, 1e-12) << "k=" << k << " atom " << b;
  }
}

TEST(SteerableBasis, EnumerationOrderAndCap) {
  // k=5 holds 15 capped atoms: m=0 on rings 0..2, m=1,2 on rings 1,2, m=3,4 on ring 2
  const auto atoms = enumerate_atoms(5, 20);
  ASSERT_EQ(atoms.size(), 20u);
  EXPECT_EQ(atoms[0].frequency, 0);
  EXPECT_EQ(atoms[0].ring, 0);
  for (std::size_t i = 0; i < 15; ++i) {
    if (i > 0) {
      EXPECT_LE(atoms[i - 1].frequency, atoms[i].frequency);
    }
    if (atoms[i].frequency > 0) {
      EXPECT_LE(atoms[i].frequency, 2 * atoms[i].ring);
    }
  }
  EXPECT_FALSE(atoms[1].sine);
  EXPECT_EQ(atoms[3].frequency, 1);
  EXPECT_FALSE(atoms[3].sine);
  EXPECT_TRUE(atoms[4].sine);
  for (std::size_t i = 15; i < 20; ++i) EXPECT_GT(atoms[i].frequency, 2 * atoms[i].ring);
}

TEST(SteerableBasis, OvercompleteRequestStillFilled) {
  const auto basis = build_basis<double>(3, 16, 8);
  EXPECT_EQ(basis.atom_count(), 32u);
  EXPECT_EQ(basis.filters.shape(), (Shape{8, 32, 3, 3}));
}

TEST(SteerableBasis, FullTurnReproducesUnrotated) {
  const auto atoms = enumerate_atoms(5, 12);
  EXPECT_TRUE(bit_equal(sample_atoms<double>(5, atoms, 2 * kPi), sample_atoms<double>(5, atoms, 0.0)));
}

TEST(SteerableBasis, QuarterTurnCosineIsSine) {
  const std::vector<BasisAtom> cosine{{1, 1, false}}, sine{{1, 1, true}};
  const auto rotated = sample_atoms<double>(5, cosine, kPi / 2);
  const auto reference = sample_atoms<double>(5, sine, 0.0);
  EXPECT_LE(max_abs_diff(rotated, reference), 1e-12);
  // the analytic path agrees with the permutation path
  const auto analytic = sample_atoms<double>(5, cosine, kPi / 2 + 1e-9);
  EXPECT_LE(max_abs_diff(rotated, analytic), 1e-8);
}

TEST(SteerableBasis, AnalyticRotationCloseToRasterRotation) {
  // Rings with sigma 0.6 sit near the sampling limit, so bilinear resampling
  // of the upright filter loses detail that the analytic rotation keeps.
  const auto basis = build_basis<double>(9, 3, 16);
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto coeff = random_tensor({basis.atom_count()}, seed);
    const auto base = synth(basis, coeff.data(), 0);
    for (std::size_t r = 1; r < 16; ++r) {
      const auto raster = rotate_plane(Var<double>(base), basis.group.angle(r)).value();
      const auto analytic = synth(basis, coeff.data(), r);
      worst = std::max(worst, interior_max_abs_diff(raster, analytic, 1));
    }
  }
  EXPECT_LE(worst, 0.25);
}

TEST(LiftingConv, DeltaReproducesRotatedFilters) {
  const auto basis = build_basis<double>(5, 4, 8);
  const auto filter = make_steerable_filter<double>("psi", 2, 1, basis, false, 7);
  Tensor<double> x({1, 9, 9});
  x[4 * 9 + 4] = 1;
  const auto out = lifting_conv(Var<double>(x), filter, basis).data.value();
  ASSERT_EQ(out.shape(), (Shape{2, 8, 9, 9}));
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t r = 0; r < 8; ++r) {
      const auto f = synth(basis, filter.coefficients.value().data() + o * basis.atom_count(), r);
      // correlation with a delta at the centre yields the filter flipped about its centre
      for (std::size_t a = 0; a < 5; ++a)
        for (std::size_t b = 0; b < 5; ++b)
          EXPECT_NEAR(out(o, r, 6 - a, 6 - b), f(a, b), 1e-12);
    }
}

TEST(LiftingConv, QuarterTurnEquivarianceIsExact) {
  const auto basis = build_basis<double>(5, 6, 4);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto filter = make_steerable_filter<double>("psi", 3, 2, basis, false, seed);
    const Var<double> x(random_tensor({2, 12, 12}, 100 + seed));
    const auto base = lifting_conv(x, filter, basis);
    for (std::size_t g = 0; g < 4; ++g) {
      const auto lhs = lifting_conv(act_on_plane(basis.group, g, x), filter, basis).data.value();
      const auto rhs = act_on_regular(g, base).data.value();
      EXPECT_EQ(interior_max_abs_diff(lhs, rhs, 2), 0.0) << "seed " << seed << " g " << g;
    }
  }
}

TEST(LiftingConv, EightfoldEquivarianceOnSmoothInput) {
  const auto basis = build_basis<double>(5, 3, 8);
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto filter = make_steerable_filter<double>("psi", 2, 1, basis, false, seed);
    const Var<double> x(smooth_image(1, 49, 49, seed, 10.0));
    const auto base = lifting_conv(x, filter, basis);
    for (std::size_t g = 1; g < 8; ++g) {
      const auto lhs = lifting_conv(act_on_plane(basis.group, g, x), filter, basis).data.value();
      const auto rhs = act_on_regular(g, base).data.value();
      worst = std::max(worst, disk_max_abs_diff(lhs, rhs, 21.0));
    }
  }
  EXPECT_LE(worst, 1e-2);
}

TEST(LiftingConv, MismatchedBasisRejected) {
  const auto basis = build_basis<double>(3, 4, 4);
  const auto other = build_basis<double>(3, 2, 4);
  const auto filter = make_steerable_filter<double>("psi", 1, 1, other, false, 1);
  EXPECT_THROW(lifting_conv(Var<double>(random_tensor({1, 6, 6}, 1)), filter, basis), ContractError);
}

TEST(GroupConv, TrivialGroupIsPlainConvolution) {
  const auto basis = build_basis<double>(3, 4, 1);
  const auto filter = make_steerable_filter<double>("psi", 2, 3, basis, true, 3);
  const auto x = random_tensor({3, 1, 7, 7}, 4);
  const auto out = group_conv(RegularFeatureMap<double>(Var<double>(x), basis.group), filter, basis).data.value();
  Tensor<double> kernel({2, 3, 3, 3});
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t c = 0; c < 3; ++c) {
      const auto f = synth(basis, filter.coefficients.value().data() + (o * 3 + c) * basis.atom_count(), 0);
      std::copy_n(f.data(), 9, kernel.data() + (o * 3 + c) * 9);
    }
  const auto ref = same_conv2d(Var<double>(x.reshaped({1, 3, 7, 7})), Var<double>(kernel)).value();
  EXPECT_LE(max_abs_diff(out.reshaped(ref.shape()), ref), 1e-12);
}

TEST(GroupConv, MatchesBruteForceGroupCorrelation) {
  const std::size_t n = 4, k = 3, hw = 3, ci = 2, co = 2;
  const auto basis = build_basis<double>(k, 3, n);
  const auto filter = make_steerable_filter<double>("psi", co, ci, basis, true, 11);
  const auto x = random_tensor({ci, n, hw, hw}, 12);
  const auto out = group_conv(RegularFeatureMap<double>(Var<double>(x), basis.group), filter, basis).data.value();
  const auto& coeff = filter.coefficients.value();
  const std::size_t nb = basis.atom_count();
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t g = 0; g < n; ++g)
      for (std::size_t u = 0; u < hw; ++u)
        for (std::size_t v = 0; v < hw; ++v) {
          double acc = 0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t h = 0; h < n; ++h) {
              const auto psi = synth(basis, coeff.data() + ((o * ci + c) * n + (h + n - g) % n) * nb, g);
              for (std::size_t a = 0; a < k; ++a)
                for (std::size_t b = 0; b < k; ++b) {
                  const long y = long(u) + long(a) - 1, z = long(v) + long(b) - 1;
                  if (y < 0 || z < 0 || y >= long(hw) || z >= long(hw)) continue;
                  acc += x(c, h, std::size_t(y), std::size_t(z)) * psi(a, b);
                }
            }
          EXPECT_NEAR(out(o, g, u, v), acc, 1e-12);
        }
}

TEST(GroupConv, QuarterTurnEquivarianceIsExact) {
  const auto basis = build_basis<double>(3, 4, 4);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto filter = make_steerable_filter<double>("psi", 2, 3, basis, true, seed);
    const RegularFeatureMap<double> f(Var<double>(random_tensor({2, 3, 4, 10, 10}, 50 + seed)), basis.group);
    const auto base = group_conv(f, filter, basis);
    for (std::size_t g = 0; g < 4; ++g) {
      const auto lhs = group_conv(act_on_regular(g, f), filter, basis).data.value();
      const auto rhs = act_on_regular(g, base).data.value();
      EXPECT_EQ(interior_max_abs_diff(lhs, rhs, 1), 0.0) << "seed " << seed << " g " << g;
    }
  }
}

TEST(GroupConv, EightfoldEquivarianceOnSmoothInput) {
  const auto basis = build_basis<double>(5, 3, 8);
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto lift = make_steerable_filter<double>("lift", 2, 1, basis, false, seed);
    const auto filter = make_steerable_filter<double>("psi", 2, 2, basis, true, seed + 10);
    const Var<double> x(smooth_image(1, 49, 49, seed, 10.0));
    // a smooth regular feature map with unit peak
    const auto lifted = lifting_conv(x, lift, basis).data;
    const RegularFeatureMap<double> f(scale(lifted, 1.0 / max_abs(lifted.value())), basis.group);
    const auto base = group_conv(f, filter, basis);
    for (std::size_t g = 1; g < 8; ++g) {
      const auto lhs = group_conv(act_on_regular(g, f), filter, basis).data.value();
      const auto rhs = act_on_regular(g, base).data.value();
      worst = std::max(worst, disk_max_abs_diff(lhs, rhs, 19.0));
    }
  }
  EXPECT_LE(worst, 1e-2);
}

TEST(GroupConv, GroupMismatchRejected) {
  const auto basis = build_basis<double>(3, 4, 4);
  const auto filter = make_steerable_filter<double>("psi", 1, 1, basis, true, 1);
  const RegularFeatureMap<double> f(Var<double>(random_tensor({1, 8, 5, 5}, 1)), CyclicRotationGroup(8));
  EXPECT_THROW(group_conv(f, filter, basis), ContractError);
}

TEST(GroupPooling, MaxOverGroupCommutesWithAction) {
  const CyclicRotationGroup c4(4);
  const RegularFeatureMap<double> f(Var<double>(random_tensor({3, 4, 6, 6}, 5)), c4);
  for (std::size_t g = 0; g < 4; ++g)
    EXPECT_TRUE(bit_equal(group_max_pool(act_on_regular(g, f)).value(),
                          act_on_plane(c4, g, group_max_pool(f)).value()));
}

TEST(GroupPooling, MatchesScalarOracle) {
  const auto x = random_tensor({2, 8, 3, 3}, 6);
  const auto out = group_max_pool(RegularFeatureMap<double>(Var<double>(x), CyclicRotationGroup(8))).value();
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t u = 0; u < 3; ++u)
      for (std::size_t v = 0; v < 3; ++v) {
        double m = -1e300;
        for (std::size_t g = 0; g < 8; ++g) m = std::max(m, x(c, g, u, v));
        EXPECT_EQ(out(c, u, v), m);
      }
  const auto constant = Tensor<double>::full({1, 4, 2, 2}, 2.5);
  EXPECT_EQ(max_abs(group_max_pool(RegularFeatureMap<double>(Var<double>(constant), CyclicRotationGroup(4))).value()),
            2.5);
}

TEST(SpatialPooling, GlobalMaxPerChannel) {
  auto x = Tensor<double>::full({2, 4, 4}, -1.0);
  x(1, 2, 3) = 7;
  const auto out = spatial_max_pool(Var<double>(x)).value();
  EXPECT_EQ(out.shape(), (Shape{2}));
  EXPECT_EQ(out[0], -1.0);
  EXPECT_EQ(out[1], 7.0);
  const auto r = random_tensor({3, 5, 5}, 8);
  const auto pooled = spatial_max_pool(Var<double>(r)).value();
  for (std::size_t c = 0; c < 3; ++c)
    EXPECT_EQ(pooled[c], *std::max_element(r.data() + c * 25, r.data() + (c + 1) * 25));
}

TEST(ParamRatio, StandardConfiguration) {
  const auto p = param_ratio(3, 8, 16);
  EXPECT_EQ(p.group_ratio, (Rational{256, 9}));
  EXPECT_EQ(p.channel_factor, 16.0 / 3.0);
  EXPECT_EQ(p.lifting_ratio, (Rational{32, 9}));
  EXPECT_DOUBLE_EQ(p.lifting_factor, std::sqrt(32.0 / 9.0));
}

TEST(ParamRatio, NearestUnitBasisSize) {
  EXPECT_EQ(nearest_unit_ratio_nf(3, 1), 5u);  // 9/2 = 4.5 rounds up
  EXPECT_EQ(param_ratio(3, 1, 5).group_ratio, (Rational{10, 9}));
  EXPECT_EQ(nearest_unit_ratio_nf(3, 8), 1u);
  EXPECT_EQ(nearest_unit_ratio_nf(5, 4), 3u);
}

TEST(SteerableFilter, ParameterCountIsExact) {
  const auto basis = build_basis<double>(3, 16, 8);
  const auto lift = make_steerable_filter<double>("lift", 5, 3, basis, false, 1);
  const auto gconv = make_steerable_filter<double>("g", 5, 3, basis, true, 1);
  EXPECT_EQ(lift.coefficients.numel(), 2u * 16 * 3 * 5);
  EXPECT_EQ(gconv.coefficients.numel(), 2u * 16 * 8 * 3 * 5);
}

TEST(SteerableFilter, GradientsMatchFiniteDifferences) {
  const auto basis = build_basis<double>(3, 3, 4);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto lift = make_steerable_filter<double>("l", 2, 1, basis, false, seed);
    const auto gconv = make_steerable_filter<double>("g", 1, 2, basis, true, seed + 1);
    auto f = [&](const std::vector<Var<double>>& v) {
      SteerableFilter<double> l{Parameter<double>("l", v[0].value())}, g{Parameter<double>("g", v[1].value())};
      l.coefficients.var = v[0];
      g.coefficients.var = v[1];
      const auto lifted = lifting_conv(v[2], l, basis);
      const RegularFeatureMap<double> act(relu(lifted.data), basis.group);
      return group_conv(act, g, basis).data;
    };
    const double err = rinv::testing::gradient_check(
        f, {lift.coefficients.value(), gconv.coefficients.value(), random_tensor({1, 5, 5}, seed + 2)}, seed);
    EXPECT_LE(err, 1e-4) << "seed " << seed;
  }
}
