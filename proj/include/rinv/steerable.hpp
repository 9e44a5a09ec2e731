// Rotation-steerable filter bases, lifting and group convolutions, group
// pooling, and the parameter-budget arithmetic used to match plain CNNs.
#pragma once

#include "rinv/group.hpp"

#include <cstdint>
#include <vector>

namespace rinv {

inline constexpr double kRingSigma = 0.6;

/// One circular-harmonic basis function: a Gaussian ring of radius `ring`
/// modulated by cos(m theta) or sin(m theta).
struct BasisAtom {
  int ring = 0;
  int frequency = 0;
  bool sine = false;
};

/// Orders atoms by frequency, then ring, cosine before sine. Frequencies are
/// capped at m <= 2 * ring (ring 0 carries only m = 0); when more atoms are
/// requested than the capped set holds, higher aliased frequencies on rings
/// >= 1 follow, skipping atoms that vanish on the grid.
std::vector<BasisAtom> enumerate_atoms(std::size_t kernel_size, std::size_t count);

/// Samples `atoms` on the k x k grid rotated by `angle` (theta -> theta - angle),
/// normalised by the unrotated Frobenius norm. Quarter turns permute the
/// unrotated samples exactly. Returns [atoms, k, k].
template <typename T>
Tensor<T> sample_atoms(std::size_t kernel_size, const std::vector<BasisAtom>& atoms, double angle);

template <typename T>
struct SteerableBasis {
  std::size_t kernel_size = 0;
  std::size_t n_f = 0;
  CyclicRotationGroup group{1};
  std::vector<BasisAtom> atoms;  // 2 * n_f entries
  Tensor<T> filters;             // [n_alpha, 2 n_f, k, k]

  std::size_t atom_count() const noexcept { return atoms.size(); }
};

template <typename T>
SteerableBasis<T> build_basis(std::size_t kernel_size, std::size_t n_f, std::size_t n_alpha);

/// Coefficients over a steerable basis: [c_o, c_i, 2 n_F] for a lifting
/// filter, [c_o, c_i, n_alpha, 2 n_F] for a filter over group x space.
template <typename T>
struct SteerableFilter {
  Parameter<T> coefficients;

  bool over_group() const noexcept { return coefficients.value().rank() == 4; }
  std::size_t out_channels() const { return coefficients.value().shape()[0]; }
  std::size_t in_channels() const { return coefficients.value().shape()[1]; }
};

/// He-style random initialisation of steerable coefficients.
template <typename T>
SteerableFilter<T> make_steerable_filter(std::string name, std::size_t c_out, std::size_t c_in, const SteerableBasis<T>& basis,
                                         bool over_group, std::uint64_t seed);

/// Rotated filter bank for lifting: [c_o * n, c_i, k, k], output index c_o*n + k.
template <typename T>
Var<T> synthesize_lifting_bank(const SteerableFilter<T>& filter, const SteerableBasis<T>& basis);
/// Rotated filter bank for group convolution: [c_o * n, c_i * n, k, k] where
/// entry (o,k ; i,h) holds the coefficient slice (h - k) mod n rotated by k.
template <typename T>
Var<T> synthesize_group_bank(const SteerableFilter<T>& filter, const SteerableBasis<T>& basis);

/// Lifts x [C,H,W] or [N,C,H,W] with a prebuilt rotated bank [C_o*n, C_i, k, k].
template <typename T>
RegularFeatureMap<T> lifting_conv_bank(const Var<T>& x, const Var<T>& bank, const CyclicRotationGroup& group);

/// Same-padded lifting convolution: channel k of the output is x correlated
/// with the filter rotated by g_k.
template <typename T>
RegularFeatureMap<T> lifting_conv(const Var<T>& x, const SteerableFilter<T>& filter, const SteerableBasis<T>& basis);

/// Same-padded group convolution over G x Z^2.
template <typename T>
RegularFeatureMap<T> group_conv(const RegularFeatureMap<T>& f, const SteerableFilter<T>& filter,
                                const SteerableBasis<T>& basis);

/// Elementwise max over the group axis: [.., C, n, H, W] -> [.., C, H, W].
template <typename T>
Var<T> group_max_pool(const RegularFeatureMap<T>& f);

/// Global max per channel: [.., C, H, W] -> [.., C].
template <typename T>
Var<T> spatial_max_pool(const Var<T>& x);

/// Exact rational a/b in lowest terms.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;
  double value() const noexcept { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Rational&) const = default;
};
Rational make_rational(std::int64_t num, std::int64_t den);

struct ParamRatio {
  Rational group_ratio;       // 2 n_F n_alpha / k^2
  double channel_factor;      // sqrt(group_ratio)
  Rational lifting_ratio;     // 2 n_F / k^2
  double lifting_factor;      // sqrt(lifting_ratio)
};

/// Channel budgeting that keeps a steerable layer's parameter count equal to a
/// k x k convolution: c~_i c~_o / (c_i c_o) = k^2 / (2 n_F n_alpha).
ParamRatio param_ratio(std::size_t k, std::size_t n_alpha, std::size_t n_f);

/// Integer n_F closest to k^2 / (2 n_alpha) (halves round up), the basis size
/// for which a steerable layer needs no channel rescaling.
std::size_t nearest_unit_ratio_nf(std::size_t k, std::size_t n_alpha);

}  // namespace rinv
