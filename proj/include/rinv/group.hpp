// The cyclic rotation group C_n and its actions on planar signals and on
// regular-representation feature maps.
#pragma once

#include "rinv/ops.hpp"

#include <cstddef>
#include <utility>

namespace rinv {

/// C_n with elements indexed by k = 0..n-1 (rotation by 2*pi*k/n).
class CyclicRotationGroup {
 public:
  explicit CyclicRotationGroup(std::size_t order);

  std::size_t order() const noexcept { return order_; }
  std::size_t identity() const noexcept { return 0; }
  bool contains(std::size_t k) const noexcept { return k < order_; }
  std::size_t compose(std::size_t a, std::size_t b) const;
  std::size_t inverse(std::size_t a) const;
  double angle(std::size_t k) const;
  /// cos/sin of angle(k); exactly (0, +-1) or (+-1, 0) for quarter turns.
  std::pair<double, double> cos_sin(std::size_t k) const;
  /// Every element acts on the square pixel grid by exact permutation.
  bool acts_exactly() const noexcept { return order_ == 1 || order_ == 2 || order_ == 4; }

  bool operator==(const CyclicRotationGroup&) const = default;

 private:
  void check(std::size_t k) const;
  std::size_t order_;
};

/// Feature map with layout [C, n, H, W] or batched [N, C, n, H, W].
template <typename T>
struct RegularFeatureMap {
  Var<T> data;
  CyclicRotationGroup group;

  RegularFeatureMap(Var<T> d, CyclicRotationGroup g);

  bool batched() const noexcept { return data.value().rank() == 5; }
  std::size_t group_axis() const noexcept { return data.value().rank() - 3; }
  std::size_t channels() const { return data.shape()[group_axis() - 1]; }
  std::size_t height() const { return data.shape()[group_axis() + 1]; }
  std::size_t width() const { return data.shape()[group_axis() + 2]; }
};

/// L_g x for a planar signal [..., H, W].
template <typename T>
Var<T> act_on_plane(const CyclicRotationGroup& group, std::size_t k, const Var<T>& x);

/// Rotates every plane and shifts the group channel: out[c, (j+k) mod n] = L_k f[c, j].
template <typename T>
RegularFeatureMap<T> act_on_regular(std::size_t k, const RegularFeatureMap<T>& f);

/// Uniform (Haar) average over the leading group axis of values[n, ...].
template <typename T>
Var<T> group_average(const CyclicRotationGroup& group, const Var<T>& values);

}  // namespace rinv
