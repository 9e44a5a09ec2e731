#include "rinv/group.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace rinv {

CyclicRotationGroup::CyclicRotationGroup(std::size_t order) : order_(order) {
  if (order == 0) throw ContractError("rotation group order must be positive");
}

void CyclicRotationGroup::check(std::size_t k) const {
  if (k >= order_) throw ContractError("element " + std::to_string(k) + " not in C_" + std::to_string(order_));
}

std::size_t CyclicRotationGroup::compose(std::size_t a, std::size_t b) const {
  check(a);
  check(b);
  return (a + b) % order_;
}

std::size_t CyclicRotationGroup::inverse(std::size_t a) const {
  check(a);
  return (order_ - a) % order_;
}

double CyclicRotationGroup::angle(std::size_t k) const {
  check(k);
  return 2 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(order_);
}

std::pair<double, double> CyclicRotationGroup::cos_sin(std::size_t k) const {
  int quarter = 0;
  const double a = angle(k);
  if (is_quarter_turn(a, quarter)) {
    constexpr std::pair<double, double> table[4] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
    return table[quarter];
  }
  return {std::cos(a), std::sin(a)};
}

template <typename T>
RegularFeatureMap<T>::RegularFeatureMap(Var<T> d, CyclicRotationGroup g) : data(std::move(d)), group(g) {
  const auto rank = data.value().rank();
  if (rank != 4 && rank != 5)
    throw DimensionError("regular feature map must be [C,n,H,W] or [N,C,n,H,W], got " + shape_str(data.shape()));
  if (data.shape()[group_axis()] != group.order())
    throw ContractError("group channel size " + std::to_string(data.shape()[group_axis()]) + " != group order " +
                        std::to_string(group.order()));
}

template <typename T>
Var<T> act_on_plane(const CyclicRotationGroup& group, std::size_t k, const Var<T>& x) {
  return rotate_plane(x, group.angle(k));
}

template <typename T>
RegularFeatureMap<T> act_on_regular(std::size_t k, const RegularFeatureMap<T>& f) {
  if (!f.group.contains(k)) throw ContractError("act_on_regular: element not in the feature map's group");
  return RegularFeatureMap<T>(roll(act_on_plane(f.group, k, f.data), f.group_axis(), k), f.group);
}

template <typename T>
Var<T> group_average(const CyclicRotationGroup& group, const Var<T>& values) {
  if (values.value().rank() == 0 || values.shape()[0] != group.order())
    throw DimensionError("group_average: leading axis must equal group order " + std::to_string(group.order()));
  return mean_axis(values, 0);
}

#define RINV_INSTANTIATE_GROUP(T)                                                              \
  template struct RegularFeatureMap<T>;                                                        \
  template Var<T> act_on_plane<T>(const CyclicRotationGroup&, std::size_t, const Var<T>&);     \
  template RegularFeatureMap<T> act_on_regular<T>(std::size_t, const RegularFeatureMap<T>&);   \
  template Var<T> group_average<T>(const CyclicRotationGroup&, const Var<T>&);

RINV_INSTANTIATE_GROUP(float)
RINV_INSTANTIATE_GROUP(double)

}  // namespace rinv
