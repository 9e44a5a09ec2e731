// Probe inputs and comparison helpers for property checks: random and smooth
// images, masked max-differences and a central-difference gradient check.
#pragma once

#include "rinv/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

namespace rinv::probe {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

/// Sum of a few wide Gaussian bumps per channel, scaled to peak 1.
template <typename T = double>
Tensor<T> smooth_image(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed, double width = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(0.3, 0.7), amp(0.3, 1.0);
  if (width <= 0) width = 0.2 * static_cast<double>(std::min(h, w));
  Tensor<T> t({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (int bump = 0; bump < 3; ++bump) {
      const double cy = pos(rng) * (h - 1), cx = pos(rng) * (w - 1), a = amp(rng);
      for (std::size_t u = 0; u < h; ++u)
        for (std::size_t v = 0; v < w; ++v) {
          const double d2 = (u - cy) * (u - cy) + (v - cx) * (v - cx);
          t[(ch * h + u) * w + v] += static_cast<T>(a * std::exp(-d2 / (2 * width * width)));
        }
    }
  const T peak = t.vec().maxCoeff();
  if (peak > 0) t.vec() /= peak;
  return t;
}

/// smooth_image faded to zero outside the inscribed disk, so rotations by any
/// angle keep all of its mass on the grid.
template <typename T>
Tensor<T> smooth_disk_image(std::size_t c, std::size_t hw, std::uint64_t seed, double width) {
  Tensor<T> t = smooth_image<T>(c, hw, hw, seed, width);
  const double centre = 0.5 * (static_cast<double>(hw) - 1);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t u = 0; u < hw; ++u)
      for (std::size_t v = 0; v < hw; ++v) {
        const double r = std::hypot(u - centre, v - centre) / centre;
        const double fade = r < 0.5 ? 1.0 : r > 0.95 ? 0.0 : 0.5 * (1 + std::cos(std::numbers::pi * (r - 0.5) / 0.45));
        t[(ch * hw + u) * hw + v] *= static_cast<T>(fade);
      }
  return t;
}

/// Max |a - b| over the last two axes, skipping `margin` pixels at each border.
template <typename T>
double interior_max_abs_diff(const Tensor<T>& a, const Tensor<T>& b, std::size_t margin) {
  const auto& s = a.shape();
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1], planes = a.numel() / (h * w);
  double m = 0;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t u = margin; u + margin < h; ++u)
      for (std::size_t v = margin; v + margin < w; ++v) {
        const std::size_t i = (p * h + u) * w + v;
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
      }
  return m;
}

/// Max |a - b| over the last two axes at pixels within `radius` of the plane centre.
template <typename T>
double disk_max_abs_diff(const Tensor<T>& a, const Tensor<T>& b, double radius) {
  const auto& s = a.shape();
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1], planes = a.numel() / (h * w);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  double m = 0;
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t u = 0; u < h; ++u)
      for (std::size_t v = 0; v < w; ++v) {
        if ((u - cy) * (u - cy) + (v - cx) * (v - cx) > radius * radius) continue;
        const std::size_t i = (p * h + u) * w + v;
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
      }
  return m;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.data(), a.data() + a.numel(), b.data());
}

/// Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor).
inline double relative_error(const Tensor<double>& a, const Tensor<double>& b, double floor = 1e-12) {
  const double diff = (a.vec() - b.vec()).norm();
  return diff / std::max({a.vec().norm(), b.vec().norm(), floor});
}

/// Compares reverse-mode gradients of sum(f(inputs) * probe) with central
/// differences; returns the worst norm-wise relative error over all inputs.
inline double gradient_check(const std::function<Var<double>(const std::vector<Var<double>>&)>& f,
                             std::vector<Tensor<double>> inputs, std::uint64_t seed, double step = 1e-5) {
  std::vector<Var<double>> vars;
  for (auto& t : inputs) vars.emplace_back(t, true);
  const Var<double> out = f(vars);
  const Var<double> probe(random_tensor(out.shape(), seed ^ 0x9e3779b97f4a7c15ULL, 0.5, 1.5));
  backward(sum(mul(out, probe)));

  auto loss_at = [&](const std::vector<Tensor<double>>& xs) {
    std::vector<Var<double>> cs;
    for (const auto& t : xs) cs.emplace_back(t, false);
    return sum(mul(f(cs), probe)).value().item();
  };
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double> numeric(inputs[k].shape());
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + step;
      const double up = loss_at(inputs);
      inputs[k][i] = orig - step;
      const double down = loss_at(inputs);
      inputs[k][i] = orig;
      numeric[i] = (up - down) / (2 * step);
    }
    worst = std::max(worst, relative_error(vars[k].grad(), numeric));
  }
  return worst;
}

}  // namespace rinv::probe
