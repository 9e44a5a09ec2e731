// Differentiable kernels. All functions are pure: outputs depend only on the
// arguments (dropout draws from the caller-supplied generator).
#pragma once

#include "rinv/autodiff.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace rinv {

// Elementwise ----------------------------------------------------------------

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> square(const Var<T>& a);
/// |a| with subgradient 0 at 0.
template <typename T> Var<T> abs(const Var<T>& a);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> log(const Var<T>& a);

/// Adds `bias[c]` to every element whose index along `axis` is c.
template <typename T> Var<T> add_bias(const Var<T>& x, const Var<T>& bias, std::size_t axis);
/// Multiplies every element whose index along `axis` is c by `factor[c]`.
template <typename T> Var<T> mul_along(const Var<T>& x, const Var<T>& factor, std::size_t axis);

// Shape ------------------------------------------------------------------------

template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T> Var<T> transpose(const Var<T>& a);  // rank 2
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);
template <typename T> Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
/// out[.., (i + shift) mod len, ..] = a[.., i, ..] along `axis`.
template <typename T> Var<T> roll(const Var<T>& a, std::size_t axis, std::size_t shift);

// Reductions -------------------------------------------------------------------

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
/// Sum over `axis` with a cyclic-shift-invariant summation tree: permuting the
/// axis cyclically leaves the result bit-identical (power-of-two lengths).
template <typename T> Var<T> sum_axis(const Var<T>& a, std::size_t axis);
template <typename T> Var<T> mean_axis(const Var<T>& a, std::size_t axis);
/// Maximum over `axis`; the gradient routes to the first maximal element.
template <typename T> Var<T> max_axis(const Var<T>& a, std::size_t axis);

/// Scalar cyclic-shift-invariant sum of `n` values spaced `stride` apart.
template <typename T> T tree_sum(const T* x, std::size_t n, std::size_t stride = 1);

// Linear algebra -----------------------------------------------------------------

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x[N,in] * W[in,out] + b[out]
template <typename T> Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <typename T> Var<T> dense(const Var<T>& x, const Var<T>& w);

// Probabilistic ------------------------------------------------------------------

template <typename T> Var<T> softmax(const Var<T>& a, std::size_t axis);
/// Mean softmax cross-entropy of logits[N,K] against integer labels.
template <typename T> Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels);
/// Inverted dropout; identity when `train` is false or `rate` is 0.
template <typename T> Var<T> dropout(const Var<T>& a, T rate, bool train, std::mt19937_64& rng);

// Convolution and pooling ----------------------------------------------------------

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
  /// Input channels are summed in blocks of this size with the shift-invariant
  /// tree (the group axis of a regular feature map); 1 for plain convolution.
  std::size_t channel_block = 1;
};

/// Cross-correlation of x[N,Ci,H,W] with w[Co,Ci,k,k], zero padding.
///
/// For square odd kernels the taps are accumulated in quarter-turn orbits
/// paired as (t + R^2 t) + (R t + R^3 t), so rotating both the input and the
/// kernel by 90 degrees rotates the output bit-exactly.
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, const ConvOptions& opt = {});
template <typename T> Var<T> same_conv2d(const Var<T>& x, const Var<T>& w);
/// Non-overlapping max pooling over `size` x `size` windows of the last two axes.
template <typename T> Var<T> max_pool2d(const Var<T>& x, std::size_t size);

// Sampling and rotation --------------------------------------------------------------

/// Samples image[C,H,W] at continuous (row, col) coordinates[N,2]; returns [C,N].
/// Samples outside the image contribute zeros. Differentiable w.r.t. the image.
template <typename T> Var<T> bilinear_sample(const Var<T>& image, const Tensor<T>& coords);

/// True when `angle` is an integer multiple of pi/2 (to 1e-12 rad); sets `quarter` in [0,4).
bool is_quarter_turn(double angle, int& quarter);

/// Rotates the trailing H x W plane of x about ((H-1)/2, (W-1)/2):
/// out(u,v) = x(R(-angle) (u-c, v-c) + c). Quarter turns of square planes use
/// an exact index permutation, other angles bilinear sampling with zero padding.
template <typename T> Var<T> rotate_plane(const Var<T>& x, double angle);

/// Sampling plan shared by rotate_plane and its tests.
struct BilinearTap {
  std::int64_t index[4];  // -1 for out-of-bounds
  double weight[4];
};
std::vector<BilinearTap> rotation_taps(std::size_t h, std::size_t w, double angle);

}  // namespace rinv
