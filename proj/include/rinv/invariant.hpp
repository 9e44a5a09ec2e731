// Invariant-integration heads: group averages of monomials, weighted sums,
// MLPs and self-attention over rotated copies of a feature map.
//
// Heads accept x as [C,H,W] (returning [F]) or [N,C,H,W] (returning [N,F]).
#pragma once

#include "rinv/group.hpp"

#include <cstdint>
#include <variant>
#include <vector>

namespace rinv {

// Monomials --------------------------------------------------------------------

/// One monomial: factor i samples the pixel at distance distances[i] from the
/// centre (distances[0] == 0) along each group angle, raised to exponents[i].
struct MonomialSpec {
  std::vector<double> distances;
  std::vector<double> exponents;
};

template <typename T>
struct MonomialHead {
  std::vector<std::vector<double>> distances;  // [n_m][M_f]
  Parameter<T> exponents;                      // [n_m, M_f]

  std::size_t count() const { return distances.size(); }
  std::size_t factors() const { return distances.empty() ? 0 : distances.front().size(); }
  std::vector<MonomialSpec> specs() const;
  ParamRefs<T> params() { return {&exponents}; }
};

/// All specs must share one factor count and start with distance 0.
template <typename T>
MonomialHead<T> make_monomial_head(std::string name, const std::vector<MonomialSpec>& specs);

/// Per (sample, channel) shift x - min(x) + 1, making every value >= 1.
template <typename T>
Var<T> positive_shift(const Var<T>& x);

/// Monomial group averages of a strictly positive s[N,C,H,W]: for monomial j
/// and channel c, the mean over valid centres (u,v) and group angles phi of
/// prod_i s(u + cos(phi) d_i, v + sin(phi) d_i)^b_i, sampled bilinearly.
/// Valid centres keep every sample inside the image. Output [N, n_m * C],
/// feature index j * C + c. Differentiable in s and in the exponents.
template <typename T>
Var<T> monomial_features(const Var<T>& s, const Var<T>& exponents, const std::vector<std::vector<double>>& distances,
                         const CyclicRotationGroup& group);

/// positive_shift followed by monomial_features.
template <typename T>
Var<T> ii_monomial(const Var<T>& x, const MonomialHead<T>& head, const CyclicRotationGroup& group);

// Weighted sums ----------------------------------------------------------------

enum class WSMode { global, local };

template <typename T>
struct WSHead {
  WSMode mode = WSMode::local;
  Parameter<T> kernel;  // [C_o, C_i, k, k] local, [C_o, C_i, H, W] global

  std::size_t out_channels() const { return kernel.value().shape()[0]; }
  ParamRefs<T> params() { return {&kernel}; }
};

template <typename T>
WSHead<T> make_ws_head(std::string name, WSMode mode, std::size_t c_out, std::size_t c_in, std::size_t extent,
                       std::uint64_t seed);

/// Stack of kernel[..., h, w] rotated by every group element: [n, ...].
template <typename T>
Var<T> rotated_kernels(const Var<T>& kernel, const CyclicRotationGroup& group);

/// m[n,c,a,b] = mean over (u,v) of the zero-padded x[n,c,u+a-k/2,v+b-k/2];
/// the spatial mean of a same-padded correlation equals <m, kernel>.
template <typename T>
Var<T> window_means(const Var<T>& x, std::size_t k);

/// Global: mean over g of <x, rotated kernel>. Local: the same weighted sum at
/// every position and angle, averaged over both. Output [N, C_o].
template <typename T>
Var<T> ii_ws(const Var<T>& x, const WSHead<T>& head, const CyclicRotationGroup& group);

/// max |local weighted-sum head - mean over G x space of the lifting convolution
/// with the rotated kernels| for kernel psi[C_o, C_i, k, k].
double ws_groupconv_equivalence(const Tensor<double>& x, const Tensor<double>& psi, const CyclicRotationGroup& group);

// MLP ----------------------------------------------------------------------------

template <typename T>
struct MLPHead {
  std::size_t patch = 3;
  std::vector<Parameter<T>> weights;  // W_1 [C_i * patch^2, w_1], ..., W_l [w_{l-1}, C_o]

  std::size_t out_channels() const { return weights.back().value().shape()[1]; }
  ParamRefs<T> params();
};

template <typename T>
MLPHead<T> make_mlp_head(std::string name, std::size_t c_in, std::size_t patch, const std::vector<std::size_t>& widths,
                         std::uint64_t seed);

/// Neighbourhoods x(u + R(phi) t) for every sample, centre (u,v), angle phi and
/// patch offset t, bilinear with zero padding. Rows ordered (n, u, v, phi),
/// columns (c, t): [N * H * W * n, C * patch^2].
template <typename T>
Var<T> rotated_patches(const Var<T>& x, std::size_t patch, const CyclicRotationGroup& group);

/// Mean over positions and angles of relu(W_l ... relu(W_1 patch)). Output [N, C_o].
template <typename T>
Var<T> ii_mlp(const Var<T>& x, const MLPHead<T>& head, const CyclicRotationGroup& group);

// Self-attention -------------------------------------------------------------------

template <typename T>
struct SAHead {
  std::size_t heads = 1;
  std::size_t head_channels = 1;
  std::size_t height = 0, width = 0;
  Parameter<T> wq, wk, wv;  // [C_i, heads * C_h]
  Parameter<T> pos;         // [(2H-1)(2W-1), heads * C_h] added to keys, row (dy + H-1) * (2W-1) + (dx + W-1)
  Parameter<T> wo;          // [heads * C_h, C_o]

  std::size_t out_channels() const { return wo.value().shape()[1]; }
  ParamRefs<T> params() { return {&wq, &wk, &wv, &pos, &wo}; }
};

/// `channels` is the total attention width split evenly over `heads`.
template <typename T>
SAHead<T> make_sa_head(std::string name, std::size_t c_in, std::size_t channels, std::size_t heads, std::size_t c_out,
                       std::size_t height, std::size_t width, std::uint64_t seed);

/// r[i,j] = q_i . pk[offset(j - i)] for tokens on an h x w grid.
template <typename T>
Var<T> relative_logits(const Var<T>& q, const Var<T>& pk, std::size_t h, std::size_t w);

/// Group-averaged multi-head attention on tokens of the rotated input:
/// mean_g concat_h softmax(Q K^T + R) V, then W_o. Output [T, C_o] or [N, T, C_o].
template <typename T>
Var<T> ii_sa(const Var<T>& x, const SAHead<T>& head, const CyclicRotationGroup& group);

// Tagged head ----------------------------------------------------------------------

template <typename T>
using IIHead = std::variant<MonomialHead<T>, WSHead<T>, MLPHead<T>, SAHead<T>>;

/// Invariant features [N, F] (or [F]); the attention head is averaged over tokens.
template <typename T>
Var<T> apply_head(const IIHead<T>& head, const Var<T>& x, const CyclicRotationGroup& group);

template <typename T>
ParamRefs<T> head_params(IIHead<T>& head);

/// Feature count produced for `channels` input channels.
template <typename T>
std::size_t head_output_size(const IIHead<T>& head, std::size_t channels);

/// max |head(L_probe x) - head(x)| / max |head(x)| over output entries.
template <typename T>
double invariance_residual(const IIHead<T>& head, const Tensor<T>& x, const CyclicRotationGroup& group,
                           std::size_t probe);

}  // namespace rinv
