#include "rinv/invariant.hpp"
#include "rinv/steerable.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace rinv {
namespace {

struct Tap {
  int dy, dx;
  double w;
};

// Bilinear taps of a fixed offset; zero-weight corners are dropped so integer
// offsets read exactly one pixel.
std::vector<Tap> offset_taps(double dy, double dx) {
  const double fy = std::floor(dy), fx = std::floor(dx);
  const double ay = dy - fy, ax = dx - fx;
  const double wy[2] = {1 - ay, ay}, wx[2] = {1 - ax, ax};
  std::vector<Tap> taps;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      if (wy[a] * wx[b] != 0) taps.push_back({static_cast<int>(fy) + a, static_cast<int>(fx) + b, wy[a] * wx[b]});
  return taps;
}

template <typename T>
Var<T> as_batch(const Var<T>& x, const char* who) {
  const auto& s = x.shape();
  if (s.size() == 4) return x;
  if (s.size() == 3) return reshape(x, Shape{1, s[0], s[1], s[2]});
  throw DimensionError(std::string(who) + " expects [C,H,W] or [N,C,H,W], got " + shape_str(s));
}

template <typename T>
Var<T> match_batch(const Var<T>& y, const Var<T>& x) {
  if (x.value().rank() == 4) return y;
  Shape s(y.shape().begin() + 1, y.shape().end());
  return reshape(y, s);
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

struct MonomialPlan {
  int margin = 0;
  std::vector<std::vector<std::vector<Tap>>> taps;  // [phi][factor]
};

MonomialPlan plan_monomial(const std::vector<double>& d, const CyclicRotationGroup& group) {
  MonomialPlan plan;
  double reach = 0;
  for (double di : d) reach = std::max(reach, di);
  plan.margin = static_cast<int>(std::ceil(reach - 1e-12));
  for (std::size_t k = 0; k < group.order(); ++k) {
    const auto [c, s] = group.cos_sin(k);
    std::vector<std::vector<Tap>> per;
    for (double di : d) per.push_back(offset_taps(c * di, s * di));
    plan.taps.push_back(std::move(per));
  }
  return plan;
}

}  // namespace

// Monomials --------------------------------------------------------------------------

template <typename T>
std::vector<MonomialSpec> MonomialHead<T>::specs() const {
  std::vector<MonomialSpec> out;
  const std::size_t mf = factors();
  for (std::size_t j = 0; j < count(); ++j) {
    MonomialSpec s{distances[j], {}};
    for (std::size_t i = 0; i < mf; ++i) s.exponents.push_back(static_cast<double>(exponents.value()[j * mf + i]));
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
MonomialHead<T> make_monomial_head(std::string name, const std::vector<MonomialSpec>& specs) {
  if (specs.empty()) throw ContractError("monomial head needs at least one monomial");
  const std::size_t mf = specs.front().distances.size();
  MonomialHead<T> head;
  Tensor<T> b({specs.size(), mf});
  for (std::size_t j = 0; j < specs.size(); ++j) {
    const auto& s = specs[j];
    if (s.distances.size() != mf || s.exponents.size() != mf)
      throw ContractError("monomial " + std::to_string(j) + " has a different factor count");
    if (s.distances.front() != 0) throw ContractError("monomial " + std::to_string(j) + " must start at distance 0");
    for (double d : s.distances)
      if (!(d >= 0)) throw ContractError("monomial distances must be non-negative");
    head.distances.push_back(s.distances);
    for (std::size_t i = 0; i < mf; ++i) b[j * mf + i] = static_cast<T>(s.exponents[i]);
  }
  head.exponents = Parameter<T>(std::move(name), std::move(b), Regularization::none);
  return head;
}

template <typename T>
Var<T> positive_shift(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() < 2) throw DimensionError("positive_shift expects [..,H,W], got " + shape_str(s));
  const std::size_t plane = s[s.size() - 1] * s[s.size() - 2], planes = x.value().numel() / plane;
  Tensor<T> out(s);
  std::vector<std::size_t> argmin(planes);
  const T* xv = x.value().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv + p * plane;
    argmin[p] = static_cast<std::size_t>(std::min_element(src, src + plane) - src);
    const T lo = src[argmin[p]];
    for (std::size_t i = 0; i < plane; ++i) out[p * plane + i] = src[i] - lo + T(1);
  }
  return make_result<T>(std::move(out), {x}, "positive_shift", [x, argmin, plane, planes](const Tensor<T>& g) {
    Tensor<T> gi = g;
    for (std::size_t p = 0; p < planes; ++p) {
      T total = 0;
      for (std::size_t i = 0; i < plane; ++i) total += g[p * plane + i];
      gi[p * plane + argmin[p]] -= total;
    }
    x.accumulate(gi);
  });
}

template <typename T>
Var<T> monomial_features(const Var<T>& s, const Var<T>& exponents, const std::vector<std::vector<double>>& distances,
                         const CyclicRotationGroup& group) {
  const auto& ss = s.shape();
  if (ss.size() != 4) throw DimensionError("monomial_features expects [N,C,H,W], got " + shape_str(ss));
  const std::size_t nm = distances.size();
  const std::size_t mf = nm ? distances.front().size() : 0;
  if (exponents.shape() != Shape{nm, mf})
    throw DimensionError("monomial exponents " + shape_str(exponents.shape()) + " do not match distances");
  const std::size_t n = ss[0], c = ss[1], h = ss[2], w = ss[3], ng = group.order();
  std::vector<MonomialPlan> plans;
  for (const auto& d : distances) {
    plans.push_back(plan_monomial(d, group));
    if (2 * plans.back().margin >= static_cast<int>(std::min(h, w)))
      throw ContractError("monomial distances leave no valid centre in a " + std::to_string(h) + "x" +
                          std::to_string(w) + " map");
  }
  const T* sv = s.value().data();
  const T* bv = exponents.value().data();

  // Visits every (centre, angle) term of monomial j on plane p.
  auto visit = [=](std::size_t j, const T* src, auto&& body) {
    const MonomialPlan& plan = plans[j];
    const int m = plan.margin;
    double sample[64];
    std::vector<double> buf;
    double* vals = mf <= 64 ? sample : (buf.resize(mf), buf.data());
    for (int u = m; u < static_cast<int>(h) - m; ++u)
      for (int v = m; v < static_cast<int>(w) - m; ++v)
        for (std::size_t k = 0; k < ng; ++k) {
          double logsum = 0;
          for (std::size_t i = 0; i < mf; ++i) {
            double val = 0;
            for (const Tap& t : plan.taps[k][i]) val += t.w * static_cast<double>(src[(u + t.dy) * w + (v + t.dx)]);
            if (!(val > 0)) throw DomainError("monomial factor sampled a non-positive value");
            vals[i] = val;
            logsum += static_cast<double>(bv[j * mf + i]) * std::log(val);
          }
          body(u, v, k, std::exp(logsum), vals);
        }
  };
  auto norm = [=](std::size_t j) {
    const std::size_t side_h = h - 2 * plans[j].margin, side_w = w - 2 * plans[j].margin;
    return static_cast<double>(side_h * side_w * ng);
  };

  Tensor<T> out({n, nm * c});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < nm; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0;
        visit(j, sv + (b * c + ch) * h * w, [&](int, int, std::size_t, double term, const double*) { acc += term; });
        out[b * nm * c + j * c + ch] = static_cast<T>(acc / norm(j));
      }

  return make_result<T>(
      std::move(out), {s, exponents}, "monomial_features",
      [s, exponents, plans, visit, norm, n, c, h, w, nm, mf](const Tensor<T>& g) {
        Tensor<T> gs(s.shape()), gb(exponents.shape());
        const T* bv = exponents.value().data();
        std::vector<double> db(nm * mf, 0.0);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t j = 0; j < nm; ++j)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const double scale = static_cast<double>(g[b * nm * c + j * c + ch]) / norm(j);
              if (scale == 0) continue;
              const std::size_t base = (b * c + ch) * h * w;
              T* dst = gs.data() + base;
              visit(j, s.value().data() + base, [&](int u, int v, std::size_t k, double term, const double* vals) {
                const double coeff = scale * term;
                for (std::size_t i = 0; i < mf; ++i) {
                  const double bi = static_cast<double>(bv[j * mf + i]);
                  db[j * mf + i] += coeff * std::log(vals[i]);
                  const double dval = coeff * bi / vals[i];
                  for (const Tap& t : plans[j].taps[k][i])
                    dst[(u + t.dy) * w + (v + t.dx)] += static_cast<T>(dval * t.w);
                }
              });
            }
        for (std::size_t i = 0; i < nm * mf; ++i) gb[i] = static_cast<T>(db[i]);
        s.accumulate(gs);
        exponents.accumulate(gb);
      });
}

template <typename T>
Var<T> ii_monomial(const Var<T>& x, const MonomialHead<T>& head, const CyclicRotationGroup& group) {
  const Var<T> xb = as_batch(x, "ii_monomial");
  return match_batch(monomial_features(positive_shift(xb), head.exponents.var, head.distances, group), x);
}

// Weighted sums ------------------------------------------------------------------------

template <typename T>
WSHead<T> make_ws_head(std::string name, WSMode mode, std::size_t c_out, std::size_t c_in, std::size_t extent,
                       std::uint64_t seed) {
  if (c_out == 0 || c_in == 0 || extent == 0) throw ContractError("weighted-sum head dimensions must be positive");
  std::mt19937_64 rng(seed);
  const double fan_in = static_cast<double>(c_in * extent * extent);
  WSHead<T> head;
  head.mode = mode;
  head.kernel = Parameter<T>(std::move(name), normal_tensor<T>({c_out, c_in, extent, extent}, std::sqrt(2.0 / fan_in), rng),
                             Regularization::l2);
  return head;
}

template <typename T>
Var<T> rotated_kernels(const Var<T>& kernel, const CyclicRotationGroup& group) {
  Shape one{1};
  one.insert(one.end(), kernel.shape().begin(), kernel.shape().end());
  std::vector<Var<T>> parts;
  for (std::size_t k = 0; k < group.order(); ++k) parts.push_back(reshape(act_on_plane(group, k, kernel), one));
  return concat(parts, 0);
}

template <typename T>
Var<T> window_means(const Var<T>& x, std::size_t k) {
  const auto& s = x.shape();
  if (s.size() != 4) throw DimensionError("window_means expects [N,C,H,W], got " + shape_str(s));
  if (k % 2 == 0) throw ContractError("window_means needs an odd window");
  const long h = static_cast<long>(s[2]), w = static_cast<long>(s[3]), p = static_cast<long>(k / 2);
  const std::size_t planes = s[0] * s[1];
  const double inv = 1.0 / static_cast<double>(h * w);
  Tensor<T> out({s[0], s[1], k, k});
  const T* xv = x.value().data();
  for (std::size_t q = 0; q < planes; ++q)
    for (long a = 0; a < static_cast<long>(k); ++a)
      for (long b = 0; b < static_cast<long>(k); ++b) {
        double acc = 0;
        for (long u = std::max(0L, p - a); u < std::min(h, h + p - a); ++u)
          for (long v = std::max(0L, p - b); v < std::min(w, w + p - b); ++v)
            acc += static_cast<double>(xv[(q * h + (u + a - p)) * w + (v + b - p)]);
        out[(q * k + a) * k + b] = static_cast<T>(acc * inv);
      }
  return make_result<T>(std::move(out), {x}, "window_means", [x, planes, h, w, p, k, inv](const Tensor<T>& g) {
    Tensor<T> gi(x.shape());
    for (std::size_t q = 0; q < planes; ++q)
      for (long a = 0; a < static_cast<long>(k); ++a)
        for (long b = 0; b < static_cast<long>(k); ++b) {
          const T gv = static_cast<T>(g[(q * k + a) * k + b] * inv);
          for (long u = std::max(0L, p - a); u < std::min(h, h + p - a); ++u)
            for (long v = std::max(0L, p - b); v < std::min(w, w + p - b); ++v)
              gi[(q * h + (u + a - p)) * w + (v + b - p)] += gv;
        }
    x.accumulate(gi);
  });
}

template <typename T>
Var<T> ii_ws(const Var<T>& x, const WSHead<T>& head, const CyclicRotationGroup& group) {
  const Var<T> xb = as_batch(x, "ii_ws");
  const auto& xs = xb.shape();
  const auto& ks = head.kernel.value().shape();
  if (ks[1] != xs[1]) throw DimensionError("weighted-sum kernel expects " + std::to_string(ks[1]) + " channels, got " +
                                           std::to_string(xs[1]));
  Var<T> features;
  if (head.mode == WSMode::global) {
    if (ks[2] != xs[2] || ks[3] != xs[3])
      throw DimensionError("global weighted-sum kernel " + shape_str(ks) + " must cover the input " + shape_str(xs));
    features = reshape(xb, Shape{xs[0], xs[1] * xs[2] * xs[3]});
  } else {
    features = reshape(window_means(xb, ks[2]), Shape{xs[0], xs[1] * ks[2] * ks[3]});
  }
  const std::size_t n = group.order(), co = ks[0];
  const Var<T> bank = reshape(rotated_kernels(head.kernel.var, group), Shape{n * co, ks[1] * ks[2] * ks[3]});
  const Var<T> y = reshape(matmul(features, transpose(bank)), Shape{xs[0], n, co});
  return match_batch(mean_axis(y, 1), x);
}

double ws_groupconv_equivalence(const Tensor<double>& x, const Tensor<double>& psi, const CyclicRotationGroup& group) {
  if (psi.rank() != 4 || psi.dim(2) != psi.dim(3)) throw DimensionError("psi must be [C_o, C_i, k, k]");
  WSHead<double> head;
  head.mode = WSMode::local;
  head.kernel = Parameter<double>("psi", psi);
  const Var<double> xv(x);
  const Tensor<double> ws = ii_ws(xv, head, group).value();

  const std::size_t n = group.order(), co = psi.dim(0), per = psi.numel() / co;
  const Tensor<double> rotated = rotated_kernels(Var<double>(psi), group).value();  // [n, C_o, ...]
  Tensor<double> bank({co * n, psi.dim(1), psi.dim(2), psi.dim(3)});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t g = 0; g < n; ++g)
      std::copy_n(rotated.data() + (g * co + o) * per, per, bank.data() + (o * n + g) * per);
  const Var<double> xb = as_batch(xv, "ws_groupconv_equivalence");
  const auto lifted = lifting_conv_bank(xb, Var<double>(bank), group).data;  // [N, C_o, n, H, W]
  const auto& ls = lifted.shape();
  const Tensor<double> pooled = mean_axis(reshape(lifted, Shape{ls[0], ls[1], ls[2] * ls[3] * ls[4]}), 2).value();
  return max_abs_diff(ws.reshaped(pooled.shape()), pooled);
}

// MLP --------------------------------------------------------------------------------

template <typename T>
ParamRefs<T> MLPHead<T>::params() {
  ParamRefs<T> out;
  for (auto& w : weights) out.push_back(&w);
  return out;
}

template <typename T>
MLPHead<T> make_mlp_head(std::string name, std::size_t c_in, std::size_t patch, const std::vector<std::size_t>& widths,
                         std::uint64_t seed) {
  if (patch % 2 == 0) throw ContractError("MLP neighbourhood must have odd size");
  if (widths.empty()) throw ContractError("MLP head needs at least one layer");
  std::mt19937_64 rng(seed);
  MLPHead<T> head;
  head.patch = patch;
  std::size_t in = c_in * patch * patch;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    if (widths[l] == 0) throw ContractError("MLP layer width must be positive");
    head.weights.emplace_back(name + ".w" + std::to_string(l + 1),
                              normal_tensor<T>({in, widths[l]}, std::sqrt(2.0 / static_cast<double>(in)), rng),
                              Regularization::l2);
    in = widths[l];
  }
  return head;
}

template <typename T>
Var<T> rotated_patches(const Var<T>& x, std::size_t patch, const CyclicRotationGroup& group) {
  const auto& s = x.shape();
  if (s.size() != 4) throw DimensionError("rotated_patches expects [N,C,H,W], got " + shape_str(s));
  if (patch % 2 == 0) throw ContractError("rotated_patches needs an odd patch");
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3], ng = group.order(), pp = patch * patch;
  const int r = static_cast<int>(patch / 2);
  std::vector<std::vector<Tap>> taps;  // [phi * pp + t]
  for (std::size_t k = 0; k < ng; ++k) {
    const auto [cs, sn] = group.cos_sin(k);
    for (int a = -r; a <= r; ++a)
      for (int b = -r; b <= r; ++b) taps.push_back(offset_taps(cs * a - sn * b, sn * a + cs * b));
  }
  const std::size_t rows = n * h * w * ng, cols = c * pp;
  auto for_each = [=](auto&& body) {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t u = 0; u < h; ++u)
        for (std::size_t v = 0; v < w; ++v)
          for (std::size_t k = 0; k < ng; ++k) {
            const std::size_t row = ((b * h + u) * w + v) * ng + k;
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t t = 0; t < pp; ++t)
                for (const Tap& tap : taps[k * pp + t]) {
                  const long y = static_cast<long>(u) + tap.dy, z = static_cast<long>(v) + tap.dx;
                  if (y < 0 || z < 0 || y >= static_cast<long>(h) || z >= static_cast<long>(w)) continue;
                  body(row * cols + ch * pp + t, ((b * c + ch) * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(z),
                       tap.w);
                }
          }
  };
  Tensor<T> out({rows, cols});
  const T* xv = x.value().data();
  T* ov = out.data();
  for_each([&](std::size_t o, std::size_t i, double wt) { ov[o] += static_cast<T>(wt) * xv[i]; });
  return make_result<T>(std::move(out), {x}, "rotated_patches", [x, for_each](const Tensor<T>& g) {
    Tensor<T> gi(x.shape());
    T* gv = gi.data();
    const T* go = g.data();
    for_each([&](std::size_t o, std::size_t i, double wt) { gv[i] += static_cast<T>(wt) * go[o]; });
    x.accumulate(gi);
  });
}

template <typename T>
Var<T> ii_mlp(const Var<T>& x, const MLPHead<T>& head, const CyclicRotationGroup& group) {
  const Var<T> xb = as_batch(x, "ii_mlp");
  const auto& s = xb.shape();
  if (head.weights.front().value().shape()[0] != s[1] * head.patch * head.patch)
    throw DimensionError("MLP head expects " + std::to_string(head.weights.front().value().shape()[0] / (head.patch * head.patch)) +
                         " input channels, got " + std::to_string(s[1]));
  Var<T> hdn = rotated_patches(xb, head.patch, group);
  for (const auto& wl : head.weights) hdn = relu(matmul(hdn, wl.var));
  const Var<T> per = reshape(hdn, Shape{s[0], s[2] * s[3] * group.order(), head.out_channels()});
  return match_batch(mean_axis(per, 1), x);
}

// Self-attention -----------------------------------------------------------------------

template <typename T>
SAHead<T> make_sa_head(std::string name, std::size_t c_in, std::size_t channels, std::size_t heads, std::size_t c_out,
                       std::size_t height, std::size_t width, std::uint64_t seed) {
  if (heads == 0 || channels == 0 || channels % heads != 0)
    throw ContractError("attention width " + std::to_string(channels) + " is not divisible by " + std::to_string(heads) +
                        " heads");
  if (c_in == 0 || c_out == 0 || height == 0 || width == 0) throw ContractError("attention head dimensions must be positive");
  std::mt19937_64 rng(seed);
  SAHead<T> head;
  head.heads = heads;
  head.head_channels = channels / heads;
  head.height = height;
  head.width = width;
  const double proj = 1.0 / std::sqrt(static_cast<double>(c_in));
  head.wq = Parameter<T>(name + ".wq", normal_tensor<T>({c_in, channels}, proj, rng), Regularization::l2);
  head.wk = Parameter<T>(name + ".wk", normal_tensor<T>({c_in, channels}, proj, rng), Regularization::l2);
  head.wv = Parameter<T>(name + ".wv", normal_tensor<T>({c_in, channels}, proj, rng), Regularization::l2);
  head.pos = Parameter<T>(name + ".pos", normal_tensor<T>({(2 * height - 1) * (2 * width - 1), channels}, 0.1, rng),
                          Regularization::l2);
  head.wo = Parameter<T>(name + ".wo", normal_tensor<T>({channels, c_out}, 1.0 / std::sqrt(double(channels)), rng),
                         Regularization::l2);
  return head;
}

template <typename T>
Var<T> relative_logits(const Var<T>& q, const Var<T>& pk, std::size_t h, std::size_t w) {
  const std::size_t tokens = h * w, ch = q.shape().size() == 2 ? q.shape()[1] : 0;
  if (q.shape() != Shape{tokens, ch} || pk.shape() != Shape{(2 * h - 1) * (2 * w - 1), ch})
    throw DimensionError("relative_logits: q " + shape_str(q.shape()) + " / table " + shape_str(pk.shape()) +
                         " do not fit a " + std::to_string(h) + "x" + std::to_string(w) + " grid");
  auto offset = [h, w](std::size_t i, std::size_t j) {
    const long dy = static_cast<long>(j / w) - static_cast<long>(i / w);
    const long dx = static_cast<long>(j % w) - static_cast<long>(i % w);
    return static_cast<std::size_t>((dy + static_cast<long>(h) - 1) * static_cast<long>(2 * w - 1) + dx +
                                    static_cast<long>(w) - 1);
  };
  Tensor<T> out({tokens, tokens});
  const T* qv = q.value().data();
  const T* pv = pk.value().data();
  for (std::size_t i = 0; i < tokens; ++i)
    for (std::size_t j = 0; j < tokens; ++j) {
      const T* row = pv + offset(i, j) * ch;
      T acc = 0;
      for (std::size_t c = 0; c < ch; ++c) acc += qv[i * ch + c] * row[c];
      out[i * tokens + j] = acc;
    }
  return make_result<T>(std::move(out), {q, pk}, "relative_logits", [q, pk, offset, tokens, ch](const Tensor<T>& g) {
    Tensor<T> gq(q.shape()), gp(pk.shape());
    const T* qv = q.value().data();
    const T* pv = pk.value().data();
    for (std::size_t i = 0; i < tokens; ++i)
      for (std::size_t j = 0; j < tokens; ++j) {
        const T gij = g[i * tokens + j];
        const std::size_t o = offset(i, j) * ch;
        for (std::size_t c = 0; c < ch; ++c) {
          gq[i * ch + c] += gij * pv[o + c];
          gp[o + c] += gij * qv[i * ch + c];
        }
      }
    q.accumulate(gq);
    pk.accumulate(gp);
  });
}

template <typename T>
Var<T> ii_sa(const Var<T>& x, const SAHead<T>& head, const CyclicRotationGroup& group) {
  const Var<T> xb = as_batch(x, "ii_sa");
  const auto& s = xb.shape();
  if (s[2] != head.height || s[3] != head.width)
    throw DimensionError("attention head built for " + std::to_string(head.height) + "x" + std::to_string(head.width) +
                         " maps, got " + shape_str(s));
  if (s[1] != head.wq.value().shape()[0])
    throw DimensionError("attention head expects " + std::to_string(head.wq.value().shape()[0]) + " channels, got " +
                         std::to_string(s[1]));
  const std::size_t n = s[0], c = s[1], tokens = s[2] * s[3], ch = head.head_channels, ng = group.order();
  const Var<T>& pk = head.pos.var;
  std::vector<Var<T>> rotated;
  for (std::size_t k = 0; k < ng; ++k) rotated.push_back(act_on_plane(group, k, xb));

  std::vector<Var<T>> samples;
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<Var<T>> per_group;
    for (std::size_t k = 0; k < ng; ++k) {
      const Var<T> tok = transpose(reshape(slice(rotated[k], 0, b, b + 1), Shape{c, tokens}));
      const Var<T> q = matmul(tok, head.wq.var), key = matmul(tok, head.wk.var), val = matmul(tok, head.wv.var);
      std::vector<Var<T>> outs;
      for (std::size_t hd = 0; hd < head.heads; ++hd) {
        const std::size_t lo = hd * ch, hi = lo + ch;
        const Var<T> qh = slice(q, 1, lo, hi);
        const Var<T> logits =
            add(matmul(qh, transpose(slice(key, 1, lo, hi))), relative_logits(qh, slice(pk, 1, lo, hi), s[2], s[3]));
        outs.push_back(matmul(softmax(logits, 1), slice(val, 1, lo, hi)));
      }
      const Var<T> joined = head.heads == 1 ? outs.front() : concat(outs, 1);
      per_group.push_back(reshape(joined, Shape{1, tokens, head.heads * ch}));
    }
    const Var<T> avg = group_average(group, concat(per_group, 0));
    samples.push_back(reshape(matmul(avg, head.wo.var), Shape{1, tokens, head.out_channels()}));
  }
  return match_batch(concat(samples, 0), x);
}

// Tagged head --------------------------------------------------------------------------------

template <typename T>
Var<T> apply_head(const IIHead<T>& head, const Var<T>& x, const CyclicRotationGroup& group) {
  return std::visit(
      [&](const auto& h) -> Var<T> {
        using H = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<H, MonomialHead<T>>) return ii_monomial(x, h, group);
        else if constexpr (std::is_same_v<H, WSHead<T>>) return ii_ws(x, h, group);
        else if constexpr (std::is_same_v<H, MLPHead<T>>) return ii_mlp(x, h, group);
        else {
          const Var<T> tokens = ii_sa(x, h, group);
          return mean_axis(tokens, tokens.value().rank() - 2);
        }
      },
      head);
}

template <typename T>
ParamRefs<T> head_params(IIHead<T>& head) {
  return std::visit([](auto& h) { return h.params(); }, head);
}

template <typename T>
std::size_t head_output_size(const IIHead<T>& head, std::size_t channels) {
  return std::visit(
      [channels](const auto& h) -> std::size_t {
        using H = std::decay_t<decltype(h)>;
        if constexpr (std::is_same_v<H, MonomialHead<T>>) return h.count() * channels;
        else return h.out_channels();
      },
      head);
}

template <typename T>
double invariance_residual(const IIHead<T>& head, const Tensor<T>& x, const CyclicRotationGroup& group,
                           std::size_t probe) {
  const Var<T> xv(x);
  const Tensor<T> base = apply_head(head, xv, group).value();
  const Tensor<T> moved = apply_head(head, act_on_plane(group, probe, xv), group).value();
  double diff = 0, scale = 0;
  for (std::size_t i = 0; i < base.numel(); ++i) {
    const double b = static_cast<double>(base[i]);
    diff = std::max(diff, std::abs(static_cast<double>(moved[i]) - b));
    scale = std::max(scale, std::abs(b));
  }
  return diff / (scale + 1e-12);
}

#define RINV_INSTANTIATE_INVARIANT(T)                                                                                  \
  template struct MonomialHead<T>;                                                                                     \
  template struct MLPHead<T>;                                                                                          \
  template MonomialHead<T> make_monomial_head<T>(std::string, const std::vector<MonomialSpec>&);                       \
  template Var<T> positive_shift<T>(const Var<T>&);                                                                    \
  template Var<T> monomial_features<T>(const Var<T>&, const Var<T>&, const std::vector<std::vector<double>>&,          \
                                       const CyclicRotationGroup&);                                                    \
  template Var<T> ii_monomial<T>(const Var<T>&, const MonomialHead<T>&, const CyclicRotationGroup&);                   \
  template WSHead<T> make_ws_head<T>(std::string, WSMode, std::size_t, std::size_t, std::size_t, std::uint64_t);       \
  template Var<T> rotated_kernels<T>(const Var<T>&, const CyclicRotationGroup&);                                       \
  template Var<T> window_means<T>(const Var<T>&, std::size_t);                                                         \
  template Var<T> ii_ws<T>(const Var<T>&, const WSHead<T>&, const CyclicRotationGroup&);                               \
  template MLPHead<T> make_mlp_head<T>(std::string, std::size_t, std::size_t, const std::vector<std::size_t>&,         \
                                       std::uint64_t);                                                                 \
  template Var<T> rotated_patches<T>(const Var<T>&, std::size_t, const CyclicRotationGroup&);                          \
  template Var<T> ii_mlp<T>(const Var<T>&, const MLPHead<T>&, const CyclicRotationGroup&);                             \
  template SAHead<T> make_sa_head<T>(std::string, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t,     \
                                     std::size_t, std::uint64_t);                                                      \
  template Var<T> relative_logits<T>(const Var<T>&, const Var<T>&, std::size_t, std::size_t);                          \
  template Var<T> ii_sa<T>(const Var<T>&, const SAHead<T>&, const CyclicRotationGroup&);                               \
  template Var<T> apply_head<T>(const IIHead<T>&, const Var<T>&, const CyclicRotationGroup&);                          \
  template ParamRefs<T> head_params<T>(IIHead<T>&);                                                                    \
  template std::size_t head_output_size<T>(const IIHead<T>&, std::size_t);                                             \
  template double invariance_residual<T>(const IIHead<T>&, const Tensor<T>&, const CyclicRotationGroup&, std::size_t);

RINV_INSTANTIATE_INVARIANT(float)
RINV_INSTANTIATE_INVARIANT(double)

}  // namespace rinv
