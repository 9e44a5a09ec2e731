#include "rinv/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace rinv {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  return out;
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
Tensor<T> map_values(const Tensor<T>& a, auto fn) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = fn(a[i]);
  return out;
}

}  // namespace

// Graph traversal ------------------------------------------------------------------

template <typename T>
void backward(const Var<T>& root) {
  if (root.value().numel() != 1)
    throw ContractError("backward requires a scalar root, got shape " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited{root.node()};
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node(), 0}};
  while (!stack.empty()) {
    const std::size_t top = stack.size() - 1;
    Node<T>* n = stack[top].first;
    if (stack[top].second < n->parents.size()) {
      Node<T>* p = n->parents[stack[top].second++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order)
    if (!n->is_leaf()) n->has_grad = false;
  root.node()->accumulate(Tensor<T>::ones(root.shape()));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->has_grad) n->backward_fn(n->grad);
  }
}

// Elementwise ----------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape(), (a.value().vec() + b.value().vec()).eval());
  return make_result<T>(std::move(out), {a, b}, "add", [a, b](const Tensor<T>& g) {
    a.accumulate(g);
    b.accumulate(g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape(), (a.value().vec() - b.value().vec()).eval());
  return make_result<T>(std::move(out), {a, b}, "sub", [a, b](const Tensor<T>& g) {
    a.accumulate(g);
    if (b.requires_grad()) b.accumulate(Tensor<T>(g.shape(), (-g.vec()).eval()));
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape(), a.value().vec().cwiseProduct(b.value().vec()));
  return make_result<T>(std::move(out), {a, b}, "mul", [a, b](const Tensor<T>& g) {
    if (a.requires_grad()) a.accumulate(Tensor<T>(g.shape(), g.vec().cwiseProduct(b.value().vec())));
    if (b.requires_grad()) b.accumulate(Tensor<T>(g.shape(), g.vec().cwiseProduct(a.value().vec())));
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape(), (a.value().vec() * s).eval());
  return make_result<T>(std::move(out), {a}, "scale",
                        [a, s](const Tensor<T>& g) { a.accumulate(Tensor<T>(g.shape(), (g.vec() * s).eval())); });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.shape(), (a.value().vec().array() + s).matrix().eval());
  return make_result<T>(std::move(out), {a}, "add_scalar", [a](const Tensor<T>& g) { a.accumulate(g); });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = map_values(a.value(), [](T v) { return v > T(0) ? v : T(0); });
  return make_result<T>(std::move(out), {a}, "relu", [a](const Tensor<T>& g) {
    Tensor<T> gi(g.shape());
    const auto& x = a.value();
    for (std::size_t i = 0; i < g.numel(); ++i) gi[i] = x[i] > T(0) ? g[i] : T(0);
    a.accumulate(gi);
  });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  Tensor<T> out(a.shape(), a.value().vec().cwiseAbs2());
  return make_result<T>(std::move(out), {a}, "square", [a](const Tensor<T>& g) {
    a.accumulate(Tensor<T>(g.shape(), (T(2) * g.vec().cwiseProduct(a.value().vec())).eval()));
  });
}

template <typename T>
Var<T> abs(const Var<T>& a) {
  Tensor<T> out(a.shape(), a.value().vec().cwiseAbs());
  return make_result<T>(std::move(out), {a}, "abs", [a](const Tensor<T>& g) {
    Tensor<T> gi(g.shape());
    const auto& x = a.value();
    for (std::size_t i = 0; i < g.numel(); ++i) gi[i] = x[i] > T(0) ? g[i] : (x[i] < T(0) ? -g[i] : T(0));
    a.accumulate(gi);
  });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  Tensor<T> out(a.shape(), a.value().vec().array().exp().matrix().eval());
  Tensor<T> y = out;
  return make_result<T>(std::move(out), {a}, "exp", [a, y](const Tensor<T>& g) {
    a.accumulate(Tensor<T>(g.shape(), g.vec().cwiseProduct(y.vec())));
  });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  if ((a.value().vec().array() <= T(0)).any()) throw DomainError("log of non-positive value");
  Tensor<T> out(a.shape(), a.value().vec().array().log().matrix().eval());
  return make_result<T>(std::move(out), {a}, "log", [a](const Tensor<T>& g) {
    a.accumulate(Tensor<T>(g.shape(), g.vec().cwiseQuotient(a.value().vec())));
  });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (bias.value().numel() != s.len)
    throw DimensionError("add_bias: bias length " + std::to_string(bias.value().numel()) + " != axis size " +
                         std::to_string(s.len));
  Tensor<T> out = x.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < s.len; ++c) {
      T* p = out.data() + (o * s.len + c) * s.inner;
      const T b = bias.value()[c];
      for (std::size_t i = 0; i < s.inner; ++i) p[i] += b;
    }
  return make_result<T>(std::move(out), {x, bias}, "add_bias", [x, bias, s](const Tensor<T>& g) {
    x.accumulate(g);
    if (!bias.requires_grad()) return;
    Tensor<T> gb(bias.shape());
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t c = 0; c < s.len; ++c) {
        const T* p = g.data() + (o * s.len + c) * s.inner;
        T acc = 0;
        for (std::size_t i = 0; i < s.inner; ++i) acc += p[i];
        gb[c] += acc;
      }
    bias.accumulate(gb);
  });
}

template <typename T>
Var<T> mul_along(const Var<T>& x, const Var<T>& factor, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (factor.value().numel() != s.len) throw DimensionError("mul_along: factor length mismatch");
  Tensor<T> out = x.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < s.len; ++c) {
      T* p = out.data() + (o * s.len + c) * s.inner;
      const T f = factor.value()[c];
      for (std::size_t i = 0; i < s.inner; ++i) p[i] *= f;
    }
  return make_result<T>(std::move(out), {x, factor}, "mul_along", [x, factor, s](const Tensor<T>& g) {
    if (x.requires_grad()) {
      Tensor<T> gx = g;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t c = 0; c < s.len; ++c) {
          T* p = gx.data() + (o * s.len + c) * s.inner;
          for (std::size_t i = 0; i < s.inner; ++i) p[i] *= factor.value()[c];
        }
      x.accumulate(gx);
    }
    if (factor.requires_grad()) {
      Tensor<T> gf(factor.shape());
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t c = 0; c < s.len; ++c) {
          const std::size_t base = (o * s.len + c) * s.inner;
          T acc = 0;
          for (std::size_t i = 0; i < s.inner; ++i) acc += g[base + i] * x.value()[base + i];
          gf[c] += acc;
        }
      factor.accumulate(gf);
    }
  });
}

// Shape ----------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {a}, "reshape",
                        [a](const Tensor<T>& g) { a.accumulate(g.reshaped(a.shape())); });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  if (a.value().rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor<T> out({c, r});
  MatMap<T>(out.data(), c, r) = ConstMatMap<T>(a.value().data(), r, c).transpose();
  return make_result<T>(std::move(out), {a}, "transpose", [a, r, c](const Tensor<T>& g) {
    Tensor<T> gi({r, c});
    MatMap<T>(gi.data(), r, c) = ConstMatMap<T>(g.data(), c, r).transpose();
    a.accumulate(gi);
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  Shape shape = parts[0].shape();
  const AxisSplit first = split_axis(shape, axis);
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != shape.size()) throw DimensionError("concat rank mismatch");
    for (std::size_t i = 0; i < ps.size(); ++i)
      if (i != axis && ps[i] != shape[i]) throw DimensionError("concat shape mismatch " + shape_str(ps) + " vs " + shape_str(shape));
    lens.push_back(ps[axis]);
    total += ps[axis];
  }
  shape[axis] = total;
  Tensor<T> out(shape);
  const std::size_t outer = first.outer, inner = first.inner;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(parts[k].value().data() + o * lens[k] * inner, lens[k] * inner,
                  out.data() + (o * total + offset) * inner);
    offset += lens[k];
  }
  return make_result<T>(std::move(out), parts, "concat", [parts, lens, outer, inner, total](const Tensor<T>& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (parts[k].requires_grad()) {
        Tensor<T> gp(parts[k].shape());
        for (std::size_t o = 0; o < outer; ++o)
          std::copy_n(g.data() + (o * total + off) * inner, lens[k] * inner, gp.data() + o * lens[k] * inner);
        parts[k].accumulate(gp);
      }
      off += lens[k];
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit s = split_axis(a.shape(), axis);
  if (begin >= end || end > s.len) throw DimensionError("slice bounds out of range");
  Shape shape = a.shape();
  shape[axis] = end - begin;
  const std::size_t n = end - begin;
  Tensor<T> out(shape);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(a.value().data() + (o * s.len + begin) * s.inner, n * s.inner, out.data() + o * n * s.inner);
  return make_result<T>(std::move(out), {a}, "slice", [a, s, begin, n](const Tensor<T>& g) {
    Tensor<T> gi(a.shape());
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(g.data() + o * n * s.inner, n * s.inner, gi.data() + (o * s.len + begin) * s.inner);
    a.accumulate(gi);
  });
}

template <typename T>
Var<T> roll(const Var<T>& a, std::size_t axis, std::size_t shift) {
  const AxisSplit s = split_axis(a.shape(), axis);
  shift %= s.len;
  if (shift == 0) return a;
  Tensor<T> out(a.shape());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < s.len; ++c)
      std::copy_n(a.value().data() + (o * s.len + c) * s.inner, s.inner,
                  out.data() + (o * s.len + (c + shift) % s.len) * s.inner);
  return make_result<T>(std::move(out), {a}, "roll", [a, s, shift](const Tensor<T>& g) {
    Tensor<T> gi(a.shape());
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t c = 0; c < s.len; ++c)
        std::copy_n(g.data() + (o * s.len + (c + shift) % s.len) * s.inner, s.inner,
                    gi.data() + (o * s.len + c) * s.inner);
    a.accumulate(gi);
  });
}

// Reductions -------------------------------------------------------------------------

template <typename T>
T tree_sum(const T* x, std::size_t n, std::size_t stride) {
  if (n == 0) return T(0);
  if (n == 1) return x[0];
  // evens then odds: a cyclic shift of the input swaps or rotates the halves
  return tree_sum(x, (n + 1) / 2, 2 * stride) + tree_sum(x + stride, n / 2, 2 * stride);
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Tensor<T> out = Tensor<T>::scalar(a.value().vec().sum());
  return make_result<T>(std::move(out), {a}, "sum",
                        [a](const Tensor<T>& g) { a.accumulate(Tensor<T>::full(a.shape(), g[0])); });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const T n = static_cast<T>(a.value().numel());
  Tensor<T> out = Tensor<T>::scalar(a.value().vec().sum() / n);
  return make_result<T>(std::move(out), {a}, "mean",
                        [a, n](const Tensor<T>& g) { a.accumulate(Tensor<T>::full(a.shape(), g[0] / n)); });
}

template <typename T>
Var<T> sum_axis(const Var<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis);
  Shape shape = drop_axis(a.shape(), axis);
  Tensor<T> out(shape);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i)
      out[o * s.inner + i] = tree_sum(a.value().data() + o * s.len * s.inner + i, s.len, s.inner);
  return make_result<T>(std::move(out), {a}, "sum_axis", [a, s](const Tensor<T>& g) {
    Tensor<T> gi(a.shape());
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t c = 0; c < s.len; ++c)
        for (std::size_t i = 0; i < s.inner; ++i) gi[(o * s.len + c) * s.inner + i] = g[o * s.inner + i];
    a.accumulate(gi);
  });
}

template <typename T>
Var<T> mean_axis(const Var<T>& a, std::size_t axis) {
  const T n = static_cast<T>(split_axis(a.shape(), axis).len);
  return scale(sum_axis(a, axis), T(1) / n);
}

template <typename T>
Var<T> max_axis(const Var<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis);
  Tensor<T> out(drop_axis(a.shape(), axis));
  std::vector<std::size_t> arg(out.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      std::size_t best = base;
      for (std::size_t c = 1; c < s.len; ++c)
        if (a.value()[base + c * s.inner] > a.value()[best]) best = base + c * s.inner;
      out[o * s.inner + i] = a.value()[best];
      arg[o * s.inner + i] = best;
    }
  return make_result<T>(std::move(out), {a}, "max_axis", [a, arg](const Tensor<T>& g) {
    Tensor<T> gi(a.shape());
    for (std::size_t k = 0; k < arg.size(); ++k) gi[arg[k]] += g[k];
    a.accumulate(gi);
  });
}

// Linear algebra --------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0])
    throw DimensionError("matmul shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<T> out({m, n});
  MatMap<T>(out.data(), m, n).noalias() = ConstMatMap<T>(a.value().data(), m, k) * ConstMatMap<T>(b.value().data(), k, n);
  return make_result<T>(std::move(out), {a, b}, "matmul", [a, b, m, k, n](const Tensor<T>& g) {
    ConstMatMap<T> G(g.data(), m, n);
    if (a.requires_grad()) {
      Tensor<T> ga({m, k});
      MatMap<T>(ga.data(), m, k).noalias() = G * ConstMatMap<T>(b.value().data(), k, n).transpose();
      a.accumulate(ga);
    }
    if (b.requires_grad()) {
      Tensor<T> gb({k, n});
      MatMap<T>(gb.data(), k, n).noalias() = ConstMatMap<T>(a.value().data(), m, k).transpose() * G;
      b.accumulate(gb);
    }
  });
}

template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& w) {
  return matmul(x, w);
}

template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  return add_bias(matmul(x, w), b, 1);
}

// Probabilistic ----------------------------------------------------------------------

template <typename T>
Var<T> softmax(const Var<T>& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis);
  Tensor<T> out(a.shape());
  const T* x = a.value().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = x[base];
      for (std::size_t c = 1; c < s.len; ++c) mx = std::max(mx, x[base + c * s.inner]);
      T z = 0;
      for (std::size_t c = 0; c < s.len; ++c) {
        const T e = std::exp(x[base + c * s.inner] - mx);
        out[base + c * s.inner] = e;
        z += e;
      }
      for (std::size_t c = 0; c < s.len; ++c) out[base + c * s.inner] /= z;
    }
  Tensor<T> y = out;
  return make_result<T>(std::move(out), {a}, "softmax", [a, y, s](const Tensor<T>& g) {
    Tensor<T> gi(a.shape());
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T dot = 0;
        for (std::size_t c = 0; c < s.len; ++c) dot += g[base + c * s.inner] * y[base + c * s.inner];
        for (std::size_t c = 0; c < s.len; ++c) {
          const std::size_t k = base + c * s.inner;
          gi[k] = y[k] * (g[k] - dot);
        }
      }
    a.accumulate(gi);
  });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  if (logits.value().rank() != 2 || logits.shape()[0] != labels.size())
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  Tensor<T> prob({n, k});
  T loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const T* z = logits.value().data() + r * k;
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) throw ContractError("label out of range");
    const T mx = *std::max_element(z, z + k);
    T sum_e = 0;
    for (std::size_t c = 0; c < k; ++c) sum_e += std::exp(z[c] - mx);
    const T lse = mx + std::log(sum_e);
    for (std::size_t c = 0; c < k; ++c) prob[r * k + c] = std::exp(z[c] - lse);
    loss += lse - z[labels[r]];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result<T>(Tensor<T>::scalar(loss / static_cast<T>(n)), {logits}, "cross_entropy",
                        [logits, prob, lab, n, k](const Tensor<T>& g) {
                          Tensor<T> gi = prob;
                          for (std::size_t r = 0; r < n; ++r) gi[r * k + static_cast<std::size_t>(lab[r])] -= T(1);
                          gi.vec() *= g[0] / static_cast<T>(n);
                          logits.accumulate(gi);
                        });
}

template <typename T>
Var<T> dropout(const Var<T>& a, T rate, bool train, std::mt19937_64& rng) {
  if (!(rate >= T(0) && rate < T(1))) throw ContractError("dropout rate must lie in [0, 1)");
  if (!train || rate == T(0)) return a;
  const T keep = T(1) - rate;
  std::bernoulli_distribution draw(static_cast<double>(keep));
  Tensor<T> mask(a.shape());
  for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = draw(rng) ? T(1) / keep : T(0);
  Tensor<T> out(a.shape(), a.value().vec().cwiseProduct(mask.vec()));
  return make_result<T>(std::move(out), {a}, "dropout", [a, mask](const Tensor<T>& g) {
    a.accumulate(Tensor<T>(g.shape(), g.vec().cwiseProduct(mask.vec())));
  });
}

// Convolution -------------------------------------------------------------------------

namespace {

/// Kernel taps grouped into quarter-turn orbits; orbit entries are flat tap
/// indices, -1 marking unused slots.
std::vector<std::array<int, 4>> tap_orbits(std::size_t kh, std::size_t kw) {
  std::vector<std::array<int, 4>> orbits;
  const bool symmetric = kh == kw && kh % 2 == 1;
  if (!symmetric) {
    for (std::size_t t = 0; t < kh * kw; ++t) orbits.push_back({static_cast<int>(t), -1, -1, -1});
    return orbits;
  }
  const int c = static_cast<int>(kh / 2);
  const int k = static_cast<int>(kh);
  std::vector<bool> seen(kh * kw, false);
  for (int a = -c; a <= c; ++a)
    for (int b = -c; b <= c; ++b) {
      const int t0 = (a + c) * k + (b + c);
      if (seen[static_cast<std::size_t>(t0)]) continue;
      if (a == 0 && b == 0) {
        orbits.push_back({t0, -1, -1, -1});
        seen[static_cast<std::size_t>(t0)] = true;
        continue;
      }
      std::array<int, 4> orbit{};
      int y = a, x = b;
      for (int j = 0; j < 4; ++j) {
        orbit[static_cast<std::size_t>(j)] = (y + c) * k + (x + c);
        seen[static_cast<std::size_t>(orbit[static_cast<std::size_t>(j)])] = true;
        const int ny = x, nx = -y;  // quarter turn
        y = ny;
        x = nx;
      }
      orbits.push_back(orbit);
    }
  return orbits;
}

template <typename T>
void pad_planes(const T* src, std::size_t planes, std::size_t h, std::size_t w, std::size_t pad, std::vector<T>& dst) {
  const std::size_t hp = h + 2 * pad, wp = w + 2 * pad;
  dst.assign(planes * hp * wp, T(0));
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(src + (p * h + y) * w, w, dst.data() + p * hp * wp + (y + pad) * wp + pad);
}

/// Folds rows[0..n) of length len into rows[0] with the shift-invariant tree.
template <typename T>
void tree_reduce_rows(T* rows, std::size_t n, std::size_t len) {
  if (n <= 1) return;
  if ((n & (n - 1)) == 0) {
    for (std::size_t half = n / 2; half >= 1; half /= 2)
      for (std::size_t i = 0; i < half; ++i) {
        T* dst = rows + i * len;
        const T* src = rows + (i + half) * len;
        for (std::size_t p = 0; p < len; ++p) dst[p] += src[p];
      }
    return;
  }
  // general length: evens + odds, recursively
  const std::size_t ne = (n + 1) / 2, no = n / 2;
  std::vector<T> evens(ne * len), odds(no * len);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(rows + i * len, len, (i % 2 ? odds.data() + (i / 2) * len : evens.data() + (i / 2) * len));
  tree_reduce_rows(evens.data(), ne, len);
  tree_reduce_rows(odds.data(), no, len);
  for (std::size_t p = 0; p < len; ++p) rows[p] = evens[p] + odds[p];
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const ConvOptions& opt) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
    throw DimensionError("conv2d: input " + shape_str(xs) + " incompatible with kernel " + shape_str(ws));
  if (opt.stride == 0 || opt.channel_block == 0 || xs[1] % opt.channel_block != 0)
    throw ContractError("conv2d: invalid stride or channel block");
  const std::size_t n = xs[0], ci = xs[1], h = xs[2], wd = xs[3];
  const std::size_t co = ws[0], kh = ws[2], kw = ws[3];
  const std::size_t s = opt.stride, pad = opt.pad, cb = opt.channel_block;
  const std::size_t hp = h + 2 * pad, wp = wd + 2 * pad;
  if (hp < kh || wp < kw) throw DimensionError("conv2d: kernel larger than padded input");
  const std::size_t ho = (hp - kh) / s + 1, wo = (wp - kw) / s + 1;
  const std::size_t plane = ho * wo;

  const auto orbits = tap_orbits(kh, kw);
  const std::size_t kk = kh * kw;
  Tensor<T> out({n, co, ho, wo});
  // taps become rows of output-channel vectors: wt[(c * kk + t) * co + o]
  std::vector<T> wt(ci * kk * co);
  const T* wv = w.value().data();
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t c = 0; c < ci; ++c)
      for (std::size_t t = 0; t < kk; ++t) wt[(c * kk + t) * co + o] = wv[(o * ci + c) * kk + t];
  std::vector<std::size_t> tap_off(kk);
  for (std::size_t t = 0; t < kk; ++t) tap_off[t] = (t / kw) * wp + t % kw;

  std::vector<T> xp, part(cb * co), acc(co);
  for (std::size_t b = 0; b < n; ++b) {
    pad_planes(x.value().data() + b * ci * h * wd, ci, h, wd, pad, xp);
    T* ob = out.data() + b * co * plane;
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) {
        std::fill(acc.begin(), acc.end(), T(0));
        for (std::size_t blk = 0; blk < ci / cb; ++blk) {
          for (std::size_t j = 0; j < cb; ++j) {
            const std::size_t c = blk * cb + j;
            const T* src = xp.data() + c * hp * wp + y * s * wp + xx * s;
            const T* wc = wt.data() + c * kk * co;
            T* __restrict d = part.data() + j * co;
            std::fill(d, d + co, T(0));
            for (const auto& orb : orbits) {
              const auto t0 = static_cast<std::size_t>(orb[0]);
              const T* __restrict w0 = wc + t0 * co;
              const T v0 = src[tap_off[t0]];
              if (orb[1] < 0) {
                for (std::size_t o = 0; o < co; ++o) d[o] += w0[o] * v0;
                continue;
              }
              const auto t1 = static_cast<std::size_t>(orb[1]), t2 = static_cast<std::size_t>(orb[2]),
                         t3 = static_cast<std::size_t>(orb[3]);
              const T* __restrict w1 = wc + t1 * co;
              const T* __restrict w2 = wc + t2 * co;
              const T* __restrict w3 = wc + t3 * co;
              const T v1 = src[tap_off[t1]], v2 = src[tap_off[t2]], v3 = src[tap_off[t3]];
              for (std::size_t o = 0; o < co; ++o) d[o] += (w0[o] * v0 + w2[o] * v2) + (w1[o] * v1 + w3[o] * v3);
            }
          }
          tree_reduce_rows(part.data(), cb, co);
          for (std::size_t o = 0; o < co; ++o) acc[o] += part[o];
        }
        for (std::size_t o = 0; o < co; ++o) ob[o * plane + y * wo + xx] = acc[o];
      }
  }

  return make_result<T>(std::move(out), {x, w}, "conv2d",
                        [x, w, n, ci, h, wd, co, kh, kw, s, pad, hp, wp, ho, wo, plane](const Tensor<T>& g) {
                          const std::size_t kk = ci * kh * kw;
                          RowMat<T> cols(kk, plane);
                          RowMat<T> gcols;
                          std::vector<T> xpad;
                          Tensor<T> gw;
                          Tensor<T> gx;
                          if (w.requires_grad()) gw = Tensor<T>::zeros(w.shape());
                          if (x.requires_grad()) gx = Tensor<T>::zeros(x.shape());
                          ConstMatMap<T> W(w.value().data(), co, kk);
                          std::vector<T> gpad(ci * hp * wp);
                          for (std::size_t b = 0; b < n; ++b) {
                            ConstMatMap<T> G(g.data() + b * co * plane, co, plane);
                            if (w.requires_grad()) {
                              pad_planes(x.value().data() + b * ci * h * wd, ci, h, wd, pad, xpad);
                              for (std::size_t c = 0; c < ci; ++c)
                                for (std::size_t ky = 0; ky < kh; ++ky)
                                  for (std::size_t kx = 0; kx < kw; ++kx) {
                                    T* row = cols.data() + ((c * kh + ky) * kw + kx) * plane;
                                    const T* src = xpad.data() + c * hp * wp + ky * wp + kx;
                                    for (std::size_t y = 0; y < ho; ++y)
                                      for (std::size_t xx = 0; xx < wo; ++xx) row[y * wo + xx] = src[y * s * wp + xx * s];
                                  }
                              MatMap<T>(gw.data(), co, kk).noalias() += G * cols.transpose();
                            }
                            if (x.requires_grad()) {
                              gcols.noalias() = W.transpose() * G;
                              std::fill(gpad.begin(), gpad.end(), T(0));
                              for (std::size_t c = 0; c < ci; ++c)
                                for (std::size_t ky = 0; ky < kh; ++ky)
                                  for (std::size_t kx = 0; kx < kw; ++kx) {
                                    const T* row = gcols.data() + ((c * kh + ky) * kw + kx) * plane;
                                    T* dst = gpad.data() + c * hp * wp + ky * wp + kx;
                                    for (std::size_t y = 0; y < ho; ++y)
                                      for (std::size_t xx = 0; xx < wo; ++xx) dst[y * s * wp + xx * s] += row[y * wo + xx];
                                  }
                              T* gxb = gx.data() + b * ci * h * wd;
                              for (std::size_t c = 0; c < ci; ++c)
                                for (std::size_t y = 0; y < h; ++y)
                                  for (std::size_t xx = 0; xx < wd; ++xx)
                                    gxb[(c * h + y) * wd + xx] += gpad[c * hp * wp + (y + pad) * wp + xx + pad];
                            }
                          }
                          if (w.requires_grad()) w.accumulate(gw);
                          if (x.requires_grad()) x.accumulate(gx);
                        });
}

template <typename T>
Var<T> same_conv2d(const Var<T>& x, const Var<T>& w) {
  if (w.value().rank() != 4 || w.shape()[2] % 2 == 0) throw ContractError("same_conv2d requires an odd kernel");
  return conv2d(x, w, ConvOptions{1, w.shape()[2] / 2, 1});
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x, std::size_t size) {
  const auto& xs = x.shape();
  if (xs.size() < 2 || size == 0) throw DimensionError("max_pool2d expects rank >= 2");
  const std::size_t h = xs[xs.size() - 2], w = xs[xs.size() - 1];
  const std::size_t ho = h / size, wo = w / size;
  if (ho == 0 || wo == 0) throw DimensionError("max_pool2d window larger than plane");
  const std::size_t planes = x.value().numel() / (h * w);
  Shape shape = xs;
  shape[shape.size() - 2] = ho;
  shape[shape.size() - 1] = wo;
  Tensor<T> out(shape);
  std::vector<std::size_t> arg(out.numel());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) {
        std::size_t best = p * h * w + y * size * w + xx * size;
        for (std::size_t dy = 0; dy < size; ++dy)
          for (std::size_t dx = 0; dx < size; ++dx) {
            const std::size_t k = p * h * w + (y * size + dy) * w + xx * size + dx;
            if (x.value()[k] > x.value()[best]) best = k;
          }
        const std::size_t o = (p * ho + y) * wo + xx;
        out[o] = x.value()[best];
        arg[o] = best;
      }
  return make_result<T>(std::move(out), {x}, "max_pool2d", [x, arg](const Tensor<T>& g) {
    Tensor<T> gi(x.shape());
    for (std::size_t k = 0; k < arg.size(); ++k) gi[arg[k]] += g[k];
    x.accumulate(gi);
  });
}

// Sampling -------------------------------------------------------------------------------

namespace {

template <typename T>
BilinearTap bilinear_tap(double y, double x, std::size_t h, std::size_t w) {
  BilinearTap tap{{-1, -1, -1, -1}, {0, 0, 0, 0}};
  const double y0 = std::floor(y), x0 = std::floor(x);
  const double fy = y - y0, fx = x - x0;
  const double wts[4] = {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx};
  const double ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const double xs[4] = {x0, x0 + 1, x0, x0 + 1};
  for (int j = 0; j < 4; ++j) {
    tap.weight[j] = wts[j];
    if (ys[j] >= 0 && ys[j] < static_cast<double>(h) && xs[j] >= 0 && xs[j] < static_cast<double>(w))
      tap.index[j] = static_cast<std::int64_t>(ys[j]) * static_cast<std::int64_t>(w) + static_cast<std::int64_t>(xs[j]);
  }
  return tap;
}

template <typename T>
T apply_tap(const BilinearTap& tap, const T* plane) {
  T v = 0;
  for (int j = 0; j < 4; ++j)
    if (tap.index[j] >= 0) v += plane[tap.index[j]] * static_cast<T>(tap.weight[j]);
  return v;
}

template <typename T>
void scatter_tap(const BilinearTap& tap, T g, T* plane) {
  for (int j = 0; j < 4; ++j)
    if (tap.index[j] >= 0) plane[tap.index[j]] += g * static_cast<T>(tap.weight[j]);
}

/// Applies the same tap plan to every trailing plane of x.
template <typename T>
Var<T> apply_plan(const Var<T>& x, std::vector<BilinearTap> plan, Shape out_shape, std::size_t in_plane, const char* op) {
  const std::size_t planes = x.value().numel() / in_plane;
  const std::size_t out_plane = plan.size();
  Tensor<T> out(std::move(out_shape));
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = x.value().data() + p * in_plane;
    T* dst = out.data() + p * out_plane;
    for (std::size_t k = 0; k < out_plane; ++k) dst[k] = apply_tap(plan[k], src);
  }
  return make_result<T>(std::move(out), {x}, op, [x, plan = std::move(plan), planes, in_plane](const Tensor<T>& g) {
    Tensor<T> gi(x.shape());
    const std::size_t out_plane = plan.size();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t k = 0; k < out_plane; ++k) scatter_tap(plan[k], g[p * out_plane + k], gi.data() + p * in_plane);
    x.accumulate(gi);
  });
}

}  // namespace

template <typename T>
Var<T> bilinear_sample(const Var<T>& image, const Tensor<T>& coords) {
  if (image.value().rank() != 3) throw DimensionError("bilinear_sample expects image [C,H,W], got " + shape_str(image.shape()));
  if (coords.rank() != 2 || coords.shape()[1] != 2) throw DimensionError("bilinear_sample expects coords [N,2], got " + shape_str(coords.shape()));
  const std::size_t c = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
  if (h < 2 || w < 2) throw DimensionError("bilinear_sample requires H, W >= 2");
  const std::size_t n = coords.shape()[0];
  std::vector<BilinearTap> plan(n);
  for (std::size_t k = 0; k < n; ++k)
    plan[k] = bilinear_tap<T>(static_cast<double>(coords[2 * k]), static_cast<double>(coords[2 * k + 1]), h, w);
  return apply_plan(image, std::move(plan), Shape{c, n}, h * w, "bilinear_sample");
}

bool is_quarter_turn(double angle, int& quarter) {
  const double q = angle / (std::numbers::pi / 2);
  const double r = std::round(q);
  if (std::abs(angle - r * (std::numbers::pi / 2)) > 1e-12) return false;
  quarter = static_cast<int>(((static_cast<long long>(r) % 4) + 4) % 4);
  return true;
}

std::vector<BilinearTap> rotation_taps(std::size_t h, std::size_t w, double angle) {
  std::vector<BilinearTap> plan(h * w);
  int quarter = 0;
  if (h == w && is_quarter_turn(angle, quarter)) {
    const std::size_t n = h;
    for (std::size_t u = 0; u < n; ++u)
      for (std::size_t v = 0; v < n; ++v) {
        std::size_t su = u, sv = v;
        switch (quarter) {
          case 1: su = v; sv = n - 1 - u; break;
          case 2: su = n - 1 - u; sv = n - 1 - v; break;
          case 3: su = n - 1 - v; sv = u; break;
          default: break;
        }
        plan[u * n + v] = BilinearTap{{static_cast<std::int64_t>(su * n + sv), -1, -1, -1}, {1, 0, 0, 0}};
      }
    return plan;
  }
  const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t u = 0; u < h; ++u)
    for (std::size_t v = 0; v < w; ++v) {
      const double du = static_cast<double>(u) - cy, dv = static_cast<double>(v) - cx;
      // R(-angle) applied to (du, dv)
      const double sy = c * du + s * dv + cy;
      const double sx = -s * du + c * dv + cx;
      plan[u * w + v] = bilinear_tap<double>(sy, sx, h, w);
    }
  return plan;
}

template <typename T>
Var<T> rotate_plane(const Var<T>& x, double angle) {
  if (!std::isfinite(angle)) throw ContractError("rotate_plane: angle must be finite");
  const auto& xs = x.shape();
  if (xs.size() < 2) throw DimensionError("rotate_plane expects rank >= 2, got " + shape_str(xs));
  const std::size_t h = xs[xs.size() - 2], w = xs[xs.size() - 1];
  int quarter = 0;
  if (is_quarter_turn(angle, quarter) && quarter == 0) return x;
  return apply_plan(x, rotation_taps(h, w, angle), xs, h * w, "rotate_plane");
}

// Explicit instantiations ---------------------------------------------------------------

#define RINV_INSTANTIATE_OPS(T)                                                        \
  template void backward<T>(const Var<T>&);                                            \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                \
  template Var<T> scale<T>(const Var<T>&, T);                                          \
  template Var<T> add_scalar<T>(const Var<T>&, T);                                     \
  template Var<T> relu<T>(const Var<T>&);                                              \
  template Var<T> square<T>(const Var<T>&);                                            \
  template Var<T> abs<T>(const Var<T>&);                                               \
  template Var<T> exp<T>(const Var<T>&);                                               \
  template Var<T> log<T>(const Var<T>&);                                               \
  template Var<T> add_bias<T>(const Var<T>&, const Var<T>&, std::size_t);              \
  template Var<T> mul_along<T>(const Var<T>&, const Var<T>&, std::size_t);             \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                    \
  template Var<T> transpose<T>(const Var<T>&);                                         \
  template Var<T> concat<T>(const std::vector<Var<T>>&, std::size_t);                  \
  template Var<T> slice<T>(const Var<T>&, std::size_t, std::size_t, std::size_t);      \
  template Var<T> roll<T>(const Var<T>&, std::size_t, std::size_t);                   \
  template Var<T> sum<T>(const Var<T>&);                                               \
  template Var<T> mean<T>(const Var<T>&);                                              \
  template Var<T> sum_axis<T>(const Var<T>&, std::size_t);                             \
  template Var<T> mean_axis<T>(const Var<T>&, std::size_t);                            \
  template Var<T> max_axis<T>(const Var<T>&, std::size_t);                             \
  template T tree_sum<T>(const T*, std::size_t, std::size_t);                          \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                             \
  template Var<T> dense<T>(const Var<T>&, const Var<T>&, const Var<T>&);               \
  template Var<T> dense<T>(const Var<T>&, const Var<T>&);                              \
  template Var<T> softmax<T>(const Var<T>&, std::size_t);                              \
  template Var<T> cross_entropy<T>(const Var<T>&, std::span<const int>);               \
  template Var<T> dropout<T>(const Var<T>&, T, bool, std::mt19937_64&);                \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const ConvOptions&);         \
  template Var<T> same_conv2d<T>(const Var<T>&, const Var<T>&);                        \
  template Var<T> max_pool2d<T>(const Var<T>&, std::size_t);                           \
  template Var<T> bilinear_sample<T>(const Var<T>&, const Tensor<T>&);                 \
  template Var<T> rotate_plane<T>(const Var<T>&, double);

RINV_INSTANTIATE_OPS(float)
RINV_INSTANTIATE_OPS(double)

}  // namespace rinv
