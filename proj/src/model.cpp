#include "rinv/model.hpp"

#include "rinv/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace rinv {
namespace {

std::string conv_name(std::size_t l) { return "conv" + std::to_string(l); }

bool pools_after(const ModelConfig& c, std::size_t l) {
  return std::find(c.pool_after.begin(), c.pool_after.end(), l) != c.pool_after.end();
}

double max_distance(const std::vector<MonomialSpec>& specs) {
  double d = 0;
  for (const auto& s : specs)
    for (double v : s.distances) d = std::max(d, v);
  return d;
}

std::size_t head_parameters(const ModelConfig& c, std::size_t channels, std::size_t size) {
  const auto& h = c.head;
  switch (h.kind) {
    case HeadKind::max_pool: return 0;
    case HeadKind::monomial: return h.monomials.size() * (h.monomials.empty() ? 0 : h.monomials.front().distances.size());
    case HeadKind::ws_global: return h.out_channels * channels * size * size;
    case HeadKind::ws_local: return h.out_channels * channels * h.ws_extent * h.ws_extent;
    case HeadKind::mlp: {
      std::size_t in = channels * h.mlp_patch * h.mlp_patch, total = 0;
      for (std::size_t w : h.mlp_hidden) {
        total += in * w;
        in = w;
      }
      return total + in * h.out_channels;
    }
    case HeadKind::sa:
      return 3 * channels * h.sa_channels + (2 * size - 1) * (2 * size - 1) * h.sa_channels + h.sa_channels * h.out_channels;
  }
  return 0;
}

std::size_t head_features(const ModelConfig& c, std::size_t channels) {
  switch (c.head.kind) {
    case HeadKind::max_pool: return channels;
    case HeadKind::monomial: return c.head.monomials.size() * channels;
    default: return c.head.out_channels;
  }
}

std::size_t count_parameters(const ModelConfig& c, const std::vector<std::size_t>& widths, std::size_t size,
                             const std::vector<std::size_t>& dense) {
  const bool steer = c.backbone == Backbone::steerable;
  const std::size_t atoms = 2 * c.n_f;
  std::size_t total = 0, in = c.in_channels;
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const std::size_t out = widths[l];
    if (steer)
      total += out * in * atoms * (l == 0 ? 1 : c.n_alpha);
    else
      total += out * in * c.kernel * c.kernel;
    total += out;
    if (c.batch_norm) total += 2 * out;
    in = out;
  }
  total += head_parameters(c, in, size);
  std::size_t f = head_features(c, in);
  for (std::size_t w : dense) {
    total += f * w + w;
    f = w;
  }
  return total + f * c.classes + c.classes;
}

template <typename T>
Tensor<T> normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

const char* to_string(Backbone b) { return b == Backbone::steerable ? "steerable" : "plain"; }

const char* to_string(HeadKind h) {
  switch (h) {
    case HeadKind::max_pool: return "max-pool";
    case HeadKind::monomial: return "monomial";
    case HeadKind::ws_global: return "global-ws";
    case HeadKind::ws_local: return "local-ws";
    case HeadKind::mlp: return "mlp";
    case HeadKind::sa: return "sa";
  }
  return "?";
}

ModelConfig reference_config(const ModelConfig& config) {
  ModelConfig ref = config;
  ref.backbone = Backbone::plain;
  ref.head = HeadConfig{};
  ref.head.kind = HeadKind::max_pool;
  ref.rescale = false;
  ref.match_budget = false;
  return ref;
}

ModelLayout resolve_layout(const ModelConfig& c) {
  if (c.channels.empty()) throw BuildError("model needs at least one convolution layer");
  if (c.classes < 2) throw BuildError("model needs at least two classes");
  if (c.in_channels == 0 || c.image_size == 0) throw BuildError("input must have channels and spatial extent");
  if (c.kernel % 2 == 0) throw BuildError("kernel size must be odd, got " + std::to_string(c.kernel));
  if (c.n_alpha == 0) throw BuildError("n_alpha must be positive");
  if (!(c.dropout >= 0 && c.dropout < 1)) throw BuildError("dropout rate must lie in [0, 1)");
  for (std::size_t l : c.pool_after)
    if (l >= c.channels.size()) throw BuildError("pool_after index " + std::to_string(l) + " has no convolution layer");
  const bool steer = c.backbone == Backbone::steerable;
  if (steer && c.n_f == 0) throw BuildError("steerable backbone needs n_f >= 1");

  ModelLayout lay;
  lay.channel_divisor = steer && c.rescale ? param_ratio(c.kernel, c.n_alpha, c.n_f).channel_factor : 1.0;
  std::size_t size = c.image_size;
  for (std::size_t l = 0; l < c.channels.size(); ++l) {
    if (c.channels[l] == 0) throw BuildError(conv_name(l) + " has zero channels");
    lay.widths.push_back(std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(static_cast<double>(c.channels[l]) / lay.channel_divisor))));
    if (pools_after(c, l)) {
      if (size % 2 != 0 || size < 2)
        throw BuildError(conv_name(l) + " -> pool: feature map " + std::to_string(size) + "x" + std::to_string(size) +
                         " cannot be halved exactly");
      size /= 2;
    }
  }
  lay.head_size = size;
  const std::size_t last = lay.widths.back();
  const std::string into_head = (steer ? std::string("group-pool") : conv_name(c.channels.size() - 1)) + " -> head." +
                                to_string(c.head.kind);
  switch (c.head.kind) {
    case HeadKind::monomial: {
      if (c.head.monomials.empty()) throw BuildError(into_head + ": no monomials configured");
      const auto margin = static_cast<std::size_t>(std::ceil(max_distance(c.head.monomials)));
      if (2 * margin >= size)
        throw BuildError(into_head + ": " + std::to_string(size) + "x" + std::to_string(size) +
                         " feature map leaves no valid centre for distance " + std::to_string(margin));
      break;
    }
    case HeadKind::ws_local:
      if (c.head.ws_extent % 2 == 0) throw BuildError(into_head + ": window extent must be odd");
      break;
    case HeadKind::mlp:
      if (c.head.mlp_patch % 2 == 0) throw BuildError(into_head + ": patch size must be odd");
      break;
    case HeadKind::sa:
      if (c.head.sa_heads == 0 || c.head.sa_channels % c.head.sa_heads != 0)
        throw BuildError(into_head + ": attention width not divisible by head count");
      break;
    default: break;
  }
  const ModelConfig ref = reference_config(c);
  lay.reference_parameters = count_parameters(ref, ref.channels, size, ref.dense);
  const bool is_reference = !steer && c.head.kind == HeadKind::max_pool;
  const bool matching = c.match_budget && !is_reference;
  const auto off_budget = [&](std::size_t params) {
    return std::abs(static_cast<double>(params) - static_cast<double>(lay.reference_parameters)) /
           static_cast<double>(lay.reference_parameters);
  };
  // n_FC absorbs the difference; heads with their own width shrink it when n_FC alone cannot
  const bool has_width = c.head.kind != HeadKind::max_pool && c.head.kind != HeadKind::monomial;
  ModelConfig trial = c;
  for (std::size_t width = c.head.out_channels;; --width) {
    trial.head.out_channels = width;
    if (c.head.kind == HeadKind::sa && c.head.sa_heads > 0)
      trial.head.sa_channels = std::min(c.head.sa_channels, (width + c.head.sa_heads - 1) / c.head.sa_heads * c.head.sa_heads);
    lay.dense = c.dense;
    if (matching && !c.dense.empty()) {
      std::size_t best = 1;
      double best_gap = std::numeric_limits<double>::infinity();
      for (std::size_t w = 1; w <= 8192; ++w) {
        const std::vector<std::size_t> dense(c.dense.size(), w);
        const double gap = std::abs(static_cast<double>(count_parameters(trial, lay.widths, size, dense)) -
                                    static_cast<double>(lay.reference_parameters));
        if (gap < best_gap) {
          best_gap = gap;
          best = w;
        }
      }
      lay.dense.assign(c.dense.size(), best);
    }
    lay.parameters = count_parameters(trial, lay.widths, size, lay.dense);
    if (!matching || !has_width || width <= 1 || off_budget(lay.parameters) <= 0.05) break;
  }
  lay.head_width = trial.head.out_channels;
  lay.head_inner = trial.head.sa_channels;
  lay.feature_count = head_features(trial, last);
  if (matching && off_budget(lay.parameters) > 0.05)
    throw BuildError("parameter budget: " + std::to_string(lay.parameters) + " parameters vs reference " +
                     std::to_string(lay.reference_parameters) + " cannot be matched within 5% through n_FC" +
                     (has_width ? " and the head width" : ""));
  return lay;
}

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config), layout_(resolve_layout(config)) {
  const bool steer = config_.backbone == Backbone::steerable;
  const bool needs_group = steer || config_.head.kind != HeadKind::max_pool;
  group_ = CyclicRotationGroup(needs_group ? config_.n_alpha : 1);
  std::uint64_t stream = 0;
  auto next_seed = [&] { return split_seed(seed, ++stream); };

  if (steer) basis_ = build_basis<T>(config_.kernel, config_.n_f, config_.n_alpha);
  std::size_t in = config_.in_channels;
  for (std::size_t l = 0; l < layout_.widths.size(); ++l) {
    const std::size_t out = layout_.widths[l];
    const std::string name = conv_name(l);
    if (steer) {
      filters_.push_back(make_steerable_filter<T>(name + ".coeff", out, in, *basis_, l > 0, next_seed()));
    } else {
      std::mt19937_64 rng(next_seed());
      conv_w_.emplace_back(name + ".weight",
                           normal<T>({out, in, config_.kernel, config_.kernel},
                                     std::sqrt(2.0 / static_cast<double>(in * config_.kernel * config_.kernel)), rng),
                           Regularization::l2);
    }
    conv_b_.emplace_back(name + ".bias", Tensor<T>::zeros({out}));
    if (config_.batch_norm) {
      bn_gamma_.emplace_back("bn" + std::to_string(l) + ".gamma", Tensor<T>::ones({out}));
      bn_beta_.emplace_back("bn" + std::to_string(l) + ".beta", Tensor<T>::zeros({out}));
      bn_mean_.push_back(Tensor<T>::zeros({out}));
      bn_var_.push_back(Tensor<T>::ones({out}));
    }
    in = out;
  }

  config_.head.out_channels = layout_.head_width;
  config_.head.sa_channels = layout_.head_inner;
  const auto& h = config_.head;
  const std::size_t size = layout_.head_size;
  switch (h.kind) {
    case HeadKind::max_pool: break;
    case HeadKind::monomial: head_ = make_monomial_head<T>("head.exponents", h.monomials); break;
    case HeadKind::ws_global:
      head_ = make_ws_head<T>("head.kernel", WSMode::global, h.out_channels, in, size, next_seed());
      break;
    case HeadKind::ws_local:
      head_ = make_ws_head<T>("head.kernel", WSMode::local, h.out_channels, in, h.ws_extent, next_seed());
      break;
    case HeadKind::mlp: {
      auto widths = h.mlp_hidden;
      widths.push_back(h.out_channels);
      head_ = make_mlp_head<T>("head.mlp", in, h.mlp_patch, widths, next_seed());
      break;
    }
    case HeadKind::sa:
      head_ = make_sa_head<T>("head.sa", in, h.sa_channels, h.sa_heads, h.out_channels, size, size, next_seed());
      break;
  }

  std::size_t f = layout_.feature_count;
  for (std::size_t l = 0; l <= layout_.dense.size(); ++l) {
    const bool last = l == layout_.dense.size();
    const std::size_t out = last ? config_.classes : layout_.dense[l];
    const std::string name = last ? std::string("out") : "dense" + std::to_string(l);
    std::mt19937_64 rng(next_seed());
    dense_w_.emplace_back(name + ".weight",
                          normal<T>({f, out}, std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(f)), rng),
                          Regularization::l2);
    dense_b_.emplace_back(name + ".bias", Tensor<T>::zeros({out}));
    f = out;
  }
}

template <typename T>
Var<T> Model<T>::backbone(const Var<T>& x, bool train) {
  if (x.value().rank() != 4 || x.shape()[1] != config_.in_channels || x.shape()[2] != config_.image_size ||
      x.shape()[3] != config_.image_size)
    throw DimensionError("model input must be [N, " + std::to_string(config_.in_channels) + ", " +
                         std::to_string(config_.image_size) + ", " + std::to_string(config_.image_size) + "], got " +
                         shape_str(x.shape()));
  const bool steer = config_.backbone == Backbone::steerable;
  Var<T> h = x;
  for (std::size_t l = 0; l < layout_.widths.size(); ++l) {
    Var<T> y;
    if (steer)
      y = l == 0 ? lifting_conv(h, filters_[0], *basis_).data
                 : group_conv(RegularFeatureMap<T>(h, group_), filters_[l], *basis_).data;
    else
      y = same_conv2d(h, conv_w_[l].var);
    y = add_bias(y, conv_b_[l].var, 1);
    if (config_.batch_norm) y = batch_norm(y, bn_gamma_[l].var, bn_beta_[l].var, bn_mean_[l], bn_var_[l], train);
    y = relu(y);
    if (pools_after(config_, l)) y = max_pool2d(y, 2);
    h = y;
  }
  return steer ? group_max_pool(RegularFeatureMap<T>(h, group_)) : h;
}

template <typename T>
Var<T> Model<T>::head_features(const Var<T>& fmap, const Var<T>* mask) {
  if (!head_) return spatial_max_pool(fmap);
  Var<T> f = apply_head(*head_, fmap, group_);
  if (mask) {
    if (!has_monomial_head()) throw ContractError("connection mask requires a monomial head");
    const std::size_t n = f.shape()[0], m = monomial_head().count(), c = layout_.widths.back();
    if (mask->value().numel() != m) throw DimensionError("mask length must equal the monomial count");
    f = reshape(mul_along(reshape(f, {n, m, c}), *mask, 1), {n, m * c});
  }
  return f;
}

template <typename T>
Var<T> Model<T>::forward(const Var<T>& x, bool train, std::mt19937_64* rng, const Var<T>* mask) {
  Var<T> h = head_features(backbone(x, train), mask);
  const bool drop = train && config_.dropout > 0;
  if (drop && !rng) throw ContractError("training with dropout needs a generator");
  for (std::size_t l = 0; l + 1 < dense_w_.size(); ++l) {
    h = relu(dense(h, dense_w_[l].var, dense_b_[l].var));
    if (drop) h = dropout(h, static_cast<T>(config_.dropout), true, *rng);
  }
  return dense(h, dense_w_.back().var, dense_b_.back().var);
}

template <typename T>
Var<T> Model<T>::features(const Var<T>& x) {
  return head_features(backbone(x, false), nullptr);
}

template <typename T>
ParamRefs<T> Model<T>::params() {
  ParamRefs<T> out;
  for (auto& f : filters_) out.push_back(&f.coefficients);
  for (auto& p : conv_w_) out.push_back(&p);
  for (auto& p : conv_b_) out.push_back(&p);
  for (auto& p : bn_gamma_) out.push_back(&p);
  for (auto& p : bn_beta_) out.push_back(&p);
  if (head_)
    for (auto* p : head_params(*head_)) out.push_back(p);
  for (std::size_t l = 0; l < dense_w_.size(); ++l) {
    out.push_back(&dense_w_[l]);
    out.push_back(&dense_b_[l]);
  }
  return out;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t total = 0;
  for (auto* p : const_cast<Model*>(this)->params()) total += p->numel();
  return total;
}

template <typename T>
bool Model<T>::has_monomial_head() const noexcept {
  return head_ && std::holds_alternative<MonomialHead<T>>(*head_);
}

template <typename T>
MonomialHead<T>& Model<T>::monomial_head() {
  if (!has_monomial_head()) throw ContractError("model has no monomial head");
  return std::get<MonomialHead<T>>(*head_);
}

template <typename T>
void Model<T>::keep_monomials(const std::vector<std::size_t>& keep) {
  auto& head = monomial_head();
  const std::size_t m = head.count(), factors = head.factors(), c = layout_.widths.back();
  if (keep.empty()) throw ContractError("keep_monomials: empty selection");
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i] >= m || (i > 0 && keep[i] <= keep[i - 1]))
      throw ContractError("keep_monomials: indices must be ascending and inside the pool");

  std::vector<std::vector<double>> distances;
  Tensor<T> b({keep.size(), factors});
  for (std::size_t i = 0; i < keep.size(); ++i) {
    distances.push_back(head.distances[keep[i]]);
    std::copy_n(head.exponents.value().data() + keep[i] * factors, factors, b.data() + i * factors);
  }
  auto& w = dense_w_.front();
  const std::size_t out = w.value().shape()[1];
  Tensor<T> nw({keep.size() * c, out});
  for (std::size_t i = 0; i < keep.size(); ++i)
    std::copy_n(w.value().data() + keep[i] * c * out, c * out, nw.data() + i * c * out);

  head.distances = std::move(distances);
  head.exponents = Parameter<T>(head.exponents.name, std::move(b), head.exponents.reg);
  w = Parameter<T>(w.name, std::move(nw), w.reg);

  config_.head.monomials = head.specs();
  config_.match_budget = false;
  config_.dense = layout_.dense;
  layout_.feature_count = keep.size() * c;
  layout_.parameters = parameter_count();
}

template <typename T>
Archive Model<T>::state() const {
  Archive a;
  for (auto* p : const_cast<Model*>(this)->params()) a.add(p->name, p->value());
  for (std::size_t l = 0; l < bn_mean_.size(); ++l) {
    a.add("bn" + std::to_string(l) + ".running_mean", bn_mean_[l]);
    a.add("bn" + std::to_string(l) + ".running_var", bn_var_[l]);
  }
  return a;
}

template <typename T>
void Model<T>::load_state(const Archive& archive) {
  auto fetch = [&](const std::string& name, const Shape& shape) {
    auto t = archive.get<T>(name);
    if (!t) throw ContractError("checkpoint lacks tensor " + name);
    if (t->shape() != shape)
      throw DimensionError("checkpoint tensor " + name + " has shape " + shape_str(t->shape()) + ", model expects " +
                           shape_str(shape));
    return *t;
  };
  for (auto* p : params()) p->mutable_value() = fetch(p->name, p->value().shape());
  for (std::size_t l = 0; l < bn_mean_.size(); ++l) {
    bn_mean_[l] = fetch("bn" + std::to_string(l) + ".running_mean", bn_mean_[l].shape());
    bn_var_[l] = fetch("bn" + std::to_string(l) + ".running_var", bn_var_[l].shape());
  }
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool train, T momentum, T eps) {
  const auto& s = x.shape();
  if (s.size() < 2) throw DimensionError("batch_norm expects [N, C, ...]");
  const std::size_t n = s[0], c = s[1], inner = x.value().numel() / (n * c), count = n * inner;
  if (gamma.value().numel() != c || beta.value().numel() != c)
    throw DimensionError("batch_norm: affine parameters must have one entry per channel");
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  const T* xv = x.value().data();
  if (train) {
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* p = xv + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) mean[ch] += p[i];
      }
    for (auto& m : mean) m /= static_cast<double>(count);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* p = xv + (b * c + ch) * inner;
        for (std::size_t i = 0; i < inner; ++i) var[ch] += (p[i] - mean[ch]) * (p[i] - mean[ch]);
      }
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double unbiased = count > 1 ? var[ch] / static_cast<double>(count - 1) : var[ch];
      var[ch] /= static_cast<double>(count);
      running_mean[ch] = static_cast<T>((1 - momentum) * running_mean[ch] + momentum * mean[ch]);
      running_var[ch] = static_cast<T>((1 - momentum) * running_var[ch] + momentum * unbiased);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      var[ch] = running_var[ch];
    }
  }
  std::vector<double> inv(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv[ch] = 1.0 / std::sqrt(var[ch] + static_cast<double>(eps));
  Tensor<T> xhat(s), out(s);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        xhat[off + i] = static_cast<T>((xv[off + i] - mean[ch]) * inv[ch]);
        out[off + i] = gamma.value()[ch] * xhat[off + i] + beta.value()[ch];
      }
    }
  return make_result<T>(std::move(out), {x, gamma, beta}, "batch_norm",
                        [x, gamma, beta, xhat, inv, n, c, inner, count, train](const Tensor<T>& g) {
                          Tensor<T> gg({c}), gb({c});
                          std::vector<double> sg(c, 0.0), sgx(c, 0.0);
                          for (std::size_t b = 0; b < n; ++b)
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              const std::size_t off = (b * c + ch) * inner;
                              for (std::size_t i = 0; i < inner; ++i) {
                                sg[ch] += g[off + i];
                                sgx[ch] += static_cast<double>(g[off + i]) * xhat[off + i];
                              }
                            }
                          for (std::size_t ch = 0; ch < c; ++ch) {
                            gg[ch] = static_cast<T>(sgx[ch]);
                            gb[ch] = static_cast<T>(sg[ch]);
                          }
                          gamma.accumulate(gg);
                          beta.accumulate(gb);
                          if (!x.requires_grad()) return;
                          Tensor<T> gx(x.shape());
                          const double cnt = static_cast<double>(count);
                          for (std::size_t b = 0; b < n; ++b)
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              const std::size_t off = (b * c + ch) * inner;
                              const double scale = gamma.value()[ch] * inv[ch];
                              for (std::size_t i = 0; i < inner; ++i) {
                                double v = g[off + i];
                                if (train) v -= (sg[ch] + xhat[off + i] * sgx[ch]) / cnt;
                                gx[off + i] = static_cast<T>(scale * v);
                              }
                            }
                          x.accumulate(gx);
                        });
}

template class Model<float>;
template class Model<double>;
template Var<float> batch_norm<float>(const Var<float>&, const Var<float>&, const Var<float>&, Tensor<float>&,
                                      Tensor<float>&, bool, float, float);
template Var<double> batch_norm<double>(const Var<double>&, const Var<double>&, const Var<double>&, Tensor<double>&,
                                        Tensor<double>&, bool, double, double);

}  // namespace rinv
