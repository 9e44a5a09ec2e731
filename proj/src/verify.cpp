#include "rinv/verify.hpp"

#include "rinv/model.hpp"
#include "rinv/probe.hpp"
#include "rinv/selection.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace rinv {
namespace {

using probe::disk_max_abs_diff;
using probe::gradient_check;
using probe::interior_max_abs_diff;
using probe::random_tensor;
using probe::smooth_disk_image;
using probe::smooth_image;
using Vars = std::vector<Var<double>>;

std::vector<std::size_t> orders_with(std::vector<std::size_t> base, std::size_t extra) {
  if (std::find(base.begin(), base.end(), extra) == base.end()) base.push_back(extra);
  return base;
}

bool exact_element(std::size_t g, std::size_t n) { return (4 * g) % n == 0; }

template <typename F>
SuiteReport timed(const char* name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport r;
  r.suite = name;
  body(r.checks);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// Equivariance ------------------------------------------------------------------------

double lifting_exact(std::size_t n, const VerifyOptions& o) {
  const auto basis = build_basis<double>(5, 6, n);
  double worst = 0;
  for (std::uint64_t s = 0; s < o.samples; ++s) {
    const auto filter = make_steerable_filter<double>("psi", 3, 2, basis, false, o.seed + s);
    const Var<double> x(random_tensor({2, 12, 12}, o.seed + 100 + s));
    const auto base = lifting_conv(x, filter, basis);
    for (std::size_t g = 0; g < n; ++g) {
      if (!exact_element(g, n)) continue;
      const auto lhs = lifting_conv(act_on_plane(basis.group, g, x), filter, basis).data.value();
      worst = std::max(worst, interior_max_abs_diff(lhs, act_on_regular(g, base).data.value(), 2));
    }
  }
  return worst;
}

double group_conv_exact(std::size_t n, const VerifyOptions& o) {
  const auto basis = build_basis<double>(3, 4, n);
  double worst = 0;
  for (std::uint64_t s = 0; s < o.samples; ++s) {
    const auto filter = make_steerable_filter<double>("psi", 2, 3, basis, true, o.seed + s);
    const RegularFeatureMap<double> f(Var<double>(random_tensor({2, 3, n, 10, 10}, o.seed + 50 + s)), basis.group);
    const auto base = group_conv(f, filter, basis);
    for (std::size_t g = 0; g < n; ++g) {
      if (!exact_element(g, n)) continue;
      const auto lhs = group_conv(act_on_regular(g, f), filter, basis).data.value();
      worst = std::max(worst, interior_max_abs_diff(lhs, act_on_regular(g, base).data.value(), 1));
    }
  }
  return worst;
}

double lifting_smooth(std::size_t n, const VerifyOptions& o) {
  const auto basis = build_basis<double>(5, 3, n);
  double worst = 0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto filter = make_steerable_filter<double>("psi", 2, 1, basis, false, o.seed + s);
    const Var<double> x(smooth_image(1, 49, 49, o.seed + s, 10.0));
    const auto base = lifting_conv(x, filter, basis);
    for (std::size_t g = 1; g < n; ++g) {
      const auto lhs = lifting_conv(act_on_plane(basis.group, g, x), filter, basis).data.value();
      worst = std::max(worst, disk_max_abs_diff(lhs, act_on_regular(g, base).data.value(), 21.0));
    }
  }
  return worst;
}

double group_conv_smooth(std::size_t n, const VerifyOptions& o) {
  const auto basis = build_basis<double>(5, 3, n);
  double worst = 0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto lift = make_steerable_filter<double>("lift", 2, 1, basis, false, o.seed + s);
    const auto filter = make_steerable_filter<double>("psi", 2, 2, basis, true, o.seed + s + 10);
    const Var<double> x(smooth_image(1, 49, 49, o.seed + s, 10.0));
    const auto lifted = lifting_conv(x, lift, basis).data;
    const RegularFeatureMap<double> f(scale(lifted, 1.0 / max_abs(lifted.value())), basis.group);
    const auto base = group_conv(f, filter, basis);
    for (std::size_t g = 1; g < n; ++g) {
      const auto lhs = group_conv(act_on_regular(g, f), filter, basis).data.value();
      worst = std::max(worst, disk_max_abs_diff(lhs, act_on_regular(g, base).data.value(), 19.0));
    }
  }
  return worst;
}

// Invariant heads ------------------------------------------------------------------------

const char* kHeadNames[] = {"monomial", "global-ws", "local-ws", "mlp", "sa"};

std::vector<IIHead<double>> all_heads(std::size_t c, std::size_t hw, std::uint64_t seed) {
  const std::vector<MonomialSpec> specs{{{0, 1, 2}, {0.7, 1.1, 0.4}}, {{0, 1.5, 1}, {1.3, 0.2, 0.9}}, {{0, 0, 2}, {0.5, 0.5, 1.0}}};
  std::vector<IIHead<double>> heads;
  heads.emplace_back(make_monomial_head<double>("mono", specs));
  heads.emplace_back(make_ws_head<double>("gws", WSMode::global, 3, c, hw, seed));
  heads.emplace_back(make_ws_head<double>("lws", WSMode::local, 3, c, 3, seed));
  heads.emplace_back(make_mlp_head<double>("mlp", c, 3, {6, 4}, seed));
  heads.emplace_back(make_sa_head<double>("sa", c, 4, 2, 3, hw, hw, seed));
  return heads;
}

// Gradient cases -------------------------------------------------------------------------

struct GradCase {
  const char* name;
  std::function<Var<double>(const Vars&)> f;
  std::function<std::vector<Tensor<double>>(std::uint64_t)> inputs;
};

std::vector<GradCase> gradient_cases() {
  static const auto basis = build_basis<double>(3, 3, 4);
  static const std::vector<MonomialSpec> specs{{{0, 1, 2}, {0.7, 1.1, 0.4}}, {{0, 1.5, 1}, {1.3, 0.2, 0.9}}};
  const CyclicRotationGroup c4(4), c8(8);
  std::vector<GradCase> cases;
  cases.push_back({"conv2d", [](const Vars& v) { return conv2d(v[0], v[1], ConvOptions{2, 1, 2}); },
                   [](std::uint64_t s) { return std::vector{random_tensor({2, 4, 6, 6}, s), random_tensor({3, 4, 3, 3}, s + 1)}; }});
  cases.push_back({"dense", [](const Vars& v) { return dense(v[0], v[1], v[2]); },
                   [](std::uint64_t s) {
                     return std::vector{random_tensor({3, 5}, s), random_tensor({5, 4}, s + 1), random_tensor({4}, s + 2)};
                   }});
  cases.push_back({"add_bias", [](const Vars& v) { return add_bias(v[0], v[1], 1); },
                   [](std::uint64_t s) { return std::vector{random_tensor({2, 3, 4}, s), random_tensor({3}, s + 1)}; }});
  cases.push_back({"steerable lifting and group convolution",
                   [](const Vars& v) {
                     SteerableFilter<double> l{Parameter<double>("l", v[0].value())}, g{Parameter<double>("g", v[1].value())};
                     l.coefficients.var = v[0];
                     g.coefficients.var = v[1];
                     const RegularFeatureMap<double> act(relu(lifting_conv(v[2], l, basis).data), basis.group);
                     return group_conv(act, g, basis).data;
                   },
                   [](std::uint64_t s) {
                     return std::vector{make_steerable_filter<double>("l", 2, 1, basis, false, s).coefficients.value(),
                                        make_steerable_filter<double>("g", 1, 2, basis, true, s + 1).coefficients.value(),
                                        random_tensor({1, 5, 5}, s + 2)};
                   }});
  cases.push_back({"monomial head (input, exponents b)",
                   [c8](const Vars& v) {
                     return monomial_features(positive_shift(v[0]), v[1], make_monomial_head<double>("m", specs).distances, c8);
                   },
                   [](std::uint64_t s) {
                     return std::vector{random_tensor({1, 2, 5, 5}, s), make_monomial_head<double>("m", specs).exponents.value()};
                   }});
  cases.push_back({"local weighted-sum head",
                   [c8](const Vars& v) {
                     WSHead<double> h;
                     h.kernel.var = v[1];
                     return ii_ws(v[0], h, c8);
                   },
                   [](std::uint64_t s) { return std::vector{random_tensor({2, 2, 5, 5}, s), random_tensor({3, 2, 3, 3}, s + 1)}; }});
  cases.push_back({"global weighted-sum head",
                   [c4](const Vars& v) {
                     WSHead<double> h;
                     h.mode = WSMode::global;
                     h.kernel.var = v[1];
                     return ii_ws(v[0], h, c4);
                   },
                   [](std::uint64_t s) { return std::vector{random_tensor({2, 2, 4, 4}, s), random_tensor({3, 2, 4, 4}, s + 1)}; }});
  cases.push_back({"mlp head",
                   [c8](const Vars& v) {
                     MLPHead<double> h = make_mlp_head<double>("mlp", 2, 3, {4, 3}, 0);
                     h.weights[0].var = v[1];
                     h.weights[1].var = v[2];
                     return ii_mlp(v[0], h, c8);
                   },
                   [](std::uint64_t s) {
                     const auto h = make_mlp_head<double>("mlp", 2, 3, {4, 3}, s);
                     return std::vector{random_tensor({1, 2, 4, 4}, s), h.weights[0].value(), h.weights[1].value()};
                   }});
  cases.push_back({"self-attention head (incl. positional encodings P)",
                   [c4](const Vars& v) {
                     SAHead<double> h = make_sa_head<double>("sa", 2, 4, 2, 2, 3, 3, 0);
                     h.wq.var = v[1];
                     h.wk.var = v[2];
                     h.wv.var = v[3];
                     h.pos.var = v[4];
                     h.wo.var = v[5];
                     return ii_sa(v[0], h, c4);
                   },
                   [](std::uint64_t s) {
                     const auto h = make_sa_head<double>("sa", 2, 4, 2, 2, 3, 3, s);
                     return std::vector{random_tensor({1, 2, 3, 3}, s), h.wq.value(), h.wk.value(),
                                        h.wv.value(),           h.pos.value(), h.wo.value()};
                   }});
  cases.push_back({"batch normalisation",
                   [](const Vars& v) {
                     Tensor<double> mean = Tensor<double>::zeros({3}), var = Tensor<double>::ones({3});
                     return batch_norm(v[0], v[1], v[2], mean, var, true);
                   },
                   [](std::uint64_t s) {
                     return std::vector{random_tensor({4, 3, 2, 2}, s), random_tensor({3}, s + 1, 0.5, 1.5),
                                        random_tensor({3}, s + 2)};
                   }});
  cases.push_back({"cross entropy over logits",
                   [](const Vars& v) {
                     const int labels[3] = {0, 2, 1};
                     return cross_entropy(v[0], std::span<const int>(labels, 3));
                   },
                   [](std::uint64_t s) { return std::vector{random_tensor({3, 4}, s)}; }});
  return cases;
}

// Pruning oracles ------------------------------------------------------------------------

double magnitude_oracle_error(const VerifyOptions& o) {
  double worst = 0;
  for (std::uint64_t s = 0; s < o.samples; ++s) {
    const std::size_t m = 3 + s % 5, c = 1 + s % 4, out = 2 + s % 3;
    const auto w = random_tensor({m * c, out}, o.seed + s, -2, 2);
    const auto scores = magnitude_scores(w, m);
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < out; ++k) acc += std::abs(w(j * c + ch, k));
      worst = std::max(worst, std::abs(scores.values[j] - acc / static_cast<double>(c * out)));
    }
  }
  return worst;
}

ModelConfig tiny_monomial_config(std::size_t monomials) {
  ModelConfig c;
  c.backbone = Backbone::plain;
  c.image_size = 8;
  c.classes = 3;
  c.channels = {2};
  c.pool_after = {};
  c.kernel = 3;
  c.n_alpha = 4;
  c.head.kind = HeadKind::monomial;
  for (std::size_t j = 0; j < monomials; ++j)
    c.head.monomials.push_back({{0, 1.0 + 0.5 * static_cast<double>(j % 2)}, {0.6 + 0.2 * static_cast<double>(j), 0.9}});
  c.dense = {4};
  c.match_budget = false;
  c.dropout = 0;
  return c;
}

double masked_loss(Model<double>& model, const Dataset& data, const Tensor<double>& mask, std::size_t batch) {
  const Var<double> m(mask);
  double total = 0;
  for (std::size_t b = 0; b < data.size(); b += batch) {
    std::vector<std::size_t> idx(std::min(data.size(), b + batch) - b);
    std::iota(idx.begin(), idx.end(), b);
    total += cross_entropy(model.forward(Var<double>(data.images<double>(idx)), false, nullptr, &m), data.labels_at(idx))
                 .value()
                 .item();
  }
  return total;
}

double sensitivity_fd_error(const VerifyOptions& o) {
  double worst = 0;
  const double eps = 1e-4;
  for (std::uint64_t s = 0; s < 5; ++s) {
    Model<double> model(tiny_monomial_config(3), o.seed + s);
    const Dataset data = synth_shapes(12, 8, 3, o.seed + 40 + s);
    const auto scores = connectivity_scores(model, data, 5);
    for (std::size_t j = 0; j < 3; ++j) {
      Tensor<double> up = Tensor<double>::ones({3}), down = Tensor<double>::ones({3});
      up[j] += eps;
      down[j] -= eps;
      const double fd = std::abs((masked_loss(model, data, up, 5) - masked_loss(model, data, down, 5)) / (2 * eps));
      worst = std::max(worst, std::abs(scores.values[j] - fd) / std::max(fd, 1e-8));
    }
  }
  return worst;
}

double rescale_selection_mismatches(const VerifyOptions& o) {
  double mismatches = 0;
  for (std::uint64_t s = 0; s < o.samples; ++s) {
    const std::size_t m = 10, c = 3;
    auto w = random_tensor({m * c, 4}, o.seed + 900 + s);
    const auto base = magnitude_scores(w, m);
    const auto keep = top_k(base.values, 4);
    for (double lambda : {0.25, 3.7, 1e3}) {
      Tensor<double> scaled = w;
      for (std::size_t i = 0; i < scaled.numel(); ++i) scaled[i] *= lambda;
      const auto sc = magnitude_scores(scaled, m);
      if (top_k(sc.values, 4) != keep) mismatches += 1;
      for (std::size_t j = 0; j < m; ++j)
        if (std::abs(sc.values[j] - lambda * base.values[j]) > 1e-12 * lambda * std::max(1.0, base.values[j]))
          mismatches += 1;
    }
  }
  return mismatches;
}

}  // namespace

bool SuiteReport::pass() const noexcept {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass(); });
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"group", "equivariance", "invariance", "ws-identity", "gradients", "pruning"};
  return names;
}

SuiteReport run_suite(const std::string& name, const VerifyOptions& o) {
  if (name == "group") return verify_group(o);
  if (name == "equivariance") return verify_equivariance(o);
  if (name == "invariance") return verify_invariance(o);
  if (name == "ws-identity") return verify_ws_identity(o);
  if (name == "gradients") return verify_gradients(o);
  if (name == "pruning") return verify_pruning(o);
  throw std::invalid_argument("unknown suite '" + name + "'");
}

SuiteReport verify_group(const VerifyOptions& o) {
  return timed("group", [&](std::vector<Check>& out) {
    for (std::size_t n : orders_with({1, 2, 4, 8, 16}, o.n_alpha)) {
      const CyclicRotationGroup g(n);
      double violations = 0;
      for (std::size_t a = 0; a < n; ++a) {
        violations += g.compose(a, g.identity()) != a;
        violations += g.compose(g.identity(), a) != a;
        violations += g.compose(a, g.inverse(a)) != g.identity();
        violations += g.compose(g.inverse(a), a) != g.identity();
        for (std::size_t b = 0; b < n; ++b) {
          violations += !g.contains(g.compose(a, b));
          for (std::size_t c = 0; c < n; ++c) violations += g.compose(g.compose(a, b), c) != g.compose(a, g.compose(b, c));
        }
      }
      out.push_back({fmt::format("C{} closure/associativity/identity/inverse violations", n), violations, 0.0});
    }
  });
}

SuiteReport verify_equivariance(const VerifyOptions& o) {
  return timed("equivariance", [&](std::vector<Check>& out) {
    for (std::size_t n : orders_with({4, 8}, o.n_alpha)) {
      // off-axis basis copies are sampled analytically, so quarter turns of C8 agree only to rounding
      const double quarter_tol = CyclicRotationGroup(n).acts_exactly() ? 0.0 : 1e-12;
      out.push_back({fmt::format("C{} lifting conv, quarter turns, interior max-abs", n), lifting_exact(n, o), quarter_tol});
      out.push_back({fmt::format("C{} group conv, quarter turns, interior max-abs", n), group_conv_exact(n, o), quarter_tol});
      if (CyclicRotationGroup(n).acts_exactly()) continue;
      out.push_back({fmt::format("C{} lifting conv, smooth input, max-abs", n), lifting_smooth(n, o), 1e-2});
      out.push_back({fmt::format("C{} group conv, smooth input, max-abs", n), group_conv_smooth(n, o), 1e-2});
    }
  });
}

SuiteReport verify_invariance(const VerifyOptions& o) {
  return timed("invariance", [&](std::vector<Check>& out) {
    const CyclicRotationGroup group(o.n_alpha);
    double worst[5] = {0, 0, 0, 0, 0};
    if (group.acts_exactly()) {
      for (std::uint64_t s = 0; s < o.samples; ++s) {
        const auto heads = all_heads(2, 6, o.seed + s);
        const auto x = random_tensor({2, 6, 6}, o.seed + 500 + s);
        for (std::size_t i = 0; i < heads.size(); ++i)
          for (std::size_t g = 0; g < group.order(); ++g)
            worst[i] = std::max(worst[i], invariance_residual(heads[i], x, group, g));
      }
      for (std::size_t i = 0; i < 5; ++i)
        out.push_back({fmt::format("{} head, C{} probes, relative residual", kHeadNames[i], group.order()), worst[i], 1e-4});
      return;
    }
    // resampled rotations: smooth disk-supported inputs, per-head bounds
    const double bounds[] = {3e-3, 1.5e-2, 3e-4, 4e-2, 6e-3};
    for (std::uint64_t s = 0; s < std::min<std::size_t>(o.samples, 5); ++s) {
      const auto heads = all_heads(2, 25, o.seed + s);
      const auto x = smooth_disk_image<double>(2, 25, o.seed + s, 5.0);
      for (std::size_t i = 0; i < heads.size(); ++i)
        for (std::size_t g = 1; g < group.order(); ++g)
          worst[i] = std::max(worst[i], invariance_residual(heads[i], x, group, g));
    }
    for (std::size_t i = 0; i < 5; ++i)
      out.push_back({fmt::format("{} head, C{} probes, smooth input, relative residual", kHeadNames[i], group.order()),
                     worst[i], bounds[i]});
  });
}

SuiteReport verify_ws_identity(const VerifyOptions& o) {
  return timed("ws-identity", [&](std::vector<Check>& out) {
    const std::size_t pairs = std::max<std::size_t>(50, o.samples);
    for (std::size_t n : orders_with({1, 4, 8}, o.n_alpha)) {
      const CyclicRotationGroup group(n);
      double worst = 0;
      for (std::uint64_t s = 0; s < pairs; ++s) {
        const auto x = random_tensor({2, 7, 7}, o.seed + s);
        const auto psi = random_tensor({3, 2, 3, 3}, o.seed + s + 1000);
        worst = std::max(worst, ws_groupconv_equivalence(x, psi, group));
      }
      out.push_back({fmt::format("C{} local weighted sum vs pooled group conv, {} pairs, max-abs", n, pairs), worst, 1e-6});
    }
  });
}

SuiteReport verify_gradients(const VerifyOptions& o) {
  return timed("gradients", [&](std::vector<Check>& out) {
    for (const auto& c : gradient_cases()) {
      double worst = 0;
      for (std::uint64_t s = 0; s < o.samples; ++s) worst = std::max(worst, gradient_check(c.f, c.inputs(o.seed + s), o.seed + s));
      out.push_back({fmt::format("{}, {} seeds, relative error", c.name, o.samples), worst, 1e-4});
    }
  });
}

SuiteReport verify_pruning(const VerifyOptions& o) {
  return timed("pruning", [&](std::vector<Check>& out) {
    out.push_back({"magnitude scores vs scalar double loop, max-abs", magnitude_oracle_error(o), 1e-12});
    out.push_back({"connection sensitivity vs finite differences of the mask, relative", sensitivity_fd_error(o), 1e-3});
    out.push_back({"selection and scores under positive weight rescaling, mismatches", rescale_selection_mismatches(o), 0.0});
  });
}

}  // namespace rinv
