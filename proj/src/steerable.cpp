#include "rinv/steerable.hpp"

#include <cmath>
#include <numeric>
#include <random>

namespace rinv {
namespace {

double atom_value(const BasisAtom& atom, double a, double b, double angle) {
  const double r = std::hypot(a, b);
  const double dr = r - atom.ring;
  const double radial = std::exp(-dr * dr / (2 * kRingSigma * kRingSigma));
  if (atom.frequency == 0) return radial;
  if (r == 0) return 0;
  const double phase = atom.frequency * (std::atan2(b, a) - angle);
  return radial * (atom.sine ? std::sin(phase) : std::cos(phase));
}

std::vector<double> raw_samples(std::size_t k, const BasisAtom& atom, double angle) {
  const int c = static_cast<int>(k / 2);
  std::vector<double> out;
  out.reserve(k * k);
  for (int a = -c; a <= c; ++a)
    for (int b = -c; b <= c; ++b) out.push_back(atom_value(atom, a, b, angle));
  return out;
}

double norm_of(const std::vector<double>& v) {
  return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
}

void check_kernel_size(std::size_t k) {
  if (k == 0 || k % 2 == 0) throw ContractError("steerable kernels need odd size, got " + std::to_string(k));
}

}  // namespace

std::vector<BasisAtom> enumerate_atoms(std::size_t kernel_size, std::size_t count) {
  check_kernel_size(kernel_size);
  const int rings = static_cast<int>(kernel_size / 2);
  std::vector<BasisAtom> atoms;
  auto try_add = [&](BasisAtom atom) {
    if (atoms.size() >= count) return;
    if (norm_of(raw_samples(kernel_size, atom, 0.0)) < 1e-6) return;
    atoms.push_back(atom);
  };
  for (int m = 0; m <= 2 * rings && atoms.size() < count; ++m)
    for (int r = 0; r <= rings; ++r) {
      if (m > 0 && (r == 0 || m > 2 * r)) continue;
      try_add({r, m, false});
      if (m > 0) try_add({r, m, true});
    }
  // Aliased overflow for bases larger than the grid supports.
  for (int m = 1; atoms.size() < count; ++m)
    for (int r = 1; r <= rings; ++r) {
      if (m <= 2 * r) continue;
      try_add({r, m, false});
      try_add({r, m, true});
    }
  return atoms;
}

template <typename T>
Tensor<T> sample_atoms(std::size_t kernel_size, const std::vector<BasisAtom>& atoms, double angle) {
  check_kernel_size(kernel_size);
  const std::size_t kk = kernel_size * kernel_size;
  Tensor<T> out({atoms.size(), kernel_size, kernel_size});
  int quarter = 0;
  const bool exact = is_quarter_turn(angle, quarter);
  const auto perm = rotation_taps(kernel_size, kernel_size, exact ? angle : 0.0);
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    const auto base = raw_samples(kernel_size, atoms[i], 0.0);
    const double norm = norm_of(base);
    const auto values = exact ? base : raw_samples(kernel_size, atoms[i], angle);
    for (std::size_t t = 0; t < kk; ++t) {
      const double v = exact ? values[static_cast<std::size_t>(perm[t].index[0])] : values[t];
      out[i * kk + t] = static_cast<T>(v / norm);
    }
  }
  return out;
}

template <typename T>
SteerableBasis<T> build_basis(std::size_t kernel_size, std::size_t n_f, std::size_t n_alpha) {
  check_kernel_size(kernel_size);
  if (n_f == 0) throw ContractError("basis needs n_F >= 1");
  SteerableBasis<T> basis;
  basis.kernel_size = kernel_size;
  basis.n_f = n_f;
  basis.group = CyclicRotationGroup(n_alpha);
  basis.atoms = enumerate_atoms(kernel_size, 2 * n_f);
  const std::size_t per = basis.atoms.size() * kernel_size * kernel_size;
  basis.filters = Tensor<T>({n_alpha, basis.atoms.size(), kernel_size, kernel_size});
  for (std::size_t r = 0; r < n_alpha; ++r) {
    const auto rotated = sample_atoms<T>(kernel_size, basis.atoms, basis.group.angle(r));
    std::copy_n(rotated.data(), per, basis.filters.data() + r * per);
  }
  return basis;
}

template <typename T>
SteerableFilter<T> make_steerable_filter(std::string name, std::size_t c_out, std::size_t c_in, const SteerableBasis<T>& basis,
                                         bool over_group, std::uint64_t seed) {
  const std::size_t n = basis.group.order();
  const std::size_t atoms = basis.atom_count();
  Shape shape = over_group ? Shape{c_out, c_in, n, atoms} : Shape{c_out, c_in, atoms};
  const double fan_in = static_cast<double>(c_in * (over_group ? n : 1) * atoms);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  Tensor<T> coeffs(shape);
  for (std::size_t i = 0; i < coeffs.numel(); ++i) coeffs[i] = static_cast<T>(dist(rng));
  return SteerableFilter<T>{Parameter<T>(std::move(name), std::move(coeffs), Regularization::elastic_net)};
}

template <typename T>
Var<T> synthesize_lifting_bank(const SteerableFilter<T>& filter, const SteerableBasis<T>& basis) {
  const auto& cs = filter.coefficients.value().shape();
  if (filter.over_group() || cs[2] != basis.atom_count())
    throw ContractError("lifting filter coefficients " + shape_str(cs) + " do not match basis of " +
                        std::to_string(basis.atom_count()) + " atoms");
  const std::size_t co = cs[0], ci = cs[1], nb = cs[2], n = basis.group.order();
  const std::size_t kk = basis.kernel_size * basis.kernel_size;
  const Tensor<T>& coeff = filter.coefficients.value();
  const Tensor<T>& bf = basis.filters;
  Tensor<T> bank({co * n, ci, basis.kernel_size, basis.kernel_size});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < ci; ++c) {
        T* dst = bank.data() + ((o * n + r) * ci + c) * kk;
        const T* cf = coeff.data() + (o * ci + c) * nb;
        for (std::size_t b = 0; b < nb; ++b) {
          const T* src = bf.data() + (r * nb + b) * kk;
          for (std::size_t t = 0; t < kk; ++t) dst[t] += cf[b] * src[t];
        }
      }
  Var<T> cv = filter.coefficients.var;
  return make_result<T>(std::move(bank), {cv}, "lifting_bank", [cv, bf, co, ci, nb, n, kk](const Tensor<T>& g) {
    Tensor<T> gc(cv.shape());
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < ci; ++c) {
          const T* gb = g.data() + ((o * n + r) * ci + c) * kk;
          T* gcf = gc.data() + (o * ci + c) * nb;
          for (std::size_t b = 0; b < nb; ++b) {
            const T* src = bf.data() + (r * nb + b) * kk;
            T acc = 0;
            for (std::size_t t = 0; t < kk; ++t) acc += gb[t] * src[t];
            gcf[b] += acc;
          }
        }
    cv.accumulate(gc);
  });
}

template <typename T>
Var<T> synthesize_group_bank(const SteerableFilter<T>& filter, const SteerableBasis<T>& basis) {
  const auto& cs = filter.coefficients.value().shape();
  const std::size_t n = basis.group.order();
  if (!filter.over_group() || cs[2] != n || cs[3] != basis.atom_count())
    throw ContractError("group filter coefficients " + shape_str(cs) + " do not match basis (n=" + std::to_string(n) +
                        ", atoms=" + std::to_string(basis.atom_count()) + ")");
  const std::size_t co = cs[0], ci = cs[1], nb = cs[3];
  const std::size_t kk = basis.kernel_size * basis.kernel_size;
  const Tensor<T>& coeff = filter.coefficients.value();
  const Tensor<T>& bf = basis.filters;
  Tensor<T> bank({co * n, ci * n, basis.kernel_size, basis.kernel_size});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < ci; ++c)
        for (std::size_t h = 0; h < n; ++h) {
          const std::size_t rel = (h + n - r) % n;
          T* dst = bank.data() + ((o * n + r) * ci * n + c * n + h) * kk;
          const T* cf = coeff.data() + ((o * ci + c) * n + rel) * nb;
          for (std::size_t b = 0; b < nb; ++b) {
            const T* src = bf.data() + (r * nb + b) * kk;
            for (std::size_t t = 0; t < kk; ++t) dst[t] += cf[b] * src[t];
          }
        }
  Var<T> cv = filter.coefficients.var;
  return make_result<T>(std::move(bank), {cv}, "group_bank", [cv, bf, co, ci, nb, n, kk](const Tensor<T>& g) {
    Tensor<T> gc(cv.shape());
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t h = 0; h < n; ++h) {
            const std::size_t rel = (h + n - r) % n;
            const T* gb = g.data() + ((o * n + r) * ci * n + c * n + h) * kk;
            T* gcf = gc.data() + ((o * ci + c) * n + rel) * nb;
            for (std::size_t b = 0; b < nb; ++b) {
              const T* src = bf.data() + (r * nb + b) * kk;
              T acc = 0;
              for (std::size_t t = 0; t < kk; ++t) acc += gb[t] * src[t];
              gcf[b] += acc;
            }
          }
    cv.accumulate(gc);
  });
}

template <typename T>
RegularFeatureMap<T> lifting_conv_bank(const Var<T>& x, const Var<T>& bank, const CyclicRotationGroup& group) {
  const bool batched = x.value().rank() == 4;
  if (!batched && x.value().rank() != 3) throw DimensionError("lifting_conv expects [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
  const auto& bs = bank.shape();
  const std::size_t n = group.order();
  if (bs.size() != 4 || bs[0] % n != 0) throw DimensionError("lifting bank " + shape_str(bs) + " not divisible by group order");
  const Var<T> xb = batched ? x : reshape(x, Shape{1, x.shape()[0], x.shape()[1], x.shape()[2]});
  const Var<T> y = conv2d(xb, bank, ConvOptions{1, bs[2] / 2, 1});
  const auto& ys = y.shape();
  const std::size_t co = bs[0] / n;
  Shape out = batched ? Shape{ys[0], co, n, ys[2], ys[3]} : Shape{co, n, ys[2], ys[3]};
  return RegularFeatureMap<T>(reshape(y, out), group);
}

template <typename T>
RegularFeatureMap<T> lifting_conv(const Var<T>& x, const SteerableFilter<T>& filter, const SteerableBasis<T>& basis) {
  return lifting_conv_bank(x, synthesize_lifting_bank(filter, basis), basis.group);
}

template <typename T>
RegularFeatureMap<T> group_conv(const RegularFeatureMap<T>& f, const SteerableFilter<T>& filter,
                                const SteerableBasis<T>& basis) {
  if (!(f.group == basis.group)) throw ContractError("group_conv: feature map group differs from filter group");
  if (filter.in_channels() != f.channels())
    throw DimensionError("group_conv: filter expects " + std::to_string(filter.in_channels()) + " input channels, got " +
                         std::to_string(f.channels()));
  const std::size_t n = f.group.order();
  const bool batched = f.batched();
  const auto& s = f.data.shape();
  const std::size_t nb = batched ? s[0] : 1;
  const Var<T> x = reshape(f.data, Shape{nb, f.channels() * n, f.height(), f.width()});
  const Var<T> bank = synthesize_group_bank(filter, basis);
  const Var<T> y = conv2d(x, bank, ConvOptions{1, basis.kernel_size / 2, n});
  const std::size_t co = filter.out_channels();
  Shape out = batched ? Shape{nb, co, n, f.height(), f.width()} : Shape{co, n, f.height(), f.width()};
  return RegularFeatureMap<T>(reshape(y, out), f.group);
}

template <typename T>
Var<T> group_max_pool(const RegularFeatureMap<T>& f) {
  return max_axis(f.data, f.group_axis());
}

template <typename T>
Var<T> spatial_max_pool(const Var<T>& x) {
  const auto& s = x.shape();
  if (s.size() < 3) throw DimensionError("spatial_max_pool expects [..,C,H,W], got " + shape_str(s));
  Shape flat(s.begin(), s.end() - 2);
  flat.push_back(s[s.size() - 2] * s[s.size() - 1]);
  return max_axis(reshape(x, flat), flat.size() - 1);
}

Rational make_rational(std::int64_t num, std::int64_t den) {
  if (den == 0) throw ContractError("rational with zero denominator");
  const std::int64_t g = std::gcd(num, den);
  Rational r{num / g, den / g};
  if (r.den < 0) r = {-r.num, -r.den};
  return r;
}

ParamRatio param_ratio(std::size_t k, std::size_t n_alpha, std::size_t n_f) {
  if (k == 0 || n_alpha == 0 || n_f == 0) throw ContractError("param_ratio arguments must be >= 1");
  const auto kk = static_cast<std::int64_t>(k * k);
  ParamRatio p;
  p.group_ratio = make_rational(static_cast<std::int64_t>(2 * n_f * n_alpha), kk);
  p.channel_factor = std::sqrt(p.group_ratio.value());
  p.lifting_ratio = make_rational(static_cast<std::int64_t>(2 * n_f), kk);
  p.lifting_factor = std::sqrt(p.lifting_ratio.value());
  return p;
}

std::size_t nearest_unit_ratio_nf(std::size_t k, std::size_t n_alpha) {
  if (k == 0 || n_alpha == 0) throw ContractError("nearest_unit_ratio_nf arguments must be >= 1");
  return std::max<std::size_t>(1, (k * k + n_alpha) / (2 * n_alpha));
}

#define RINV_INSTANTIATE_STEERABLE(T)                                                                              \
  template Tensor<T> sample_atoms<T>(std::size_t, const std::vector<BasisAtom>&, double);                          \
  template SteerableBasis<T> build_basis<T>(std::size_t, std::size_t, std::size_t);                                \
  template SteerableFilter<T> make_steerable_filter<T>(std::string, std::size_t, std::size_t,                      \
                                                       const SteerableBasis<T>&, bool, std::uint64_t);             \
  template Var<T> synthesize_lifting_bank<T>(const SteerableFilter<T>&, const SteerableBasis<T>&);                 \
  template Var<T> synthesize_group_bank<T>(const SteerableFilter<T>&, const SteerableBasis<T>&);                   \
  template RegularFeatureMap<T> lifting_conv_bank<T>(const Var<T>&, const Var<T>&, const CyclicRotationGroup&);    \
  template RegularFeatureMap<T> lifting_conv<T>(const Var<T>&, const SteerableFilter<T>&, const SteerableBasis<T>&); \
  template RegularFeatureMap<T> group_conv<T>(const RegularFeatureMap<T>&, const SteerableFilter<T>&,              \
                                              const SteerableBasis<T>&);                                           \
  template Var<T> group_max_pool<T>(const RegularFeatureMap<T>&);                                                  \
  template Var<T> spatial_max_pool<T>(const Var<T>&);

RINV_INSTANTIATE_STEERABLE(float)
RINV_INSTANTIATE_STEERABLE(double)

}  // namespace rinv
