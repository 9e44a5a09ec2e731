#include "rinv/train.hpp"

#include "rinv/ops.hpp"
#include "rinv/rng.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>

namespace rinv {
namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

template <typename T>
std::size_t count_errors(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.shape()[0] != labels.size())
    throw DimensionError("error_rate: logits " + shape_str(logits.shape()) + " vs " + std::to_string(labels.size()) +
                         " labels");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * k;
    const auto best = static_cast<int>(std::max_element(row, row + k) - row);
    if (best != labels[i]) ++wrong;
  }
  return wrong;
}

template <typename T>
std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

}  // namespace

const char* to_string(Optimizer o) { return o == Optimizer::adam ? "adam" : "sgd"; }
const char* to_string(Decay d) { return d == Decay::exponential ? "exponential" : "step"; }

IterationPlan plan_iterations(std::size_t train_size, std::size_t budget_size, std::size_t batch_size,
                              std::size_t epochs) {
  if (train_size == 0) throw ContractError("empty training set");
  if (batch_size == 0) throw ContractError("batch size must be positive");
  IterationPlan p;
  const std::size_t budget = budget_size ? budget_size : train_size;
  p.reference_batches_per_epoch = ceil_div(budget, batch_size);
  p.batches_per_epoch = ceil_div(train_size, batch_size);
  p.iterations = epochs * p.reference_batches_per_epoch;
  p.epochs = ceil_div(p.iterations, p.batches_per_epoch);
  return p;
}

double learning_rate(const TrainConfig& c, const IterationPlan& plan, std::size_t iteration) {
  const std::size_t e = iteration / std::max<std::size_t>(1, plan.reference_batches_per_epoch);
  const std::size_t every = std::max<std::size_t>(1, c.decay_epoch);
  if (c.decay == Decay::exponential)
    return c.lr * std::pow(c.decay_factor, static_cast<double>(e) / static_cast<double>(every));
  return c.lr * std::pow(c.decay_factor, static_cast<double>(e / every));
}

void write_metrics_header(std::ostream& out) { out << "epoch,split,loss,error\n"; }

void write_metrics_row(std::ostream& out, const EpochRecord& r) {
  out << fmt::format("{},{},{:.6f},{:.6f}\n", r.epoch, r.split, r.loss, r.error);
  out.flush();
}

template <typename T>
double error_rate(const Tensor<T>& logits, std::span<const int> labels) {
  if (labels.empty()) throw ContractError("error_rate on an empty set");
  return static_cast<double>(count_errors(logits, labels)) / static_cast<double>(labels.size());
}

template <typename T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw ContractError("evaluate on an empty set");
  if (batch_size == 0) throw ContractError("batch size must be positive");
  EvalResult r;
  double loss = 0;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const auto idx = range<T>(b, std::min(data.size(), b + batch_size));
    const auto labels = data.labels_at(idx);
    const Var<T> logits = model.forward(Var<T>(data.images<T>(idx)), false);
    loss += static_cast<double>(cross_entropy(logits, labels).value().item()) * static_cast<double>(idx.size());
    r.errors += count_errors(logits.value(), labels);
  }
  r.count = data.size();
  r.loss = loss / static_cast<double>(r.count);
  r.error = static_cast<double>(r.errors) / static_cast<double>(r.count);
  return r;
}

template <typename T>
double model_invariance_residual(Model<T>& model, const Dataset& data, std::size_t samples) {
  const auto idx = range<T>(0, std::min(samples, data.size()));
  if (idx.empty()) throw ContractError("invariance residual needs at least one sample");
  const Tensor<T> x = data.images<T>(idx);
  const Tensor<T> base = model.forward(Var<T>(x), false).value();
  double scale = 0, diff = 0;
  for (std::size_t i = 0; i < base.numel(); ++i) scale = std::max(scale, std::abs(static_cast<double>(base[i])));
  for (int q = 1; q < 4; ++q) {
    const Tensor<T> turned = rotate_plane(Var<T>(x), q * std::numbers::pi / 2).value();
    const Tensor<T> y = model.forward(Var<T>(turned), false).value();
    for (std::size_t i = 0; i < y.numel(); ++i)
      diff = std::max(diff, std::abs(static_cast<double>(y[i]) - static_cast<double>(base[i])));
  }
  return diff / (scale + 1e-12);
}

template <typename T>
Trainer<T>::Trainer(Model<T>& model, const Dataset& train, const Dataset* test, TrainConfig config,
                    std::ostream* metrics)
    : model_(model),
      train_(train),
      test_(test),
      config_(config),
      metrics_(metrics),
      plan_(plan_iterations(train.size(), config.budget_size, config.batch_size, config.epochs)),
      shuffle_rng_(split_seed(config.seed, SeedStream::shuffle)),
      dropout_rng_(split_seed(config.seed, SeedStream::dropout)),
      augment_rng_(split_seed(config.seed, SeedStream::augmentation)) {
  if (!(config_.lr >= 0)) throw ContractError("learning rate must be non-negative");
  if (metrics_) write_metrics_header(*metrics_);
}

template <typename T>
void Trainer<T>::regularise(Parameter<T>& p, Tensor<T>& g) const {
  const T* w = p.value().data();
  T* gd = g.data();
  if (p.reg == Regularization::elastic_net && config_.elastic_net > 0) {
    const double lam = config_.reg_constant * config_.elastic_net, a = config_.elastic_alpha;
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double s = w[i] > 0 ? 1.0 : (w[i] < 0 ? -1.0 : 0.0);
      gd[i] += static_cast<T>(lam * (a * s + 2 * (1 - a) * w[i]));
    }
  } else if (p.reg == Regularization::l2 && config_.weight_decay > 0) {
    const double lam = config_.reg_constant * config_.weight_decay;
    for (std::size_t i = 0; i < g.numel(); ++i) gd[i] += static_cast<T>(2 * lam * w[i]);
  }
}

template <typename T>
void Trainer<T>::step(std::span<const std::size_t> batch, double& loss_sum, std::size_t& errors) {
  Tensor<T> x = train_.images<T>(batch);
  if (config_.augment) x = augment_random_rotation(x, augment_rng_);
  const auto labels = train_.labels_at(batch);
  auto params = model_.params();
  for (auto* p : params) p->var.zero_grad();
  const Var<T> logits = model_.forward(Var<T>(std::move(x)), true, &dropout_rng_);
  const Var<T> loss = cross_entropy(logits, labels);
  const double value = static_cast<double>(loss.value().item());
  if (!std::isfinite(value))
    throw NumericalAbort(fmt::format("non-finite loss at epoch {} iteration {}", epoch_ + 1, iteration_ + 1));
  backward(loss);
  loss_sum += value * static_cast<double>(batch.size());
  errors += count_errors(logits.value(), labels);

  const double lr = learning_rate(config_, plan_, iteration_);
  const double t = static_cast<double>(iteration_ + 1);
  for (auto* p : params) {
    Tensor<T> g = p->var.grad();
    regularise(*p, g);
    auto& m = m1_[p->name];
    auto& v = m2_[p->name];
    if (m.shape() != g.shape()) {
      m = Tensor<T>::zeros(g.shape());
      v = Tensor<T>::zeros(g.shape());
    }
    T* w = p->mutable_value().data();
    if (config_.optimizer == Optimizer::adam) {
      const double c1 = 1 - std::pow(0.9, t), c2 = 1 - std::pow(0.999, t);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        m[i] = static_cast<T>(0.9 * m[i] + 0.1 * g[i]);
        v[i] = static_cast<T>(0.999 * v[i] + 0.001 * g[i] * g[i]);
        w[i] -= static_cast<T>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-8));
      }
    } else {
      for (std::size_t i = 0; i < g.numel(); ++i) {
        m[i] = static_cast<T>(config_.momentum * m[i] + g[i]);
        w[i] -= static_cast<T>(lr * m[i]);
      }
    }
  }
  ++iteration_;
}

template <typename T>
std::size_t Trainer<T>::run_epochs(std::size_t count) {
  std::size_t ran = 0;
  const std::size_t n = train_.size();
  while (ran < count && !done()) {
    const Archive snapshot = model_.state();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, shuffle_rng_);
    double loss_sum = 0;
    std::size_t errors = 0, seen = 0;
    try {
      for (std::size_t b = 0; b < n && !done(); b += config_.batch_size) {
        const std::size_t e = std::min(n, b + config_.batch_size);
        std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b),
                                       order.begin() + static_cast<std::ptrdiff_t>(e));
        std::sort(batch.begin(), batch.end());
        step(batch, loss_sum, errors);
        seen += batch.size();
      }
    } catch (const NumericalAbort&) {
      model_.load_state(snapshot);
      throw;
    }
    ++epoch_;
    ++ran;
    EpochRecord tr{epoch_, "train", loss_sum / static_cast<double>(seen),
                   static_cast<double>(errors) / static_cast<double>(seen)};
    history_.push_back(tr);
    if (metrics_) write_metrics_row(*metrics_, tr);
    if (test_) {
      const auto ev = evaluate(model_, *test_, config_.eval_batch);
      EpochRecord te{epoch_, "test", ev.loss, ev.error};
      history_.push_back(te);
      if (metrics_) write_metrics_row(*metrics_, te);
    }
  }
  return ran;
}

MteSummary mte(std::span<const double> errors) {
  if (errors.empty()) throw ContractError("mte over zero runs");
  MteSummary s;
  s.runs = errors.size();
  s.mean = std::accumulate(errors.begin(), errors.end(), 0.0) / static_cast<double>(s.runs);
  if (s.runs > 1) {
    double ss = 0;
    for (double e : errors) ss += (e - s.mean) * (e - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.runs - 1));
  }
  return s;
}

void write_summary(std::ostream& out, const RunSummary& s) {
  out << fmt::format("mte = {:.6f}\n", s.mte);
  out << fmt::format("std = {:.6f}\n", s.std);
  out << fmt::format("seeds = {}\n", s.seeds);
  out << fmt::format("params = {}\n", s.params);
  out << fmt::format("invariance_residual = {:.6e}\n", s.invariance_residual);
  out << fmt::format("seconds = {:.3f}\n", s.seconds);
  std::string errs;
  for (std::size_t i = 0; i < s.errors.size(); ++i) errs += fmt::format("{}{:.6f}", i ? " " : "", s.errors[i]);
  out << "errors = " << errs << "\n";
}

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, const std::string& config_text) {
  Archive a = model.state();
  a.config = config_text;
  save_archive(path, a);
}

template double error_rate<float>(const Tensor<float>&, std::span<const int>);
template double error_rate<double>(const Tensor<double>&, std::span<const int>);
template EvalResult evaluate<float>(Model<float>&, const Dataset&, std::size_t);
template EvalResult evaluate<double>(Model<double>&, const Dataset&, std::size_t);
template double model_invariance_residual<float>(Model<float>&, const Dataset&, std::size_t);
template double model_invariance_residual<double>(Model<double>&, const Dataset&, std::size_t);
template class Trainer<float>;
template class Trainer<double>;
template void save_checkpoint<float>(const std::string&, const Model<float>&, const std::string&);
template void save_checkpoint<double>(const std::string&, const Model<double>&, const std::string&);

}  // namespace rinv
