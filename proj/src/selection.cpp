#include "rinv/selection.hpp"

#include "rinv/ops.hpp"
#include "rinv/rng.hpp"
#include "rinv/serialize.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace rinv {
namespace {

namespace pt = boost::property_tree;

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += fmt::format("{}{:.17g}", i ? " " : "", v[i]);
  return s;
}

std::vector<double> split_numbers(const std::string& text, const std::string& where) {
  std::istringstream in(text);
  std::vector<double> v;
  std::string tok;
  while (in >> tok) {
    std::size_t used = 0;
    double d = 0;
    try {
      d = std::stod(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw FormatError(where + ": not a number: " + tok, 0);
    v.push_back(d);
  }
  return v;
}

}  // namespace

const char* to_string(PoolInit p) { return p == PoolInit::random ? "random" : "catalog"; }

const char* to_string(SelectionAlgorithm a) {
  switch (a) {
    case SelectionAlgorithm::random: return "random";
    case SelectionAlgorithm::magnitude: return "magnitude";
    case SelectionAlgorithm::connectivity: return "connectivity";
  }
  return "?";
}

const char* to_string(ScoreKind s) {
  switch (s) {
    case ScoreKind::none: return "none";
    case ScoreKind::magnitude: return "magnitude";
    case ScoreKind::sensitivity: return "sensitivity";
  }
  return "?";
}

void validate(const SelectionConfig& c) {
  if (c.pool == 0) throw ContractError("selection: pool size must be positive");
  if (c.target > c.pool)
    throw ContractError(fmt::format("selection: target {} exceeds pool size {}", c.target, c.pool));
  if (c.factors == 0) throw ContractError("selection: monomials need at least one factor");
  if (c.distance_set.empty()) throw ContractError("selection: empty distance set");
  for (double d : c.distance_set)
    if (!(d >= 0) || !std::isfinite(d)) throw ContractError("selection: distances must be finite and non-negative");
  if (c.algorithm == SelectionAlgorithm::random) return;
  if (c.schedule.empty()) throw ContractError("selection: empty schedule");
  if (c.schedule.front().keep > c.pool)
    throw ContractError(fmt::format("selection: first keep-count {} exceeds pool size {}", c.schedule.front().keep, c.pool));
  for (std::size_t i = 1; i < c.schedule.size(); ++i)
    if (c.schedule[i].keep >= c.schedule[i - 1].keep)
      throw ContractError("selection: schedule keep-counts must strictly decrease");
  if (c.schedule.back().keep != c.target)
    throw ContractError(fmt::format("selection: schedule ends at {} but target is {}", c.schedule.back().keep, c.target));
}

std::vector<MonomialSpec> init_pool(const SelectionConfig& c, std::size_t group_order) {
  if (c.pool == 0) throw ContractError("selection: pool size must be positive");
  if (c.factors == 0 || c.distance_set.empty()) throw ContractError("selection: factors and distances required");
  std::mt19937_64 rng(split_seed(c.seed, SeedStream::selection));
  const double bmax = static_cast<double>(group_order) / static_cast<double>(c.factors);
  const std::size_t nd = c.distance_set.size();
  auto exponents = [&] {
    std::vector<double> b(c.factors);
    for (auto& v : b) v = uniform(rng, 0.0, bmax);
    return b;
  };
  std::vector<MonomialSpec> pool;
  if (c.init == PoolInit::catalog) {
    std::size_t combos = 1;
    for (std::size_t i = 1; i < c.factors; ++i) {
      combos *= nd;
      if (combos > c.pool) break;
    }
    if (combos > c.pool)
      throw ContractError(fmt::format("selection: catalog of distance tuples exceeds pool size {}", c.pool));
    for (std::size_t k = 0; k < combos; ++k) {
      MonomialSpec s;
      s.distances.push_back(0.0);
      std::size_t r = k;
      std::vector<double> tail(c.factors - 1);
      for (std::size_t i = c.factors - 1; i-- > 0;) {
        tail[i] = c.distance_set[r % nd];
        r /= nd;
      }
      s.distances.insert(s.distances.end(), tail.begin(), tail.end());
      s.exponents = exponents();
      pool.push_back(std::move(s));
    }
  }
  while (pool.size() < c.pool) {
    MonomialSpec s;
    s.distances.push_back(0.0);
    for (std::size_t i = 1; i < c.factors; ++i) s.distances.push_back(c.distance_set[uniform_index(rng, nd)]);
    s.exponents = exponents();
    pool.push_back(std::move(s));
  }
  return pool;
}

std::vector<std::size_t> select_random(std::size_t pool, std::size_t n_m, std::uint64_t seed) {
  if (n_m > pool) throw ContractError(fmt::format("select_random: n_m {} exceeds pool size {}", n_m, pool));
  std::vector<std::size_t> idx(pool);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(split_seed(seed, SeedStream::selection));
  shuffle(idx, rng);
  idx.resize(n_m);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
PruningScore magnitude_scores(const Tensor<T>& w, std::size_t monomials) {
  if (w.rank() != 2 || monomials == 0 || w.shape()[0] % monomials != 0)
    throw ContractError("magnitude_scores: weight " + shape_str(w.shape()) + " does not group into " +
                        std::to_string(monomials) + " monomials");
  const std::size_t channels = w.shape()[0] / monomials, out = w.shape()[1];
  PruningScore s;
  s.kind = ScoreKind::magnitude;
  s.values.resize(monomials);
  for (std::size_t j = 0; j < monomials; ++j) {
    const T* row = w.data() + j * channels * out;
    double sum = 0;
    for (std::size_t i = 0; i < channels * out; ++i) sum += std::abs(static_cast<double>(row[i]));
    s.values[j] = sum / static_cast<double>(channels * out);
  }
  return s;
}

template <typename T>
PruningScore connectivity_scores(Model<T>& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0 || batch_size == 0) throw ContractError("connectivity_scores: empty data or batch");
  const std::size_t m = model.monomial_head().count();
  Var<T> mask(Tensor<T>::ones({m}), true);
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    std::vector<std::size_t> idx(std::min(data.size(), b + batch_size) - b);
    std::iota(idx.begin(), idx.end(), b);
    const Var<T> logits = model.forward(Var<T>(data.images<T>(idx)), false, nullptr, &mask);
    backward(cross_entropy(logits, data.labels_at(idx)));
  }
  for (auto* p : model.params()) p->var.zero_grad();
  PruningScore s;
  s.kind = ScoreKind::sensitivity;
  const Tensor<T> g = mask.grad();
  for (std::size_t j = 0; j < m; ++j) s.values.push_back(std::abs(static_cast<double>(g[j])));
  return s;
}

std::vector<std::size_t> top_k(const std::vector<double>& scores, std::size_t keep) {
  if (keep > scores.size()) throw ContractError("top_k: keep exceeds score count");
  for (double v : scores)
    if (!std::isfinite(v)) throw ContractError("top_k: non-finite score");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
std::uint64_t surviving_checksum(Model<T>& model, const std::vector<std::size_t>& keep) {
  auto& head = model.monomial_head();
  const Tensor<T>& b = head.exponents.value();
  const Tensor<T>& w = model.first_dense_weight().value();
  const std::size_t mf = head.factors(), rows = w.shape()[0] / head.count() * w.shape()[1];
  Tensor<T> bk({keep.size(), mf}), wk({keep.size(), rows});
  for (std::size_t i = 0; i < keep.size(); ++i) {
    std::copy_n(b.data() + keep[i] * mf, mf, bk.data() + i * mf);
    std::copy_n(w.data() + keep[i] * rows, rows, wk.data() + i * rows);
  }
  return checksum(bk) ^ (checksum(wk) * 0x9e3779b97f4a7c15ULL);
}

template <typename T>
SelectionResult select_monomials(Model<T>& model, Trainer<T>& trainer, const Dataset& score_data,
                                 const SelectionConfig& config) {
  validate(config);
  const std::size_t pool = model.monomial_head().count();
  if (pool != config.pool)
    throw ContractError(fmt::format("selection: model has {} monomials, config pool is {}", pool, config.pool));
  std::vector<std::size_t> origin(pool);
  std::iota(origin.begin(), origin.end(), 0);
  std::vector<double> last_scores(pool, 0.0);
  SelectionResult result;

  auto prune = [&](const std::vector<std::size_t>& keep, const std::vector<double>& scores) {
    PruneRecord rec;
    rec.epoch = trainer.epoch();
    rec.before = model.monomial_head().count();
    rec.after = keep.size();
    rec.checksum_before = surviving_checksum(model, keep);
    model.keep_monomials(keep);
    std::vector<std::size_t> all(keep.size());
    std::iota(all.begin(), all.end(), 0);
    rec.checksum_after = surviving_checksum(model, all);
    std::vector<std::size_t> o;
    std::vector<double> s;
    for (std::size_t k : keep) {
      o.push_back(origin[k]);
      s.push_back(scores[k]);
    }
    origin = std::move(o);
    last_scores = std::move(s);
    result.steps.push_back(rec);
  };

  if (config.algorithm == SelectionAlgorithm::random) {
    prune(select_random(pool, config.target, config.seed), last_scores);
  } else {
    result.kind = config.algorithm == SelectionAlgorithm::magnitude ? ScoreKind::magnitude : ScoreKind::sensitivity;
    for (const auto& step : config.schedule) {
      trainer.run_epochs(step.epochs);
      const PruningScore s = config.algorithm == SelectionAlgorithm::magnitude
                                 ? magnitude_scores(model.first_dense_weight().value(), model.monomial_head().count())
                                 : connectivity_scores(model, score_data, config.score_batch);
      prune(top_k(s.values, step.keep), s.values);
    }
  }
  const auto specs = model.monomial_head().specs();
  for (std::size_t i = 0; i < specs.size(); ++i) result.monomials.push_back({specs[i], origin[i], last_scores[i]});
  return result;
}

void write_sidecar(std::ostream& out, const SelectionResult& r) {
  pt::ptree tree;
  pt::ptree head;
  head.put("score", to_string(r.kind));
  head.put("count", r.monomials.size());
  tree.put_child(pt::ptree::path_type("selection", '/'), head);
  for (std::size_t i = 0; i < r.monomials.size(); ++i) {
    const auto& m = r.monomials[i];
    pt::ptree sec;
    sec.put("origin", m.origin);
    sec.put("score", fmt::format("{:.17g}", m.score));
    sec.put("distances", join(m.spec.distances));
    sec.put("exponents", join(m.spec.exponents));
    tree.put_child(pt::ptree::path_type("monomial." + std::to_string(i), '/'), sec);
  }
  pt::write_ini(out, tree);
}

SelectionResult read_sidecar(std::istream& in) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw FormatError("monomial sidecar: " + e.message() + " at line " + std::to_string(e.line()), 0);
  }
  SelectionResult r;
  const auto count = tree.get_optional<std::size_t>(pt::ptree::path_type("selection/count", '/'));
  if (!count) throw FormatError("monomial sidecar: missing [selection] count", 0);
  const std::string kind = tree.get(pt::ptree::path_type("selection/score", '/'), std::string("none"));
  r.kind = kind == "magnitude" ? ScoreKind::magnitude : kind == "sensitivity" ? ScoreKind::sensitivity : ScoreKind::none;
  for (std::size_t i = 0; i < *count; ++i) {
    const std::string name = "monomial." + std::to_string(i);
    const auto sec = tree.get_child_optional(pt::ptree::path_type(name, '/'));
    if (!sec) throw FormatError("monomial sidecar: missing section [" + name + "]", 0);
    SelectedMonomial m;
    try {
      m.origin = sec->get<std::size_t>("origin");
      m.score = sec->get<double>("score");
      m.spec.distances = split_numbers(sec->get<std::string>("distances"), name + ".distances");
      m.spec.exponents = split_numbers(sec->get<std::string>("exponents"), name + ".exponents");
    } catch (const pt::ptree_error& e) {
      throw FormatError("monomial sidecar [" + name + "]: " + e.what(), 0);
    }
    if (m.spec.distances.size() != m.spec.exponents.size() || m.spec.distances.empty())
      throw FormatError("monomial sidecar [" + name + "]: distances and exponents differ in length", 0);
    r.monomials.push_back(std::move(m));
  }
  return r;
}

void save_sidecar(const std::string& path, const SelectionResult& result) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_sidecar(out, result);
  if (!out) throw std::runtime_error("write failed: " + path);
}

SelectionResult load_sidecar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return read_sidecar(in);
}

template PruningScore magnitude_scores<float>(const Tensor<float>&, std::size_t);
template PruningScore magnitude_scores<double>(const Tensor<double>&, std::size_t);
template PruningScore connectivity_scores<float>(Model<float>&, const Dataset&, std::size_t);
template PruningScore connectivity_scores<double>(Model<double>&, const Dataset&, std::size_t);
template std::uint64_t surviving_checksum<float>(Model<float>&, const std::vector<std::size_t>&);
template std::uint64_t surviving_checksum<double>(Model<double>&, const std::vector<std::size_t>&);
template SelectionResult select_monomials<float>(Model<float>&, Trainer<float>&, const Dataset&, const SelectionConfig&);
template SelectionResult select_monomials<double>(Model<double>&, Trainer<double>&, const Dataset&,
                                                  const SelectionConfig&);

}  // namespace rinv
