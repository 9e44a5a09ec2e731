#include "rinv/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace rinv {
namespace {

namespace pt = boost::property_tree;

std::vector<std::string> tokens(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string t;
  while (in >> t) out.push_back(t);
  return out;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t") - a + 1);
}

std::size_t to_size(const std::string& s) {
  const std::string t = trim(s);
  if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos)
    throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
  return std::stoull(t);
}

double to_double(const std::string& s) {
  const std::string t = trim(s);
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (t.empty() || used != t.size() || !std::isfinite(v)) throw std::invalid_argument("expected a number, got '" + s + "'");
  return v;
}

bool to_bool(const std::string& s) {
  const std::string t = trim(s);
  if (t == "true") return true;
  if (t == "false") return false;
  throw std::invalid_argument("expected true or false, got '" + s + "'");
}

std::vector<std::size_t> to_sizes(const std::string& s) {
  std::vector<std::size_t> v;
  for (const auto& t : tokens(s)) v.push_back(to_size(t));
  return v;
}

std::vector<double> to_doubles(const std::string& s) {
  std::vector<double> v;
  for (const auto& t : tokens(s)) v.push_back(to_double(t));
  return v;
}

template <typename E>
E to_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> choices) {
  const std::string t = trim(s);
  std::string names;
  for (const auto& [name, value] : choices) {
    if (t == name) return value;
    names += (names.empty() ? "" : "|") + std::string(name);
  }
  throw std::invalid_argument("expected one of " + names + ", got '" + s + "'");
}

std::vector<std::vector<double>> to_groups(const std::string& s) {
  std::vector<std::vector<double>> out;
  std::string part;
  std::istringstream in(s);
  while (std::getline(in, part, '|')) out.push_back(to_doubles(part));
  return out;
}

std::vector<PruneStep> to_schedule(const std::string& s) {
  std::vector<PruneStep> out;
  for (const auto& t : tokens(s)) {
    const auto colon = t.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("schedule steps are epochs:keep, got '" + t + "'");
    out.push_back({to_size(t.substr(0, colon)), to_size(t.substr(colon + 1))});
  }
  return out;
}

class Section {
 public:
  Section(const pt::ptree& root, std::string name) : name_(std::move(name)) {
    if (auto c = root.get_child_optional(pt::ptree::path_type(name_, '/'))) tree_ = &*c;
  }

  void field(const char* key, const std::function<void(const std::string&)>& parse) {
    used_.insert(key);
    if (!tree_) return;
    const auto v = tree_->get_optional<std::string>(pt::ptree::path_type(key, '/'));
    if (!v) return;
    try {
      parse(*v);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(name_ + "." + key, e.what());
    }
  }

  void finish() const {
    if (!tree_) return;
    for (const auto& [key, child] : *tree_) {
      if (!child.empty()) throw ConfigError(name_ + "." + key, "nested keys are not allowed");
      if (!used_.count(key)) throw ConfigError(name_ + "." + key, "unknown key");
    }
  }

 private:
  std::string name_;
  const pt::ptree* tree_ = nullptr;
  std::set<std::string> used_;
};

void require(bool ok, const std::string& path, const std::string& message) {
  if (!ok) throw ConfigError(path, message);
}

void validate(const RunConfig& c) {
  const auto& d = c.data;
  if (d.source == DataSource::idx)
    for (const auto& [k, v] : {std::pair<const char*, const std::string*>{"train_images", &d.train_images},
                               {"train_labels", &d.train_labels}, {"test_images", &d.test_images},
                               {"test_labels", &d.test_labels}})
      require(!v->empty(), std::string("data.") + k, "required for the idx source");
  if (d.source == DataSource::synthetic) {
    require(d.classes >= 2 && d.classes <= kGlyphCount, "data.classes",
            fmt::format("synthetic data has 2 to {} classes", kGlyphCount));
    require(d.train_size >= d.classes, "data.train_size", "needs at least one sample per class");
    require(d.test_size >= 1, "data.test_size", "must be positive");
    require(d.image_size >= 8, "data.image_size", "must be at least 8");
  }
  require(d.subset_fraction >= 0 && d.subset_fraction <= 1, "data.subset_fraction", "must lie in [0, 1]");
  require(d.subset_count == 0 || d.subset_fraction == 0, "data.subset_count", "set either a count or a fraction");

  const auto& m = c.model;
  require(!m.channels.empty(), "model.channels", "at least one convolution layer");
  require(m.kernel % 2 == 1, "model.kernel", "must be odd");
  require(m.n_alpha >= 1, "model.n_alpha", "must be positive");
  require(m.n_f >= 1, "model.n_f", "must be positive");
  require(m.dropout >= 0 && m.dropout < 1, "model.dropout", "must lie in [0, 1)");
  require(c.precision == 32 || c.precision == 64, "model.precision", "must be 32 or 64");
  const auto& mono = m.head.monomials;
  for (const auto& s : mono) {
    require(s.distances.size() == s.exponents.size(), "model.monomial_exponents", "one exponent per distance");
    require(!s.distances.empty() && s.distances.front() == 0, "model.monomial_distances", "each monomial starts at 0");
    require(s.distances.size() == mono.front().distances.size(), "model.monomial_distances",
            "all monomials need the same factor count");
  }

  const auto& t = c.train;
  require(t.lr >= 0, "train.lr", "must be non-negative");
  require(t.batch_size >= 1, "train.batch_size", "must be positive");
  require(t.decay_factor > 0, "train.decay_factor", "must be positive");
  require(t.decay_epoch >= 1, "train.decay_epoch", "must be positive");
  require(t.elastic_net >= 0, "train.elastic_net", "must be non-negative");
  require(t.elastic_alpha >= 0 && t.elastic_alpha <= 1, "train.elastic_alpha", "must lie in [0, 1]");
  require(t.weight_decay >= 0, "train.weight_decay", "must be non-negative");
  require(t.reg_constant >= 0, "train.reg_constant", "must be non-negative");
  require(t.eval_batch >= 1, "train.eval_batch", "must be positive");

  try {
    validate(c.selection);
  } catch (const ContractError& e) {
    throw ConfigError("selection.schedule", e.what());
  }
  require(c.verify.n_alpha >= 1, "verify.n_alpha", "must be positive");
  require(c.verify.samples >= 1, "verify.samples", "must be positive");
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += fmt::format("{}{}", i ? " " : "", v[i]);
  return s;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += fmt::format("{}{}", i ? " " : "", v[i]);
  return s;
}

const char* head_name(HeadKind h) { return to_string(h); }

}  // namespace

RunConfig parse_config(std::istream& in) {
  pt::ptree root;
  try {
    pt::read_ini(in, root);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config", e.message() + " at line " + std::to_string(e.line()));
  }
  const std::set<std::string> sections{"data", "model", "train", "selection", "verify"};
  for (const auto& [name, child] : root)
    if (!sections.count(name))
      throw ConfigError(name, child.empty() ? "keys must live in a section" : "unknown section");

  RunConfig c;
  Section data(root, "data");
  auto& d = c.data;
  data.field("source", [&](auto& v) { d.source = to_enum<DataSource>(v, {{"synthetic", DataSource::synthetic}, {"idx", DataSource::idx}}); });
  data.field("train_images", [&](auto& v) { d.train_images = trim(v); });
  data.field("train_labels", [&](auto& v) { d.train_labels = trim(v); });
  data.field("test_images", [&](auto& v) { d.test_images = trim(v); });
  data.field("test_labels", [&](auto& v) { d.test_labels = trim(v); });
  data.field("train_size", [&](auto& v) { d.train_size = to_size(v); });
  data.field("test_size", [&](auto& v) { d.test_size = to_size(v); });
  data.field("image_size", [&](auto& v) { d.image_size = to_size(v); });
  data.field("classes", [&](auto& v) { d.classes = to_size(v); });
  data.field("subset_count", [&](auto& v) { d.subset_count = to_size(v); });
  data.field("subset_fraction", [&](auto& v) { d.subset_fraction = to_double(v); });
  data.field("augmentation", [&](auto& v) {
    d.augmentation = to_enum<Augmentation>(v, {{"none", Augmentation::none}, {"random-rotation", Augmentation::random_rotation}});
  });
  data.finish();

  Section model(root, "model");
  auto& m = c.model;
  std::vector<std::vector<double>> mono_d, mono_b;
  model.field("backbone", [&](auto& v) { m.backbone = to_enum<Backbone>(v, {{"steerable", Backbone::steerable}, {"plain", Backbone::plain}}); });
  model.field("channels", [&](auto& v) { m.channels = to_sizes(v); });
  model.field("pool_after", [&](auto& v) { m.pool_after = to_sizes(v); });
  model.field("kernel", [&](auto& v) { m.kernel = to_size(v); });
  model.field("n_alpha", [&](auto& v) { m.n_alpha = to_size(v); });
  model.field("n_f", [&](auto& v) { m.n_f = to_size(v); });
  model.field("rescale", [&](auto& v) { m.rescale = to_bool(v); });
  model.field("head", [&](auto& v) {
    m.head.kind = to_enum<HeadKind>(v, {{"max-pool", HeadKind::max_pool}, {"monomial", HeadKind::monomial},
                                        {"global-ws", HeadKind::ws_global}, {"local-ws", HeadKind::ws_local},
                                        {"mlp", HeadKind::mlp}, {"sa", HeadKind::sa}});
  });
  model.field("head_channels", [&](auto& v) { m.head.out_channels = to_size(v); });
  model.field("ws_extent", [&](auto& v) { m.head.ws_extent = to_size(v); });
  model.field("mlp_patch", [&](auto& v) { m.head.mlp_patch = to_size(v); });
  model.field("mlp_hidden", [&](auto& v) { m.head.mlp_hidden = to_sizes(v); });
  model.field("sa_channels", [&](auto& v) { m.head.sa_channels = to_size(v); });
  model.field("sa_heads", [&](auto& v) { m.head.sa_heads = to_size(v); });
  model.field("monomial_distances", [&](auto& v) { mono_d = to_groups(v); });
  model.field("monomial_exponents", [&](auto& v) { mono_b = to_groups(v); });
  model.field("monomial_sidecar", [&](auto& v) { c.monomial_sidecar = trim(v); });
  model.field("dense", [&](auto& v) { m.dense = to_sizes(v); });
  model.field("match_budget", [&](auto& v) { m.match_budget = to_bool(v); });
  model.field("dropout", [&](auto& v) { m.dropout = to_double(v); });
  model.field("batch_norm", [&](auto& v) { m.batch_norm = to_bool(v); });
  model.field("precision", [&](auto& v) { c.precision = to_size(v); });
  model.finish();
  if (mono_d.size() != mono_b.size())
    throw ConfigError("model.monomial_exponents", "one exponent group per distance group");
  for (std::size_t i = 0; i < mono_d.size(); ++i) m.head.monomials.push_back({mono_d[i], mono_b[i]});
  m.in_channels = 1;
  m.image_size = d.image_size;
  m.classes = d.classes;

  Section train(root, "train");
  auto& t = c.train;
  train.field("optimizer", [&](auto& v) { t.optimizer = to_enum<Optimizer>(v, {{"adam", Optimizer::adam}, {"sgd", Optimizer::sgd}}); });
  train.field("lr", [&](auto& v) { t.lr = to_double(v); });
  train.field("decay", [&](auto& v) { t.decay = to_enum<Decay>(v, {{"exponential", Decay::exponential}, {"step", Decay::step}}); });
  train.field("decay_factor", [&](auto& v) { t.decay_factor = to_double(v); });
  train.field("decay_epoch", [&](auto& v) { t.decay_epoch = to_size(v); });
  train.field("batch_size", [&](auto& v) { t.batch_size = to_size(v); });
  train.field("epochs", [&](auto& v) { t.epochs = to_size(v); });
  train.field("budget_size", [&](auto& v) { t.budget_size = to_size(v); });
  train.field("elastic_net", [&](auto& v) { t.elastic_net = to_double(v); });
  train.field("elastic_alpha", [&](auto& v) { t.elastic_alpha = to_double(v); });
  train.field("weight_decay", [&](auto& v) { t.weight_decay = to_double(v); });
  train.field("reg_constant", [&](auto& v) { t.reg_constant = to_double(v); });
  train.field("momentum", [&](auto& v) { t.momentum = to_double(v); });
  train.field("eval_batch", [&](auto& v) { t.eval_batch = to_size(v); });
  train.field("smoke_error", [&](auto& v) { t.smoke_error = to_double(v); });
  train.field("seed", [&](auto& v) { t.seed = to_size(v); });
  train.finish();
  t.augment = d.augmentation == Augmentation::random_rotation;

  Section sel(root, "selection");
  auto& s = c.selection;
  sel.field("pool", [&](auto& v) { s.pool = to_size(v); });
  sel.field("target", [&](auto& v) { s.target = to_size(v); });
  sel.field("init", [&](auto& v) { s.init = to_enum<PoolInit>(v, {{"random", PoolInit::random}, {"catalog", PoolInit::catalog}}); });
  sel.field("algorithm", [&](auto& v) {
    s.algorithm = to_enum<SelectionAlgorithm>(v, {{"random", SelectionAlgorithm::random},
                                                   {"magnitude", SelectionAlgorithm::magnitude},
                                                   {"connectivity", SelectionAlgorithm::connectivity}});
  });
  sel.field("factors", [&](auto& v) { s.factors = to_size(v); });
  sel.field("distances", [&](auto& v) { s.distance_set = to_doubles(v); });
  sel.field("schedule", [&](auto& v) { s.schedule = to_schedule(v); });
  sel.field("score_batch", [&](auto& v) { s.score_batch = to_size(v); });
  sel.finish();
  s.seed = t.seed;

  Section ver(root, "verify");
  ver.field("n_alpha", [&](auto& v) { c.verify.n_alpha = to_size(v); });
  ver.field("samples", [&](auto& v) { c.verify.samples = to_size(v); });
  ver.field("seed", [&](auto& v) { c.verify.seed = to_size(v); });
  ver.finish();

  validate(c);
  return c;
}

RunConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path);
  return parse_config(in);
}

std::string canonical(const RunConfig& c) {
  std::string o;
  auto kv = [&](const char* k, const std::string& v) { o += fmt::format("{} = {}\n", k, v); };
  auto num = [](double v) { return fmt::format("{}", v); };
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  const auto& d = c.data;
  o += "[data]\n";
  kv("source", d.source == DataSource::synthetic ? "synthetic" : "idx");
  kv("train_images", d.train_images);
  kv("train_labels", d.train_labels);
  kv("test_images", d.test_images);
  kv("test_labels", d.test_labels);
  kv("train_size", std::to_string(d.train_size));
  kv("test_size", std::to_string(d.test_size));
  kv("image_size", std::to_string(d.image_size));
  kv("classes", std::to_string(d.classes));
  kv("subset_count", std::to_string(d.subset_count));
  kv("subset_fraction", num(d.subset_fraction));
  kv("augmentation", d.augmentation == Augmentation::none ? "none" : "random-rotation");

  const auto& m = c.model;
  o += "\n[model]\n";
  kv("backbone", to_string(m.backbone));
  kv("channels", join_sizes(m.channels));
  kv("pool_after", join_sizes(m.pool_after));
  kv("kernel", std::to_string(m.kernel));
  kv("n_alpha", std::to_string(m.n_alpha));
  kv("n_f", std::to_string(m.n_f));
  kv("rescale", b(m.rescale));
  kv("head", head_name(m.head.kind));
  kv("head_channels", std::to_string(m.head.out_channels));
  kv("ws_extent", std::to_string(m.head.ws_extent));
  kv("mlp_patch", std::to_string(m.head.mlp_patch));
  kv("mlp_hidden", join_sizes(m.head.mlp_hidden));
  kv("sa_channels", std::to_string(m.head.sa_channels));
  kv("sa_heads", std::to_string(m.head.sa_heads));
  std::string md, mb;
  for (std::size_t i = 0; i < m.head.monomials.size(); ++i) {
    md += (i ? " | " : "") + join_doubles(m.head.monomials[i].distances);
    mb += (i ? " | " : "") + join_doubles(m.head.monomials[i].exponents);
  }
  kv("monomial_distances", md);
  kv("monomial_exponents", mb);
  kv("monomial_sidecar", c.monomial_sidecar);
  kv("dense", join_sizes(m.dense));
  kv("match_budget", b(m.match_budget));
  kv("dropout", num(m.dropout));
  kv("batch_norm", b(m.batch_norm));
  kv("precision", std::to_string(c.precision));

  const auto& t = c.train;
  o += "\n[train]\n";
  kv("optimizer", to_string(t.optimizer));
  kv("lr", num(t.lr));
  kv("decay", to_string(t.decay));
  kv("decay_factor", num(t.decay_factor));
  kv("decay_epoch", std::to_string(t.decay_epoch));
  kv("batch_size", std::to_string(t.batch_size));
  kv("epochs", std::to_string(t.epochs));
  kv("budget_size", std::to_string(t.budget_size));
  kv("elastic_net", num(t.elastic_net));
  kv("elastic_alpha", num(t.elastic_alpha));
  kv("weight_decay", num(t.weight_decay));
  kv("reg_constant", num(t.reg_constant));
  kv("momentum", num(t.momentum));
  kv("eval_batch", std::to_string(t.eval_batch));
  kv("smoke_error", num(t.smoke_error));
  kv("seed", std::to_string(t.seed));

  const auto& s = c.selection;
  o += "\n[selection]\n";
  kv("pool", std::to_string(s.pool));
  kv("target", std::to_string(s.target));
  kv("init", to_string(s.init));
  kv("algorithm", to_string(s.algorithm));
  kv("factors", std::to_string(s.factors));
  kv("distances", join_doubles(s.distance_set));
  std::string sched;
  for (std::size_t i = 0; i < s.schedule.size(); ++i)
    sched += fmt::format("{}{}:{}", i ? " " : "", s.schedule[i].epochs, s.schedule[i].keep);
  kv("schedule", sched);
  kv("score_batch", std::to_string(s.score_batch));

  o += "\n[verify]\n";
  kv("n_alpha", std::to_string(c.verify.n_alpha));
  kv("samples", std::to_string(c.verify.samples));
  kv("seed", std::to_string(c.verify.seed));
  return o;
}

}  // namespace rinv
