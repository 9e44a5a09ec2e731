#include "rinv/run.hpp"

#include "rinv/rng.hpp"

#include <fmt/format.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <streambuf>

namespace rinv {
namespace {

namespace fs = std::filesystem;

/// Writes to two stream buffers at once.
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (c == EOF) return !EOF;
    const bool ok = a_->sputc(static_cast<char>(c)) != EOF && (!b_ || b_->sputc(static_cast<char>(c)) != EOF);
    return ok ? c : EOF;
  }
  std::streamsize xsputn(const char* s, std::streamsize n) override {
    const auto w = a_->sputn(s, n);
    if (b_) b_->sputn(s, n);
    return w;
  }
  int sync() override { return (a_->pubsync() == 0 && (!b_ || b_->pubsync() == 0)) ? 0 : -1; }

 private:
  std::streambuf *a_, *b_;
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

template <typename T>
RunResult run_impl(const RunConfig& config, std::uint64_t seed, const RunOptions& opt) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig rc = config;
  rc.train.seed = seed;
  rc.selection.seed = seed;
  const DataSplits data = load_data(rc, seed);
  if (data.train.size() != data.full_train_size && rc.train.budget_size == 0) rc.train.budget_size = data.full_train_size;

  ModelConfig mc = rc.model;
  if (opt.select && mc.head.kind != HeadKind::monomial)
    throw ConfigError("model.head", "monomial selection needs a monomial head");
  if (mc.head.kind == HeadKind::monomial)
    mc.head.monomials = initial_monomials(rc, opt.select ? rc.selection.pool : rc.selection.target, seed);
  Model<T> model(mc, split_seed(seed, SeedStream::init));

  std::ostringstream csv;
  TeeBuf tee(csv.rdbuf(), opt.log ? opt.log->rdbuf() : nullptr);
  std::ostream metrics(&tee);
  Trainer<T> trainer(model, data.train, &data.test, rc.train, &metrics);
  if (opt.log && trainer.plan().epochs != rc.train.epochs)
    *opt.log << fmt::format("# subset of {} samples: {} epochs ({} iterations, as for {} samples x {} epochs)\n",
                            data.train.size(), trainer.plan().epochs, trainer.plan().iterations,
                            data.full_train_size, rc.train.epochs);

  fs::path dir;
  if (!opt.out_dir.empty()) {
    dir = opt.out_dir;
    fs::create_directories(dir);
  }
  RunResult r;
  auto checkpoint_config = [&] {
    RunConfig ck = rc;
    ck.model = model.config();
    ck.monomial_sidecar.clear();
    return canonical(ck);
  };

  try {
    if (opt.select) {
      r.selection = select_monomials(model, trainer, data.train, rc.selection);
      if (opt.log)
        for (const auto& s : r.selection->steps)
          *opt.log << fmt::format("# pruned after epoch {}: {} -> {} monomials, surviving weights {}\n", s.epoch, s.before,
                                  s.after, s.continuous() ? "unchanged" : "CHANGED");
    }
    trainer.run();
  } catch (const NumericalAbort&) {
    if (!dir.empty()) {
      write_file(dir / "metrics.csv", csv.str());
      save_checkpoint((dir / "checkpoint.rinv").string(), model, checkpoint_config());
    }
    throw;
  }

  const auto ev = evaluate(model, data.test, rc.train.eval_batch);
  r.test_error = ev.error;
  r.test_loss = ev.loss;
  r.params = model.parameter_count();
  r.invariance_residual = model_invariance_residual(model, data.test);
  r.plan = trainer.plan();
  r.epochs_run = trainer.epoch();
  r.history = trainer.history();
  r.metrics_csv = csv.str();
  r.checkpoint_config = checkpoint_config();
  r.smoke_flag = r.test_error > rc.train.smoke_error;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!dir.empty()) {
    write_file(dir / "metrics.csv", r.metrics_csv);
    write_file(dir / "config.ini", r.checkpoint_config);
    save_checkpoint((dir / "checkpoint.rinv").string(), model, r.checkpoint_config);
    std::ostringstream summary;
    write_summary(summary, RunSummary{r.test_error, 0.0, 1, r.params, r.invariance_residual, r.seconds, {r.test_error}});
    write_file(dir / "summary.txt", summary.str());
    if (r.selection) save_sidecar((dir / "monomials.ini").string(), *r.selection);
  }
  return r;
}

template <typename T>
EvalResult evaluate_impl(const Archive& archive, const RunConfig& config, const Dataset& data) {
  Model<T> model(config.model, 0);
  model.load_state(archive);
  return evaluate(model, data, config.train.eval_batch);
}

}  // namespace

DataSplits load_data(const RunConfig& c, std::uint64_t seed) {
  DataSplits d;
  const std::uint64_t data_seed = split_seed(seed, SeedStream::data);
  if (c.data.source == DataSource::synthetic) {
    d.train = synth_shapes(c.data.train_size, c.data.image_size, c.data.classes, data_seed);
    d.test = synth_shapes(c.data.test_size, c.data.image_size, c.data.classes, split_seed(data_seed, 2));
  } else {
    d.train = load_idx(c.data.train_images, c.data.train_labels);
    d.test = load_idx(c.data.test_images, c.data.test_labels);
    for (const Dataset* s : {&d.train, &d.test}) {
      if (s->height != c.data.image_size || s->width != c.data.image_size)
        throw ConfigError("data.image_size", fmt::format("IDX images are {}x{}", s->height, s->width));
      if (s->classes > c.data.classes)
        throw ConfigError("data.classes", fmt::format("IDX labels reach class {}", s->classes - 1));
    }
    d.train.classes = d.test.classes = c.data.classes;
  }
  d.full_train_size = d.train.size();
  const std::uint64_t subset_seed = split_seed(seed, SeedStream::subset);
  if (c.data.subset_count > 0)
    d.train = d.train.subset(stratified_subset(d.train, c.data.subset_count, subset_seed));
  else if (c.data.subset_fraction > 0)
    d.train = d.train.subset(stratified_subset(d.train, c.data.subset_fraction, subset_seed));
  return d;
}

std::vector<MonomialSpec> initial_monomials(const RunConfig& c, std::size_t count, std::uint64_t seed) {
  std::vector<MonomialSpec> specs;
  if (!c.monomial_sidecar.empty()) {
    for (const auto& m : load_sidecar(c.monomial_sidecar).monomials) specs.push_back(m.spec);
  } else if (!c.model.head.monomials.empty()) {
    specs = c.model.head.monomials;
  } else {
    SelectionConfig s = c.selection;
    s.pool = count;
    s.seed = seed;
    return init_pool(s, c.model.n_alpha);
  }
  if (specs.size() != count)
    throw ConfigError(c.monomial_sidecar.empty() ? "model.monomial_distances" : "model.monomial_sidecar",
                      fmt::format("{} monomials given, {} needed", specs.size(), count));
  return specs;
}

RunResult run_training(const RunConfig& config, std::uint64_t seed, const RunOptions& options) {
  return config.precision == 64 ? run_impl<double>(config, seed, options) : run_impl<float>(config, seed, options);
}

EvalResult evaluate_checkpoint(const std::string& path, const Dataset* data) {
  const Archive archive = load_archive(path);
  if (archive.config.empty()) throw FormatError(path + ": checkpoint carries no configuration", 0);
  const RunConfig config = parse_config_text(archive.config);
  std::optional<DataSplits> own;
  if (!data) {
    own = load_data(config, config.train.seed);
    data = &own->test;
  }
  return config.precision == 64 ? evaluate_impl<double>(archive, config, *data)
                                 : evaluate_impl<float>(archive, config, *data);
}

}  // namespace rinv
