#include "cli.hpp"

#include "rinv/run.hpp"
#include "rinv/verify.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace rinv::cli {
namespace {

namespace fs = std::filesystem;

std::string images_path(const std::string& prefix) { return prefix + "-images.idx"; }
std::string labels_path(const std::string& prefix) { return prefix + "-labels.idx"; }

void apply_subset(RunConfig& config, double subset) {
  if (subset <= 0) return;
  if (subset < 1) {
    config.data.subset_fraction = subset;
    config.data.subset_count = 0;
  } else {
    if (subset != std::floor(subset)) throw ConfigError("--subset", "a count above 1 must be an integer");
    config.data.subset_count = static_cast<std::size_t>(subset);
    config.data.subset_fraction = 0;
  }
}

int gen_data(const std::string& out_prefix, std::size_t n, std::size_t size, std::size_t classes, std::uint64_t seed,
             std::ostream& out) {
  if (n == 0) throw ConfigError("--n", "must be positive");
  if (classes == 0 || classes > kGlyphCount) throw ConfigError("--classes", fmt::format("must be in 1..{}", kGlyphCount));
  const Dataset data = synth_shapes(n, size, classes, seed);
  const auto parent = fs::path(out_prefix).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  save_idx(images_path(out_prefix), labels_path(out_prefix), data);
  const auto counts = data.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) fmt::print(out, "class {} ({}): {}\n", c, glyph_name(c), counts[c]);
  fmt::print(out, "wrote {} and {}\n", images_path(out_prefix), labels_path(out_prefix));
  return ok;
}

void print_aggregate(std::ostream& out, std::span<const double> errors) {
  const auto s = mte(errors);
  fmt::print(out, "mte = {:.6f}\nstd = {:.6f}\nseeds = {}\n", s.mean, s.std, s.runs);
}

int train(const RunConfig& base, std::vector<std::uint64_t> seeds, const std::string& out_dir, bool select,
          std::ostream& out) {
  if (seeds.empty()) seeds.push_back(base.train.seed);
  RunSummary agg;
  for (const auto seed : seeds) {
    RunOptions opt;
    opt.out_dir = seeds.size() == 1 ? out_dir : (fs::path(out_dir) / fmt::format("seed-{}", seed)).string();
    opt.select = select;
    opt.log = &out;
    const RunResult r = run_training(base, seed, opt);
    fmt::print(out, "seed {}: test error {:.6f}, {} parameters, invariance residual {:.3e}, {:.1f} s\n", seed,
               r.test_error, r.params, r.invariance_residual, r.seconds);
    if (r.smoke_flag) fmt::print(out, "warning: test error above {:.3f}\n", base.train.smoke_error);
    if (r.selection) fmt::print(out, "monomials written to {}\n", (fs::path(opt.out_dir) / "monomials.ini").string());
    agg.errors.push_back(r.test_error);
    agg.params = r.params;
    agg.invariance_residual = std::max(agg.invariance_residual, r.invariance_residual);
    agg.seconds += r.seconds;
  }
  if (seeds.size() > 1) {
    const auto s = mte(agg.errors);
    agg.mte = s.mean;
    agg.std = s.std;
    agg.seeds = s.runs;
    std::ostringstream text;
    write_summary(text, agg);
    std::ofstream(fs::path(out_dir) / "summary.txt", std::ios::binary) << text.str();
    print_aggregate(out, agg.errors);
  }
  return ok;
}

int eval(const std::vector<std::string>& checkpoints, const std::string& data_prefix, std::ostream& out) {
  std::optional<Dataset> data;
  if (!data_prefix.empty()) data = load_idx(images_path(data_prefix), labels_path(data_prefix));
  std::vector<double> errors;
  for (const auto& path : checkpoints) {
    if (!fs::exists(path)) throw ConfigError("--checkpoint", "no such file: " + path);
    const auto r = evaluate_checkpoint(path, data ? &*data : nullptr);
    fmt::print(out, "{}: error {:.6f} ({} of {}), loss {:.6f}\n", path, r.error, r.errors, r.count, r.loss);
    errors.push_back(r.error);
  }
  if (errors.size() > 1) print_aggregate(out, errors);
  return ok;
}

int verify(const std::string& suite, const VerifyOptions& options, std::ostream& out) {
  std::vector<std::string> names;
  if (suite == "all")
    names = suite_names();
  else
    names.push_back(suite);
  bool all = true;
  for (const auto& name : names) {
    const auto report = run_suite(name, options);
    for (const auto& c : report.checks)
      fmt::print(out, "{:<12} {:<48} {:>12.4e} <= {:<10.3e} {}\n", name, c.name, c.value, c.tolerance,
                 c.pass() ? "PASS" : "FAIL");
    fmt::print(out, "{:<12} {} ({:.2f} s)\n", name, report.pass() ? "PASS" : "FAIL", report.seconds);
    all = all && report.pass();
  }
  return all ? ok : verification;
}

}  // namespace

unsigned thread_cap() {
  const char* env = std::getenv("RINV_THREADS");
  if (!env || !*env) return 1;
  std::size_t pos = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(env, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != std::string_view(env).size() || v == 0 || env[0] == '-')
    throw std::invalid_argument(fmt::format("RINV_THREADS must be a positive integer, got '{}'", env));
  return static_cast<unsigned>(v);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Rotation-invariant networks: data, training, monomial selection, evaluation and verification."};
  app.name("rinv");
  app.require_subcommand(1);

  std::string out_prefix;
  std::size_t n = 0, size = 24, classes = 4;
  std::uint64_t data_seed = 0;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic rotated-shapes set as IDX files");
  gen->add_option("--out", out_prefix, "Path prefix; writes <out>-images.idx and <out>-labels.idx")->required();
  gen->add_option("--n", n, "Number of images")->required();
  gen->add_option("--size", size, "Image side in pixels")->capture_default_str();
  gen->add_option("--classes", classes, "Number of glyph classes")->capture_default_str();
  gen->add_option("--seed", data_seed, "Root seed")->capture_default_str();

  std::string config_path, out_dir = "run";
  std::vector<std::uint64_t> seeds;
  double subset = 0;
  auto* tr = app.add_subcommand("train", "Train a model from a config file");
  tr->add_option("--config", config_path, "INI configuration")->required()->check(CLI::ExistingFile);
  tr->add_option("--seed", seeds, "Root seed; several seeds train one run each and aggregate the MTE");
  tr->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();
  tr->add_option("--subset", subset, "Stratified training subset: a fraction in (0, 1) or a count");

  std::string algorithm;
  std::size_t pool = 0, target = 0;
  auto* pr = app.add_subcommand("prune", "Select monomials by pruning, then continue training");
  pr->add_option("--config", config_path, "INI configuration")->required()->check(CLI::ExistingFile);
  pr->add_option("--algorithm", algorithm, "Selection algorithm")
      ->check(CLI::IsMember({"random", "magnitude", "connectivity"}));
  pr->add_option("--pool", pool, "Initial pool size M");
  pr->add_option("--target", target, "Number of monomials kept");
  pr->add_option("--seed", seeds, "Root seed");
  pr->add_option("--out-dir", out_dir, "Output directory")->capture_default_str();
  pr->add_option("--subset", subset, "Stratified training subset: a fraction in (0, 1) or a count");

  std::vector<std::string> checkpoints;
  std::string data_prefix;
  auto* ev = app.add_subcommand("eval", "Test error of checkpoints; several checkpoints aggregate the MTE");
  ev->add_option("--checkpoint", checkpoints, "checkpoint.rinv files")->required();
  ev->add_option("--data", data_prefix, "IDX prefix as written by gen-data; default: the checkpoint's own test set");

  std::string suite = "all";
  std::size_t n_alpha = 4, samples = 20, precision = 64;
  std::uint64_t verify_seed = 0;
  auto* ve = app.add_subcommand("verify", "Run the numerical property suites");
  std::vector<std::string> suite_choices = suite_names();
  suite_choices.push_back("all");
  ve->add_option("--suite", suite, "Suite name")->check(CLI::IsMember(suite_choices))->capture_default_str();
  ve->add_option("--n-alpha", n_alpha, "Extra group order exercised by the suites")->capture_default_str();
  ve->add_option("--precision", precision, "Floating-point bits; suites run in 64")->capture_default_str();
  ve->add_option("--samples", samples, "Random inputs or seeds per check")->capture_default_str();
  ve->add_option("--seed", verify_seed, "Root seed")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : usage;
  }

  try {
    thread_cap();
    if (gen->parsed()) return gen_data(out_prefix, n, size, classes, data_seed, out);
    if (tr->parsed() || pr->parsed()) {
      RunConfig config = load_config(config_path);
      apply_subset(config, subset);
      if (pr->parsed()) {
        if (algorithm == "random") config.selection.algorithm = SelectionAlgorithm::random;
        if (algorithm == "magnitude") config.selection.algorithm = SelectionAlgorithm::magnitude;
        if (algorithm == "connectivity") config.selection.algorithm = SelectionAlgorithm::connectivity;
        if (pool) config.selection.pool = pool;
        if (target) config.selection.target = target;
        if (target && !config.selection.schedule.empty()) config.selection.schedule.back().keep = target;
        validate(config.selection);
      }
      return train(config, seeds, out_dir, pr->parsed(), out);
    }
    if (ev->parsed()) return eval(checkpoints, data_prefix, out);
    if (ve->parsed()) {
      if (precision != 64) throw ConfigError("--precision", "the verification suites run in 64-bit only");
      return verify(suite, VerifyOptions{n_alpha, samples, verify_seed}, out);
    }
  } catch (const ConfigError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return usage;
  } catch (const NumericalAbort& e) {
    fmt::print(err, "numerical abort: {}\n", e.what());
    return numerical;
  } catch (const std::exception& e) {
    fmt::print(err, "error: {}\n", e.what());
    return usage;
  }
  return usage;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace rinv::cli
