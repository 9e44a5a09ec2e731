// Acceptance report: one PASS/FAIL line per criterion. `--quick` skips the
// two training-scale checks (8 and 9).
#include "cli.hpp"

#include "rinv/run.hpp"
#include "rinv/steerable.hpp"
#include "rinv/verify.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

using namespace rinv;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

enum class Status { pass, fail, skip };

Status report(int id, const std::string& title, const std::function<Outcome()>& body, bool skip = false) {
  if (skip) {
    fmt::print("criterion {:>2} [{}]: SKIP\n", id, title);
    return Status::skip;
  }
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, fmt::format("exception: {}", e.what())};
  }
  fmt::print("criterion {:>2} [{}]: {}  {}\n", id, title, o.pass ? "PASS" : "FAIL", o.detail);
  std::fflush(stdout);
  return o.pass ? Status::pass : Status::fail;
}

Outcome suite(const std::string& name, VerifyOptions opt, double seconds_limit) {
  const auto r = run_suite(name, opt);
  double worst = 0;
  std::string worst_name;
  std::size_t failed = 0;
  for (const auto& c : r.checks) {
    const double margin = c.tolerance > 0 ? c.value / c.tolerance : c.value;
    if (margin >= worst) worst = margin, worst_name = c.name;
    failed += !c.pass();
  }
  const bool fast = r.seconds < seconds_limit;
  return {r.pass() && fast, fmt::format("{} checks, {} failed, tightest '{}'; {:.2f} s (limit {} s)", r.checks.size(),
                                        failed, worst_name, r.seconds, seconds_limit)};
}

RunConfig desk_config(Backbone backbone, HeadKind head) {
  RunConfig c;
  c.data.train_size = 1000;
  c.data.test_size = 1000;
  c.data.image_size = 24;
  c.data.classes = 4;
  c.model.image_size = 24;
  c.model.classes = 4;
  c.model.backbone = backbone;
  c.model.head.kind = head;
  c.train.epochs = 30;
  c.selection.target = 5;
  return c;
}

Outcome param_arithmetic() {
  const auto r = param_ratio(3, 8, 16);
  const Rational expected = make_rational(256, 9);
  const auto isqrt = [](std::int64_t v) {
    auto s = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(v))));
    return s * s == v ? s : -1;
  };
  const Rational factor{isqrt(r.group_ratio.num), isqrt(r.group_ratio.den)};
  bool ok = r.group_ratio == expected && factor == make_rational(16, 3) &&
            std::abs(r.channel_factor - 16.0 / 3.0) <= 1e-15;
  std::string detail = fmt::format("ratio {}/{}, factor {}/{} ({:.17g});", r.group_ratio.num, r.group_ratio.den,
                                   factor.num, factor.den, r.channel_factor);
  double worst = 0;
  for (const auto head : {HeadKind::max_pool, HeadKind::monomial, HeadKind::ws_global, HeadKind::ws_local,
                          HeadKind::mlp, HeadKind::sa}) {
    ModelConfig m = desk_config(Backbone::steerable, head).model;
    if (head == HeadKind::monomial) m.head.monomials.assign(5, MonomialSpec{{0, 1, 2}, {1, 1, 1}});
    const auto l = resolve_layout(m);
    const double dev = std::abs(static_cast<double>(l.parameters) / static_cast<double>(l.reference_parameters) - 1);
    worst = std::max(worst, dev);
    detail += fmt::format(" {} {}/{}", to_string(head), l.parameters, l.reference_parameters);
  }
  ok = ok && worst <= 0.05;
  return {ok, detail + fmt::format("; worst deviation {:.3f}% (limit 5%)", 100 * worst)};
}

RunResult train_quiet(const RunConfig& c, std::uint64_t seed) { return run_training(c, seed, RunOptions{}); }

Outcome trend(const std::vector<std::uint64_t>& seeds) {
  struct Arm {
    std::string name;
    RunConfig config;
    std::vector<double> errors;
  };
  std::vector<Arm> arms{{"plain", desk_config(Backbone::plain, HeadKind::max_pool), {}},
                        {"max-pool", desk_config(Backbone::steerable, HeadKind::max_pool), {}},
                        {"monomial", desk_config(Backbone::steerable, HeadKind::monomial), {}},
                        {"local-ws", desk_config(Backbone::steerable, HeadKind::ws_local), {}}};
  double slowest = 0;
  for (auto& arm : arms)
    for (const auto seed : seeds) {
      const auto r = train_quiet(arm.config, seed);
      arm.errors.push_back(r.test_error);
      slowest = std::max(slowest, r.seconds);
      fmt::print("    {:<9} seed {}: test error {:.4f}, {} parameters, {:.0f} s\n", arm.name, seed, r.test_error,
                 r.params, r.seconds);
      std::fflush(stdout);
    }
  const auto wins = [&](const Arm& a, const Arm& b, bool strict) {
    std::size_t w = 0;
    for (std::size_t i = 0; i < seeds.size(); ++i) w += strict ? a.errors[i] < b.errors[i] : a.errors[i] <= b.errors[i];
    return w;
  };
  const std::size_t need = 2;
  const Arm &plain = arms[0], &pool = arms[1];
  const bool pool_beats_plain = wins(pool, plain, true) >= need;
  bool ok = false;
  std::string detail;
  for (std::size_t h = 2; h < arms.size(); ++h) {
    const auto vs_pool = wins(arms[h], pool, false), vs_plain = wins(arms[h], plain, true);
    ok = ok || (vs_pool >= need && vs_plain >= need && pool_beats_plain);
    detail += fmt::format("{} <= max-pool in {}/{}, < plain in {}/{}; ", arms[h].name, vs_pool, seeds.size(), vs_plain,
                          seeds.size());
  }
  ok = ok && slowest <= 20 * 60;
  for (const auto& a : arms) detail += fmt::format("{} mte {:.4f}; ", a.name, mte(a.errors).mean);
  return {ok, detail + fmt::format("max-pool < plain in {}/{}; slowest run {:.0f} s (limit 1200 s)",
                                   wins(pool, plain, true), seeds.size(), slowest)};
}

Outcome schedule() {
  RunConfig c = desk_config(Backbone::steerable, HeadKind::monomial);
  c.selection.pool = 50;
  c.selection.target = 5;
  c.selection.algorithm = SelectionAlgorithm::magnitude;
  c.selection.schedule = {{10, 25}, {5, 5}};
  RunOptions opt;
  opt.select = true;
  const auto r = run_training(c, 1, opt);
  const auto& steps = r.selection->steps;
  bool ok = steps.size() == 2 && r.selection->monomials.size() == 5 && r.seconds <= 30 * 60;
  std::string detail;
  for (const auto& s : steps) {
    detail += fmt::format("epoch {}: {} -> {} ({:016x} / {:016x}); ", s.epoch, s.before, s.after, s.checksum_before,
                          s.checksum_after);
    ok = ok && s.continuous();
  }
  if (steps.size() == 2)
    ok = ok && steps[0].epoch == 10 && steps[0].before == 50 && steps[0].after == 25 && steps[1].epoch == 15 &&
         steps[1].before == 25 && steps[1].after == 5;
  return {ok, detail + fmt::format("final test error {:.4f}; {:.0f} s (limit 1800 s)", r.test_error, r.seconds)};
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / fmt::format("rinv-accept-{}", ::getpid());
  fs::create_directories(dir);
  RunConfig c = desk_config(Backbone::steerable, HeadKind::monomial);
  c.data.train_size = 200;
  c.data.test_size = 200;
  c.train.epochs = 3;
  std::ofstream(dir / "config.ini") << canonical(c);
  std::string csv[2];
  for (int i = 0; i < 2; ++i) {
    const auto out = (dir / fmt::format("run{}", i)).string();
    std::ostringstream log, err;
    const int code = cli::run({"train", "--config", (dir / "config.ini").string(), "--seed", "7", "--out-dir", out}, log, err);
    if (code != 0) return {false, fmt::format("train exited {}: {}", code, err.str())};
    std::ifstream in(fs::path(out) / "metrics.csv", std::ios::binary);
    csv[i].assign(std::istreambuf_iterator<char>(in), {});
  }
  fs::remove_all(dir);
  const bool ok = !csv[0].empty() && csv[0] == csv[1];
  return {ok, fmt::format("metrics.csv {} bytes vs {} bytes, {}", csv[0].size(), csv[1].size(),
                          csv[0] == csv[1] ? "identical" : "different")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance report"};
  bool quick = false;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  app.add_flag("--quick", quick, "Skip the training-scale criteria 8 and 9");
  app.add_option("--seeds", seeds, "Seeds of the trend check")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  const VerifyOptions base{4, 20, 0};
  std::vector<Status> s;
  s.push_back(report(1, "group axioms", [&] { return suite("group", {16, base.samples, base.seed}, 1.0); }));
  s.push_back(report(2, "equivariance", [&] { return suite("equivariance", {8, base.samples, base.seed}, 10.0); }));
  s.push_back(report(3, "head invariance", [&] { return suite("invariance", base, 30.0); }));
  s.push_back(report(4, "ws identity", [&] { return suite("ws-identity", base, 10.0); }));
  s.push_back(report(5, "gradients", [&] { return suite("gradients", base, 60.0); }));
  s.push_back(report(6, "pruning oracles", [&] { return suite("pruning", base, 30.0); }));
  s.push_back(report(7, "parameter arithmetic", param_arithmetic));
  s.push_back(report(8, "trend check", [&] { return trend(seeds); }, quick));
  s.push_back(report(9, "pruning schedule", schedule, quick));
  s.push_back(report(10, "determinism", determinism));
  return std::count(s.begin(), s.end(), Status::fail) == 0 ? 0 : 1;
}
