// Property suites run by `rinv verify` and the acceptance binary. Each check
// reports a measured value against a fixed tolerance, always in double precision.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace rinv {

struct Check {
  std::string name;
  double value = 0;
  double tolerance = 0;
  bool pass() const noexcept { return value <= tolerance; }
};

struct SuiteReport {
  std::string suite;
  std::vector<Check> checks;
  double seconds = 0;
  bool pass() const noexcept;
};

struct VerifyOptions {
  std::size_t n_alpha = 4;   // extra group order exercised next to the fixed ones
  std::size_t samples = 20;  // random inputs or seeds per check
  std::uint64_t seed = 0;
};

/// group, equivariance, invariance, ws-identity, gradients, pruning
const std::vector<std::string>& suite_names();

/// Throws std::invalid_argument for an unknown suite name.
SuiteReport run_suite(const std::string& name, const VerifyOptions& options);

SuiteReport verify_group(const VerifyOptions& options);
SuiteReport verify_equivariance(const VerifyOptions& options);
SuiteReport verify_invariance(const VerifyOptions& options);
SuiteReport verify_ws_identity(const VerifyOptions& options);
SuiteReport verify_gradients(const VerifyOptions& options);
SuiteReport verify_pruning(const VerifyOptions& options);

}  // namespace rinv
