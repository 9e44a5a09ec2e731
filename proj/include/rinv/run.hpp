// One training run from a RunConfig: data, model, optional monomial selection,
// training, and the files a run leaves behind (metrics.csv, summary.txt,
// checkpoint.rinv, monomials.ini).
#pragma once

#include "rinv/config.hpp"

#include <iosfwd>
#include <optional>
#include <string>

namespace rinv {

struct DataSplits {
  Dataset train, test;
  std::size_t full_train_size = 0;  // before subsetting
};

/// Synthetic sets derive from the root seed; a configured subset is stratified
/// with its own stream of the same seed.
DataSplits load_data(const RunConfig& config, std::uint64_t seed);

/// Initial monomials for a head of `count` entries: the sidecar if set, the
/// configured specs if present, otherwise a fresh pool.
std::vector<MonomialSpec> initial_monomials(const RunConfig& config, std::size_t count, std::uint64_t seed);

struct RunOptions {
  std::string out_dir;              // empty: write nothing
  bool select = false;              // run monomial selection before the final training
  std::ostream* log = nullptr;
};

struct RunResult {
  double test_error = 0;
  double test_loss = 0;
  std::size_t params = 0;
  double invariance_residual = 0;
  double seconds = 0;
  IterationPlan plan;
  std::size_t epochs_run = 0;
  std::vector<EpochRecord> history;
  std::optional<SelectionResult> selection;
  std::string metrics_csv;
  std::string checkpoint_config;  // canonical config that rebuilds the trained model
  bool smoke_flag = false;        // final test error above train.smoke_error
};

/// Trains one seed. On a numerical abort the rolled-back model is still
/// checkpointed before NumericalAbort propagates.
RunResult run_training(const RunConfig& config, std::uint64_t seed, const RunOptions& options);

/// Test error of a checkpoint on the data named by its own config, or on
/// `data` when given.
EvalResult evaluate_checkpoint(const std::string& path, const Dataset* data = nullptr);

}  // namespace rinv
