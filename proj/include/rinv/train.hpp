// Training loop with a constant iteration budget, evaluation, error
// aggregation over seeds, metrics files and checkpoints.
#pragma once

#include "rinv/data.hpp"
#include "rinv/model.hpp"

#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rinv {

/// Non-finite loss. The model has been rolled back to the start of the epoch.
class NumericalAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Optimizer { adam, sgd };
enum class Decay { exponential, step };

const char* to_string(Optimizer o);
const char* to_string(Decay d);

struct TrainConfig {
  Optimizer optimizer = Optimizer::adam;
  double lr = 1e-3;
  Decay decay = Decay::exponential;
  double decay_factor = 0.95;
  std::size_t decay_epoch = 1;  // epochs per decay step
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  std::size_t budget_size = 0;  // training-set size the iteration budget refers to; 0 = actual size
  double elastic_net = 1e-7;    // on steerable coefficients
  double elastic_alpha = 0.5;
  double weight_decay = 0.0;    // squared L2 on dense and plain conv weights
  double reg_constant = 1.0;
  double momentum = 0.9;        // sgd only
  bool augment = false;
  std::size_t eval_batch = 250;
  double smoke_error = 0.25;    // final test error above this is flagged
  std::uint64_t seed = 0;
};

struct IterationPlan {
  std::size_t batches_per_epoch = 0;
  std::size_t reference_batches_per_epoch = 0;
  std::size_t epochs = 0;
  std::size_t iterations = 0;
};

/// Iterations of `epochs` passes over `budget_size` samples, spread over as many
/// passes over `train_size` samples as needed (rounded up, last pass cut short).
IterationPlan plan_iterations(std::size_t train_size, std::size_t budget_size, std::size_t batch_size,
                              std::size_t epochs);

/// Learning rate after `iteration` steps; decay counts reference epochs.
double learning_rate(const TrainConfig& config, const IterationPlan& plan, std::size_t iteration);

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0, error = 0;
};

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const EpochRecord& r);

/// Fraction of rows whose argmax (first maximum) differs from the label.
template <typename T>
double error_rate(const Tensor<T>& logits, std::span<const int> labels);

struct EvalResult {
  double loss = 0, error = 0;
  std::size_t errors = 0, count = 0;
};

template <typename T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::size_t batch_size = 250);

/// max over quarter turns r of max |logits(r x) - logits(x)| / max |logits(x)|
/// on the first `samples` images.
template <typename T>
double model_invariance_residual(Model<T>& model, const Dataset& data, std::size_t samples = 16);

template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, const Dataset& train, const Dataset* test, TrainConfig config, std::ostream* metrics = nullptr);

  const IterationPlan& plan() const noexcept { return plan_; }
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t iteration() const noexcept { return iteration_; }
  bool done() const noexcept { return iteration_ >= plan_.iterations; }
  const std::vector<EpochRecord>& history() const noexcept { return history_; }

  /// Runs up to `count` further epochs; returns the number actually run.
  std::size_t run_epochs(std::size_t count);
  void run() { run_epochs(plan_.epochs); }

 private:
  void step(std::span<const std::size_t> batch, double& loss_sum, std::size_t& errors);
  void regularise(Parameter<T>& p, Tensor<T>& g) const;

  Model<T>& model_;
  const Dataset& train_;
  const Dataset* test_;
  TrainConfig config_;
  std::ostream* metrics_;
  IterationPlan plan_;
  std::size_t epoch_ = 0, iteration_ = 0;
  std::mt19937_64 shuffle_rng_, dropout_rng_, augment_rng_;
  std::map<std::string, Tensor<T>> m1_, m2_;
  std::vector<EpochRecord> history_;
};

struct MteSummary {
  double mean = 0, std = 0;  // std uses the n - 1 denominator, 0 for a single run
  std::size_t runs = 0;
};
MteSummary mte(std::span<const double> errors);

struct RunSummary {
  double mte = 0, std = 0;
  std::size_t seeds = 0;
  std::size_t params = 0;
  double invariance_residual = 0;
  double seconds = 0;
  std::vector<double> errors;
};
void write_summary(std::ostream& out, const RunSummary& s);

/// Model state plus the run configuration text.
template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, const std::string& config_text);

}  // namespace rinv
