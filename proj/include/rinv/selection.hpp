// Choosing n_m monomials out of a pool of M: random choice, magnitude-based
// iterative pruning and connection sensitivity.
#pragma once

#include "rinv/train.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace rinv {

enum class PoolInit { random, catalog };
enum class SelectionAlgorithm { random, magnitude, connectivity };
enum class ScoreKind { none, magnitude, sensitivity };

const char* to_string(PoolInit p);
const char* to_string(SelectionAlgorithm a);
const char* to_string(ScoreKind s);

/// Train `epochs` more epochs, then keep the best `keep` monomials.
struct PruneStep {
  std::size_t epochs = 0;
  std::size_t keep = 0;
};

struct SelectionConfig {
  std::size_t pool = 50;
  std::size_t target = 5;
  PoolInit init = PoolInit::random;
  SelectionAlgorithm algorithm = SelectionAlgorithm::magnitude;
  std::size_t factors = 3;                     // M_f
  std::vector<double> distance_set{0, 1, 2};
  std::vector<PruneStep> schedule{{10, 25}, {5, 5}};
  std::size_t score_batch = 250;               // connectivity scoring batch size
  std::uint64_t seed = 0;
};

/// Throws ContractError unless keep-counts start at most at the pool size,
/// strictly decrease and end at the target.
void validate(const SelectionConfig& config);

struct PruningScore {
  std::vector<double> values;
  ScoreKind kind = ScoreKind::none;
};

/// M monomial specs; the first distance of each is 0 and exponents are drawn
/// from U[0, group_order / M_f]. Catalog pools start with every distance
/// tuple over the distance set, then fill up randomly.
std::vector<MonomialSpec> init_pool(const SelectionConfig& config, std::size_t group_order);

/// `n_m` distinct pool indices, ascending.
std::vector<std::size_t> select_random(std::size_t pool, std::size_t n_m, std::uint64_t seed);

/// s_j = mean |w[j * C + c, k]| over channels c and outputs k of w [n_m * C, out].
template <typename T>
PruningScore magnitude_scores(const Tensor<T>& w, std::size_t monomials);

/// s_j = |d L / d c_j| at c = 1, L the batch-mean cross entropy summed over
/// the batches of `data`, dropout off.
template <typename T>
PruningScore connectivity_scores(Model<T>& model, const Dataset& data, std::size_t batch_size);

/// Indices of the `keep` highest scores (ties to the lower index), ascending.
std::vector<std::size_t> top_k(const std::vector<double>& scores, std::size_t keep);

struct PruneRecord {
  std::size_t epoch = 0;
  std::size_t before = 0, after = 0;
  std::uint64_t checksum_before = 0, checksum_after = 0;  // surviving exponent and weight rows
  bool continuous() const noexcept { return checksum_before == checksum_after; }
};

struct SelectedMonomial {
  MonomialSpec spec;
  std::size_t origin = 0;  // index in the initial pool
  double score = 0;
};

struct SelectionResult {
  std::vector<SelectedMonomial> monomials;
  ScoreKind kind = ScoreKind::none;
  std::vector<PruneRecord> steps;
};

/// Shrinks the monomial head of `model` in place, training with `trainer`
/// between steps. Surviving weights are carried over unchanged.
template <typename T>
SelectionResult select_monomials(Model<T>& model, Trainer<T>& trainer, const Dataset& score_data,
                                 const SelectionConfig& config);

/// Checksum of the exponent rows and first-dense-layer rows of `keep`.
template <typename T>
std::uint64_t surviving_checksum(Model<T>& model, const std::vector<std::size_t>& keep);

/// INI sidecar, one [monomial.i] section per monomial with origin, score,
/// distances and exponents.
void write_sidecar(std::ostream& out, const SelectionResult& result);
SelectionResult read_sidecar(std::istream& in);
void save_sidecar(const std::string& path, const SelectionResult& result);
SelectionResult load_sidecar(const std::string& path);

}  // namespace rinv
