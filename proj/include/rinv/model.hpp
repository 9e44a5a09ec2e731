// Layer stacks: steerable lifting and group convolutions, group pooling, an
// invariant head (or spatial max pooling), then dense layers. A plain CNN of
// the same shape serves as the parameter-budget reference.
#pragma once

#include "rinv/invariant.hpp"
#include "rinv/serialize.hpp"
#include "rinv/steerable.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace rinv {

class BuildError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Backbone { steerable, plain };
enum class HeadKind { max_pool, monomial, ws_global, ws_local, mlp, sa };

const char* to_string(Backbone b);
const char* to_string(HeadKind h);

struct HeadConfig {
  HeadKind kind = HeadKind::monomial;
  std::vector<MonomialSpec> monomials;
  std::size_t out_channels = 16;  // weighted-sum, MLP and attention heads
  std::size_t ws_extent = 3;
  std::size_t mlp_patch = 3;
  std::vector<std::size_t> mlp_hidden{16};
  std::size_t sa_channels = 8;
  std::size_t sa_heads = 1;
};

struct ModelConfig {
  Backbone backbone = Backbone::steerable;
  std::size_t in_channels = 1;
  std::size_t image_size = 24;
  std::size_t classes = 4;
  std::vector<std::size_t> channels{8, 12, 16};  // widths of the reference plain CNN
  std::vector<std::size_t> pool_after{0};        // 2x2 max pooling after these conv layers
  std::size_t kernel = 5;
  std::size_t n_alpha = 8;
  std::size_t n_f = 6;
  bool rescale = true;  // divide steerable widths by the channel factor
  HeadConfig head;
  std::vector<std::size_t> dense{90};  // hidden widths n_FC
  bool match_budget = true;            // re-solve n_FC, then head width, to the reference parameter count
  double dropout = 0.3;
  bool batch_norm = false;
};

/// Widths and dense sizes after rescaling and budget matching.
struct ModelLayout {
  std::vector<std::size_t> widths;
  std::vector<std::size_t> dense;
  double channel_divisor = 1.0;
  std::size_t head_size = 0;         // spatial size entering the head
  std::size_t head_width = 0;        // out_channels after budget matching
  std::size_t head_inner = 0;        // sa_channels after budget matching
  std::size_t feature_count = 0;     // head output width
  std::size_t parameters = 0;
  std::size_t reference_parameters = 0;  // plain CNN with the configured widths, max-pool head
};

/// Resolves the layout; throws BuildError naming the offending layer pair.
ModelLayout resolve_layout(const ModelConfig& config);

/// The plain-CNN reference of a config: same widths, pools and dense sizes,
/// spatial max pooling, no rescaling.
ModelConfig reference_config(const ModelConfig& config);

template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  const ModelLayout& layout() const noexcept { return layout_; }
  const CyclicRotationGroup& group() const noexcept { return group_; }

  /// Logits [N, classes] for x [N, C, H, W]. `rng` drives dropout when training.
  /// `mask` [n_m] multiplies the monomial feature groups (connection sensitivity).
  Var<T> forward(const Var<T>& x, bool train, std::mt19937_64* rng = nullptr, const Var<T>* mask = nullptr);
  /// Head output [N, F] in evaluation mode.
  Var<T> features(const Var<T>& x);

  ParamRefs<T> params();
  std::size_t parameter_count() const;

  bool has_monomial_head() const noexcept;
  MonomialHead<T>& monomial_head();
  Parameter<T>& first_dense_weight() { return dense_w_.front(); }
  /// Keeps only the monomials at `keep` (ascending pool indices) together
  /// with their exponent rows and first-dense-layer rows.
  void keep_monomials(const std::vector<std::size_t>& keep);

  /// Parameters and normalisation statistics by name.
  Archive state() const;
  void load_state(const Archive& archive);

 private:
  Var<T> backbone(const Var<T>& x, bool train);
  Var<T> head_features(const Var<T>& fmap, const Var<T>* mask);

  ModelConfig config_;
  ModelLayout layout_;
  CyclicRotationGroup group_{1};
  std::optional<SteerableBasis<T>> basis_;
  std::vector<SteerableFilter<T>> filters_;
  std::vector<Parameter<T>> conv_w_;
  std::vector<Parameter<T>> conv_b_;
  std::vector<Parameter<T>> bn_gamma_, bn_beta_;
  std::vector<Tensor<T>> bn_mean_, bn_var_;
  std::optional<IIHead<T>> head_;
  std::vector<Parameter<T>> dense_w_, dense_b_;
};

/// Batch normalisation over every axis except `axis` 1, updating the running
/// statistics in training mode.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool train, T momentum = T(0.1), T eps = T(1e-5));

}  // namespace rinv
