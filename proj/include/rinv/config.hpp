// Run configuration: an INI document with sections [data], [model], [train],
// [selection] and [verify]. Unknown keys are rejected; `canonical` writes every
// field in a fixed order so parse(canonical(c)) == c.
#pragma once

#include "rinv/selection.hpp"

#include <iosfwd>
#include <stdexcept>
#include <string>

namespace rinv {

/// Invalid configuration; `path()` is the offending "section.key".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& message)
      : std::runtime_error(path + ": " + message), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

enum class DataSource { synthetic, idx };
enum class Augmentation { none, random_rotation };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  std::string train_images, train_labels, test_images, test_labels;  // idx source
  std::size_t train_size = 1000, test_size = 1000;                     // synthetic source
  std::size_t image_size = 24;
  std::size_t classes = 4;
  std::size_t subset_count = 0;  // 0: no subset
  double subset_fraction = 0;    // 0: no subset
  Augmentation augmentation = Augmentation::none;
};

struct VerifyConfig {
  std::size_t n_alpha = 4;
  std::size_t samples = 20;
  std::uint64_t seed = 0;
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  std::string monomial_sidecar;  // initial monomials for a monomial head
  std::size_t precision = 32;
  TrainConfig train;
  SelectionConfig selection;
  VerifyConfig verify;
};

RunConfig parse_config(std::istream& in);
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);
std::string canonical(const RunConfig& config);

}  // namespace rinv
