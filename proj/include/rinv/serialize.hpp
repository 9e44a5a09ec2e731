// "RINV" binary tensor container.
//
// Layout (all integers little-endian):
//   magic    4 bytes  "RINV"
//   version  u32      currently 1
//   count    u64      number of tensors
//   per tensor:
//     name_len u32, name bytes (UTF-8)
//     rank     u32
//     dims     rank x u64
//     dtype    u8     1 = float32, 2 = float64
//     payload  prod(dims) x dtype, little-endian
//   config_len u64, config bytes (UTF-8 structured text, may be empty)
#pragma once

#include "rinv/tensor.hpp"

#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace rinv {

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

inline constexpr std::uint32_t kArchiveVersion = 1;

struct NamedTensor {
  std::string name;
  std::variant<Tensor<float>, Tensor<double>> value;
};

struct Archive {
  std::vector<NamedTensor> tensors;
  std::string config;

  template <typename T>
  void add(std::string name, const Tensor<T>& t) {
    tensors.push_back({std::move(name), t});
  }

  /// Looks up a tensor by name and converts it to the requested precision.
  template <typename T>
  std::optional<Tensor<T>> get(const std::string& name) const {
    for (const auto& nt : tensors) {
      if (nt.name != name) continue;
      return std::visit([](const auto& t) { return t.template cast<T>(); }, nt.value);
    }
    return std::nullopt;
  }
};

void write_archive(std::ostream& out, const Archive& archive);
Archive read_archive(std::istream& in);

void save_archive(const std::string& path, const Archive& archive);
Archive load_archive(const std::string& path);

}  // namespace rinv
