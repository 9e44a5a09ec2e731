#include "rinv/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace rinv {
namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

constexpr std::array<char, 4> kMagic{'R', 'I', 'N', 'V'};
constexpr std::uint8_t kDtypeF32 = 1;
constexpr std::uint8_t kDtypeF64 = 2;
constexpr std::uint32_t kMaxRank = 16;

template <typename U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <typename U>
  U get(const char* what) {
    U v{};
    bytes(reinterpret_cast<char*>(&v), sizeof(U), what);
    return v;
  }

  void bytes(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw FormatError(std::string("truncated archive while reading ") + what, offset_ + static_cast<std::uint64_t>(in_.gcount()));
    offset_ += n;
  }

  std::uint64_t offset() const { return offset_; }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

template <typename T>
Tensor<T> read_payload(Reader& r, Shape shape) {
  Tensor<T> t(std::move(shape));
  r.bytes(reinterpret_cast<char*>(t.data()), t.numel() * sizeof(T), "tensor payload");
  return t;
}

}  // namespace

void write_archive(std::ostream& out, const Archive& archive) {
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kArchiveVersion);
  put<std::uint64_t>(out, archive.tensors.size());
  for (const auto& nt : archive.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(nt.name.size()));
    out.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    std::visit(
        [&](const auto& t) {
          using T = typename std::decay_t<decltype(t)>::Scalar;
          put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
          for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
          put<std::uint8_t>(out, std::is_same_v<T, float> ? kDtypeF32 : kDtypeF64);
          out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(T)));
        },
        nt.value);
  }
  put<std::uint64_t>(out, archive.config.size());
  out.write(archive.config.data(), static_cast<std::streamsize>(archive.config.size()));
  if (!out) throw std::runtime_error("failed writing archive");
}

Archive read_archive(std::istream& in) {
  Reader r(in);
  std::array<char, 4> magic{};
  r.bytes(magic.data(), magic.size(), "magic");
  if (magic != kMagic) throw FormatError("bad magic, expected \"RINV\"", 0);
  const auto version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kArchiveVersion) throw FormatError("unsupported archive version " + std::to_string(version), version_at);
  const auto count = r.get<std::uint64_t>("tensor count");

  Archive archive;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("name length");
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len, "name");
    const auto rank_at = r.offset();
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > kMaxRank) throw FormatError("implausible tensor rank " + std::to_string(rank), rank_at);
    Shape shape(rank);
    for (auto& d : shape) {
      const auto at = r.offset();
      d = r.get<std::uint64_t>("dimension");
      if (d == 0) throw FormatError("zero-sized dimension", at);
    }
    const auto dtype_at = r.offset();
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype == kDtypeF32) {
      archive.tensors.push_back({std::move(name), read_payload<float>(r, std::move(shape))});
    } else if (dtype == kDtypeF64) {
      archive.tensors.push_back({std::move(name), read_payload<double>(r, std::move(shape))});
    } else {
      throw FormatError("unknown dtype tag " + std::to_string(dtype), dtype_at);
    }
  }
  const auto config_len = r.get<std::uint64_t>("config length");
  archive.config.resize(config_len);
  r.bytes(archive.config.data(), config_len, "config section");
  return archive;
}

void save_archive(const std::string& path, const Archive& archive) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_archive(out, archive);
}

Archive load_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_archive(in);
}

}  // namespace rinv
