#include "rinv/data.hpp"

#include "rinv/ops.hpp"
#include "rinv/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>

namespace rinv {
namespace {

void put_be32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

class IdxReader {
 public:
  IdxReader(std::istream& in, const char* file) : in_(in), file_(file) {}

  std::uint32_t be32(const char* what) {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4, what);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
  }

  void bytes(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      throw FormatError(std::string(file_) + ": truncated while reading " + what,
                        offset_ + static_cast<std::uint64_t>(in_.gcount()));
    offset_ += n;
  }

  std::uint64_t offset() const { return offset_; }
  const char* file() const { return file_; }

 private:
  std::istream& in_;
  const char* file_;
  std::uint64_t offset_ = 0;
};

std::uint8_t quantise(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

constexpr std::size_t kClutterStrokes = 2;
constexpr double kClutterInk = 0.8;
constexpr double kNoise = 0.15;

struct Segment {
  double x0, y0, x1, y1;
};

std::vector<Segment> glyph(std::size_t cls) {
  switch (cls) {
    case 0: return {{-0.8, 0, 0.8, 0}};
    case 1: return {{-0.5, -0.7, -0.5, 0.6}, {-0.5, 0.6, 0.6, 0.6}};
    case 2: return {{-0.7, -0.6, 0.7, -0.6}, {0, -0.6, 0, 0.8}};
    case 3: return {{-0.75, 0, 0.75, 0}, {0, -0.75, 0, 0.75}};
    case 4: {
      std::vector<Segment> arc;
      const int pieces = 16;
      for (int i = 0; i < pieces; ++i) {
        const double a0 = std::numbers::pi * (-2.0 / 3 + 4.0 / 3 * i / pieces);
        const double a1 = std::numbers::pi * (-2.0 / 3 + 4.0 / 3 * (i + 1) / pieces);
        arc.push_back({0.65 * std::cos(a0), 0.65 * std::sin(a0), 0.65 * std::cos(a1), 0.65 * std::sin(a1)});
      }
      return arc;
    }
    case 5: return {{-0.6, -0.6, 0, 0.5}, {0, 0.5, 0.6, -0.6}};
    default: throw ContractError("glyph class out of range");
  }
}

double segment_distance(double px, double py, const Segment& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = s.x0 + t * dx - px, ey = s.y0 + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

}  // namespace

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(classes, 0);
  for (int l : labels) ++counts.at(static_cast<std::size_t>(l));
  return counts;
}

template <typename T>
Tensor<T> Dataset::images(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw ContractError("empty image batch");
  Tensor<T> out({indices.size(), 1, height, width});
  const std::size_t hw = image_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const float* src = pixels.data() + indices[i] * hw;
    std::transform(src, src + hw, out.data() + i * hw, [](float v) { return static_cast<T>(v); });
  }
  return out;
}

std::vector<int> Dataset::labels_at(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.height = height;
  out.width = width;
  out.classes = classes;
  out.pixels.reserve(indices.size() * image_size());
  for (std::size_t i : indices) {
    const float* src = pixels.data() + i * image_size();
    out.pixels.insert(out.pixels.end(), src, src + image_size());
    out.labels.push_back(labels.at(i));
  }
  return out;
}

void write_idx(std::ostream& images, std::ostream& labels, const Dataset& data) {
  put_be32(images, kIdxImageMagic);
  put_be32(images, static_cast<std::uint32_t>(data.size()));
  put_be32(images, static_cast<std::uint32_t>(data.height));
  put_be32(images, static_cast<std::uint32_t>(data.width));
  std::vector<char> bytes(data.pixels.size());
  std::transform(data.pixels.begin(), data.pixels.end(), bytes.begin(),
                 [](float v) { return static_cast<char>(quantise(v)); });
  images.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));

  put_be32(labels, kIdxLabelMagic);
  put_be32(labels, static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) labels.put(static_cast<char>(l));
  if (!images || !labels) throw std::runtime_error("failed writing IDX data");
}

Dataset read_idx(std::istream& images, std::istream& labels) {
  IdxReader ri(images, "images");
  if (const auto magic = ri.be32("magic"); magic != kIdxImageMagic)
    throw FormatError("images: bad IDX magic " + std::to_string(magic), 0);
  const std::uint32_t n = ri.be32("image count");
  Dataset d;
  d.height = ri.be32("rows");
  d.width = ri.be32("columns");
  if (d.height == 0 || d.width == 0) throw FormatError("images: zero-sized image", 8);
  std::vector<unsigned char> raw(static_cast<std::size_t>(n) * d.height * d.width);
  ri.bytes(reinterpret_cast<char*>(raw.data()), raw.size(), "pixels");
  d.pixels.resize(raw.size());
  std::transform(raw.begin(), raw.end(), d.pixels.begin(), [](unsigned char b) { return static_cast<float>(b) / 255.0f; });

  IdxReader rl(labels, "labels");
  if (const auto magic = rl.be32("magic"); magic != kIdxLabelMagic)
    throw FormatError("labels: bad IDX magic " + std::to_string(magic), 0);
  if (const auto m = rl.be32("label count"); m != n)
    throw FormatError("labels: count " + std::to_string(m) + " does not match image count " + std::to_string(n), 4);
  std::vector<unsigned char> lab(n);
  rl.bytes(reinterpret_cast<char*>(lab.data()), lab.size(), "labels");
  d.labels.assign(lab.begin(), lab.end());
  d.classes = d.labels.empty() ? 0 : static_cast<std::size_t>(*std::max_element(d.labels.begin(), d.labels.end())) + 1;
  return d;
}

void save_idx(const std::string& images_path, const std::string& labels_path, const Dataset& data) {
  std::ofstream images(images_path, std::ios::binary), labels(labels_path, std::ios::binary);
  if (!images) throw std::runtime_error("cannot open " + images_path + " for writing");
  if (!labels) throw std::runtime_error("cannot open " + labels_path + " for writing");
  write_idx(images, labels, data);
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream images(images_path, std::ios::binary), labels(labels_path, std::ios::binary);
  if (!images) throw std::runtime_error("cannot open " + images_path);
  if (!labels) throw std::runtime_error("cannot open " + labels_path);
  return read_idx(images, labels);
}

const char* glyph_name(std::size_t cls) {
  static constexpr std::array<const char*, kGlyphCount> names{"bar", "l-corner", "t", "cross", "arc", "chevron"};
  return names.at(cls);
}

Dataset synth_shapes(std::size_t n, std::size_t size, std::size_t classes, std::uint64_t seed) {
  if (classes == 0 || classes > kGlyphCount)
    throw ContractError("synth_shapes: classes must be in [1, " + std::to_string(kGlyphCount) + "]");
  if (size < 8) throw ContractError("synth_shapes: image size must be at least 8");
  Dataset d;
  d.height = d.width = size;
  d.classes = classes;
  d.pixels.assign(n * size * size, 0.0f);
  d.labels.resize(n);
  std::mt19937_64 rng(seed);
  const double sz = static_cast<double>(size);
  const double centre = 0.5 * (sz - 1), reach = 0.32 * sz;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % classes;
    d.labels[i] = static_cast<int>(cls);
    const double angle = uniform(rng, 0, 2 * std::numbers::pi);
    const double s = reach * uniform(rng, 0.8, 1.1);
    const double oy = uniform(rng, -2, 2), ox = uniform(rng, -2, 2);
    const double c = std::cos(angle), si = std::sin(angle);
    std::vector<Segment> segs, clutter;
    for (const auto& g : glyph(cls))
      segs.push_back({centre + ox + s * (c * g.x0 - si * g.y0), centre + oy + s * (si * g.x0 + c * g.y0),
                      centre + ox + s * (c * g.x1 - si * g.y1), centre + oy + s * (si * g.x1 + c * g.y1)});
    for (std::size_t k = 0; k < kClutterStrokes; ++k) {
      const double r = 0.4 * sz * std::sqrt(uniform01(rng)), phi = uniform(rng, 0, 2 * std::numbers::pi);
      const double half = 0.5 * sz * uniform(rng, 0.12, 0.28), a = uniform(rng, 0, std::numbers::pi);
      const double cx = centre + r * std::cos(phi), cy = centre + r * std::sin(phi);
      clutter.push_back({cx - half * std::cos(a), cy - half * std::sin(a), cx + half * std::cos(a), cy + half * std::sin(a)});
    }
    float* img = d.pixels.data() + i * size * size;
    for (std::size_t u = 0; u < size; ++u)
      for (std::size_t v = 0; v < size; ++v) {
        const double px = static_cast<double>(v), py = static_cast<double>(u);
        double dist = 1e9, cdist = 1e9;
        for (const auto& sg : segs) dist = std::min(dist, segment_distance(px, py, sg));
        for (const auto& sg : clutter) cdist = std::min(cdist, segment_distance(px, py, sg));
        const double ink = std::max(std::clamp(1.5 - dist, 0.0, 1.0), kClutterInk * std::clamp(1.5 - cdist, 0.0, 1.0));
        img[u * size + v] = static_cast<float>(quantise(ink + uniform(rng, -kNoise, kNoise))) / 255.0f;
      }
  }
  return d;
}

std::vector<std::size_t> stratified_subset(const Dataset& data, std::size_t count, std::uint64_t seed) {
  if (count > data.size())
    throw ContractError("stratified_subset: count " + std::to_string(count) + " exceeds dataset size " +
                        std::to_string(data.size()));
  if (count < data.classes)
    throw ContractError("stratified_subset: count " + std::to_string(count) + " is below the class count " +
                        std::to_string(data.classes));
  const auto counts = data.class_counts();
  const std::size_t total = data.size();
  std::vector<std::size_t> take(data.classes);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < data.classes; ++c) {
    const double ideal = static_cast<double>(count) * static_cast<double>(counts[c]) / static_cast<double>(total);
    take[c] = static_cast<std::size_t>(std::floor(ideal));
    assigned += take[c];
    remainders.emplace_back(ideal - std::floor(ideal), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < count; i = (i + 1) % remainders.size()) {
    const std::size_t c = remainders[i].second;
    if (take[c] < counts[c]) {
      ++take[c];
      ++assigned;
    }
  }

  std::vector<std::vector<std::size_t>> members(data.classes);
  for (std::size_t i = 0; i < total; ++i) members[static_cast<std::size_t>(data.labels[i])].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  out.reserve(count);
  for (std::size_t c = 0; c < data.classes; ++c) {
    shuffle(members[c], rng);
    out.insert(out.end(), members[c].begin(), members[c].begin() + static_cast<std::ptrdiff_t>(take[c]));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> stratified_subset(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractError("stratified_subset: fraction must be in (0, 1]");
  return stratified_subset(data, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size()))), seed);
}

template <typename T>
Tensor<T> augment_random_rotation(const Tensor<T>& batch, std::mt19937_64& rng) {
  if (batch.rank() != 4) throw DimensionError("augment_random_rotation expects [N,C,H,W], got " + shape_str(batch.shape()));
  const auto& s = batch.shape();
  const std::size_t per = s[1] * s[2] * s[3];
  Tensor<T> out(batch.shape());
  for (std::size_t i = 0; i < s[0]; ++i) {
    const double angle = uniform(rng, 0, 2 * std::numbers::pi);
    Tensor<T> img({s[1], s[2], s[3]});
    std::copy_n(batch.data() + i * per, per, img.data());
    const auto rotated = rotate_plane(Var<T>(std::move(img)), angle).value();
    std::copy_n(rotated.data(), per, out.data() + i * per);
  }
  return out;
}

template Tensor<float> Dataset::images<float>(std::span<const std::size_t>) const;
template Tensor<double> Dataset::images<double>(std::span<const std::size_t>) const;
template Tensor<float> augment_random_rotation<float>(const Tensor<float>&, std::mt19937_64&);
template Tensor<double> augment_random_rotation<double>(const Tensor<double>&, std::mt19937_64&);

}  // namespace rinv
