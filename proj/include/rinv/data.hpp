// Labelled image sets: IDX files, synthetic rotated glyphs, stratified
// subsets and rotation augmentation.
#pragma once

#include "rinv/serialize.hpp"

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace rinv {

/// Grayscale images in [0, 1], stored row-major as [N, 1, H, W].
struct Dataset {
  std::size_t height = 0, width = 0;
  std::size_t classes = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_size() const noexcept { return height * width; }
  std::vector<std::size_t> class_counts() const;

  /// Images at `indices` as [B, 1, H, W].
  template <typename T>
  Tensor<T> images(std::span<const std::size_t> indices) const;
  std::vector<int> labels_at(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices) const;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// IDX image and label files, pixels quantised to bytes (v / 255).
void write_idx(std::ostream& images, std::ostream& labels, const Dataset& data);
Dataset read_idx(std::istream& images, std::istream& labels);
void save_idx(const std::string& images_path, const std::string& labels_path, const Dataset& data);
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Glyphs in class order: bar, L-corner, T, cross, arc, chevron.
inline constexpr std::size_t kGlyphCount = 6;
const char* glyph_name(std::size_t cls);

/// `n` samples cycling through the first `classes` glyphs, each drawn at a
/// uniformly random angle with small jitter in position and size, plus two
/// randomly placed clutter strokes and uniform pixel noise.
/// Pixels are byte-quantised so the set survives an IDX round trip exactly.
Dataset synth_shapes(std::size_t n, std::size_t size, std::size_t classes, std::uint64_t seed);

/// `count` indices, ascending, with per-class counts within one of the
/// class ratios of `data`.
std::vector<std::size_t> stratified_subset(const Dataset& data, std::size_t count, std::uint64_t seed);
std::vector<std::size_t> stratified_subset(const Dataset& data, double fraction, std::uint64_t seed);

/// Rotates every image of batch[N, C, H, W] by an independent angle in [0, 2 pi).
template <typename T>
Tensor<T> augment_random_rotation(const Tensor<T>& batch, std::mt19937_64& rng);

}  // namespace rinv
