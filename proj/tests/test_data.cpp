#include "rinv/data.hpp"
#include "rinv/ops.hpp"
#include "rinv/serialize.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>

using namespace rinv;

namespace {

std::string be32(std::uint32_t v) {
  return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

std::uint32_t read_be32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(s[at + i]);
  return v;
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

std::pair<std::string, std::string> idx_bytes(const Dataset& d) {
  std::ostringstream images(std::ios::binary), labels(std::ios::binary);
  write_idx(images, labels, d);
  return {images.str(), labels.str()};
}

Dataset cycling_labels(std::size_t n, std::size_t classes) {
  Dataset d;
  d.height = d.width = 2;
  d.classes = classes;
  d.pixels.assign(n * 4, 0.0f);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(i % classes));
  return d;
}

}  // namespace

TEST(Idx, HandBuiltSingleImage) {
  std::string images = be32(kIdxImageMagic) + be32(1) + be32(2) + be32(3);
  for (int v : {0, 51, 102, 153, 204, 255}) images.push_back(static_cast<char>(v));
  const std::string labels = be32(kIdxLabelMagic) + be32(1) + std::string(1, '\x03');
  std::istringstream im(images, std::ios::binary), lb(labels, std::ios::binary);
  const Dataset d = read_idx(im, lb);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.height, 2u);
  EXPECT_EQ(d.width, 3u);
  EXPECT_EQ(d.labels[0], 3);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_FLOAT_EQ(d.pixels[i], static_cast<float>(i * 51) / 255.0f);

  const auto [im2, lb2] = idx_bytes(d);
  EXPECT_EQ(im2, images);
  EXPECT_EQ(lb2, labels);
}

TEST(Idx, CountMismatchRejected) {
  const std::string images = be32(kIdxImageMagic) + be32(2) + be32(1) + be32(1) + std::string(2, '\0');
  const std::string labels = be32(kIdxLabelMagic) + be32(3) + std::string(3, '\0');
  std::istringstream im(images, std::ios::binary), lb(labels, std::ios::binary);
  EXPECT_THROW(read_idx(im, lb), FormatError);
}

TEST(Idx, BadMagicAndTruncationReportOffsets) {
  const std::string labels = be32(kIdxLabelMagic) + be32(1) + std::string(1, '\0');
  {
    std::istringstream lb(labels, std::ios::binary);
    std::istringstream bad(be32(0x0801) + be32(1) + be32(1) + be32(1) + "x", std::ios::binary);
    EXPECT_THROW(read_idx(bad, lb), FormatError);
  }
  std::istringstream im(be32(kIdxImageMagic) + be32(1) + be32(4) + be32(4) + "abc", std::ios::binary);
  std::istringstream lb(labels, std::ios::binary);
  try {
    read_idx(im, lb);
    FAIL() << "truncated image data accepted";
  } catch (const FormatError& e) {
    EXPECT_GE(e.offset(), 16u);
  }
}

TEST(Idx, GeneratedFileLayoutAndChecksum) {
  const Dataset d = synth_shapes(100, 24, 4, 11);
  const auto [images, labels] = idx_bytes(d);
  ASSERT_EQ(images.size(), 16u + 100 * 24 * 24);
  ASSERT_EQ(labels.size(), 8u + 100);
  EXPECT_EQ(read_be32(images, 0), kIdxImageMagic);
  EXPECT_EQ(read_be32(images, 4), 100u);
  EXPECT_EQ(read_be32(images, 8), 24u);
  EXPECT_EQ(read_be32(images, 12), 24u);
  EXPECT_EQ(read_be32(labels, 0), kIdxLabelMagic);
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_EQ(static_cast<int>(labels[8 + i]), d.labels[i]);
    const float v = d.pixels[i * 576 + 300];
    EXPECT_EQ(static_cast<unsigned char>(images[16 + i * 576 + 300]), static_cast<unsigned char>(std::lround(v * 255)));
  }
  // pinned: any change to the generator or the writer shows up here
  EXPECT_EQ(fnv1a(images), 3922876886990179486ULL);
  EXPECT_EQ(fnv1a(labels), 5763918954702785982ULL);
}

TEST(Idx, FileRoundTrip) {
  const Dataset d = synth_shapes(40, 16, 3, 5);
  const auto dir = std::filesystem::temp_directory_path();
  const auto im = (dir / "rinv_test_data-images.idx").string(), lb = (dir / "rinv_test_data-labels.idx").string();
  save_idx(im, lb, d);
  const Dataset e = load_idx(im, lb);
  EXPECT_EQ(e.pixels, d.pixels);
  EXPECT_EQ(e.labels, d.labels);
  EXPECT_EQ(e.height, 16u);
  std::filesystem::remove(im);
  std::filesystem::remove(lb);
  EXPECT_THROW(load_idx(im, lb), std::runtime_error);
}

TEST(Synth, EmptyAndBalanced) {
  EXPECT_EQ(synth_shapes(0, 24, 4, 1).size(), 0u);
  const Dataset d = synth_shapes(100, 24, 4, 1);
  EXPECT_EQ(d.class_counts(), (std::vector<std::size_t>{25, 25, 25, 25}));
  for (float v : d.pixels) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
    ASSERT_EQ(v, static_cast<float>(std::lround(v * 255)) / 255.0f);
  }
  EXPECT_THROW(synth_shapes(10, 24, kGlyphCount + 1, 1), ContractError);
}

TEST(Synth, SeedDeterminism) {
  const Dataset a = synth_shapes(30, 24, 4, 9), b = synth_shapes(30, 24, 4, 9), c = synth_shapes(30, 24, 4, 10);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.pixels, c.pixels);
}

TEST(Synth, SamplesDifferInOrientation) {
  const Dataset d = synth_shapes(8, 24, 1, 3);
  std::size_t distinct = 0;
  for (std::size_t i = 1; i < d.size(); ++i)
    distinct += !std::equal(d.pixels.begin(), d.pixels.begin() + 576, d.pixels.begin() + i * 576);
  EXPECT_EQ(distinct, 7u);
}

TEST(Stratified, FullFractionIsIdentity) {
  const Dataset d = synth_shapes(60, 16, 3, 2);
  const auto idx = stratified_subset(d, 1.0, 4);
  ASSERT_EQ(idx.size(), 60u);
  for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(idx[i], i);
}

TEST(Stratified, TenClassesFiveHundred) {
  const Dataset d = cycling_labels(1200, 10);
  const auto idx = stratified_subset(d, std::size_t{500}, 7);
  ASSERT_EQ(idx.size(), 500u);
  EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
  EXPECT_EQ(d.subset(idx).class_counts(), std::vector<std::size_t>(10, 50));
  EXPECT_EQ(stratified_subset(d, std::size_t{500}, 7), idx);
  EXPECT_NE(stratified_subset(d, std::size_t{500}, 8), idx);
}

TEST(Stratified, UnevenRatiosWithinOne) {
  Dataset d = cycling_labels(0, 3);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < (c + 1) * 37; ++i) d.labels.push_back(c);
  d.pixels.assign(d.labels.size() * 4, 0.0f);
  for (std::size_t count : {3u, 17u, 100u, 221u}) {
    const auto counts = d.subset(stratified_subset(d, count, 1)).class_counts();
    std::size_t total = 0;
    for (int c = 0; c < 3; ++c) {
      const double ideal = static_cast<double>(count) * (c + 1) / 6.0;
      EXPECT_LE(std::abs(static_cast<double>(counts[c]) - ideal), 1.0) << count << " class " << c;
      total += counts[c];
    }
    EXPECT_EQ(total, count);
  }
}

TEST(Stratified, ContractErrors) {
  const Dataset d = cycling_labels(40, 4);
  EXPECT_THROW(stratified_subset(d, std::size_t{3}, 0), ContractError);
  EXPECT_THROW(stratified_subset(d, std::size_t{41}, 0), ContractError);
  EXPECT_THROW(stratified_subset(d, 0.0, 0), ContractError);
  EXPECT_THROW(stratified_subset(d, 1.5, 0), ContractError);
}

TEST(Augment, SeedDeterministicAndLabelFree) {
  const Dataset d = synth_shapes(6, 24, 3, 4);
  const std::vector<std::size_t> all{0, 1, 2, 3, 4, 5};
  const auto batch = d.images<double>(all);
  std::mt19937_64 r1(5), r2(5);
  const auto a = augment_random_rotation(batch, r1), b = augment_random_rotation(batch, r2);
  EXPECT_TRUE(rinv::testing::bit_equal(a, b));
  EXPECT_EQ(a.shape(), batch.shape());
  EXPECT_FALSE(rinv::testing::bit_equal(a, batch));
}

TEST(Augment, ZeroAngleIsIdentity) {
  const auto x = rinv::testing::random_tensor<double>({1, 1, 9, 9}, 3);
  EXPECT_TRUE(rinv::testing::bit_equal(rotate_plane(Var<double>(x), 0.0).value(), x));
}

TEST(Augment, RadialImageNearlyUnchanged) {
  Tensor<double> x({1, 1, 25, 25});
  for (std::size_t i = 0; i < 25; ++i)
    for (std::size_t j = 0; j < 25; ++j) {
      const double r2 = (i - 12.0) * (i - 12.0) + (j - 12.0) * (j - 12.0);
      x[i * 25 + j] = std::exp(-r2 / 18.0);
    }
  std::mt19937_64 rng(1);
  for (int t = 0; t < 5; ++t) {
    const auto y = augment_random_rotation(x, rng);
    double worst = 0;
    for (std::size_t i = 0; i < x.numel(); ++i) worst = std::max(worst, std::abs(y[i] - x[i]));
    EXPECT_LT(worst, 3e-2) << t;  // bilinear error, about |f''| / 4 for this Gaussian
  }
}
