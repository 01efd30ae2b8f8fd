#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "acal/tensor.hpp"

namespace acal {

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };
std::string split_str(Split split);

// Rendering style of one procedural glyph domain. Identical
// (style, seed, index) always produces the identical image; geometry and
// noise draw from independent per-image streams, so two styles differing
// only in invert/noise share the exact same glyph placement.
struct GlyphStyle {
  bool invert = false;
  int stroke_dilate = 0;          // extra stroke thickness in pixels, 0 or 1
  double noise_sigma = 0.0;
  double max_shift = 3.0;         // uniform shift in [-max_shift, max_shift]
  double max_rotate = 0.45;       // uniform rotation in radians
  double background_level = 0.0;  // additive shift applied before clamping
  int canvas = 16;                // square canvas size
};

struct DomainDataset {
  std::string domain_id;
  Shape image_shape;  // [C,H,W]
  std::vector<double> pixels;  // size() * C*H*W values in [-1, 1]
  std::vector<std::optional<int>> labels;
  int class_count = 0;
  Split split = Split::train;

  std::size_t size() const { return labels.size(); }
  std::size_t image_elems() const { return shape_size(image_shape); }
  std::span<const double> image(std::size_t i) const;
  std::size_t labeled_count() const;
};

struct Batch {
  Tensor images;  // [B,C,H,W]
  std::vector<std::optional<int>> labels;

  std::size_t size() const { return labels.size(); }
  bool fully_labeled() const;
  std::vector<int> labels_or_throw(const std::string& context) const;
};

// Renders ten digit classes from a fixed 5x7 stencil font, upscaled onto the
// style's canvas, with seeded per-image jitter, dilation, inversion and
// noise. Exactly n_per_class * 10 images, fully labeled, class-major order.
DomainDataset gen_glyph_domain(const GlyphStyle& style, int n_per_class,
                               std::uint64_t seed, Split split,
                               std::string domain_id = "glyph");

// IDX ingestion: big-endian magic 0x00000803 for u8 image stacks and
// 0x00000801 for label vectors. Pixels map to [-1,1] via x/127.5 - 1.
DomainDataset load_idx(const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path,
                       std::string domain_id = "idx", Split split = Split::train);

// Inverse of load_idx up to the u8 quantisation; a dataset loaded from IDX
// files exports back to identical bytes.
void save_idx(const DomainDataset& ds, const std::filesystem::path& images_path,
              const std::filesystem::path& labels_path);

// Keeps exactly n labeled items per class, chosen by a seeded in-class
// shuffle, original relative order preserved. Everything else is dropped.
DomainDataset subsample_per_class(const DomainDataset& ds, int n, std::uint64_t seed);

// Per class, keeps labels on round(fraction * class_size) seeded-chosen
// items; the rest stay in the dataset unlabeled. Images are untouched.
DomainDataset strip_labels(const DomainDataset& ds, double labeled_fraction,
                           std::uint64_t seed);

// Index batches for one epoch: seeded shuffle, final short batch emitted.
std::vector<std::vector<std::size_t>> batch_iter(const DomainDataset& ds,
                                                 std::size_t batch_size,
                                                 std::uint64_t seed,
                                                 std::uint64_t epoch);

Batch make_batch(const DomainDataset& ds, const std::vector<std::size_t>& indices);

// P5 image dump plus a CSV manifest (file,index,class,domain,split).
// Single-channel datasets only.
void export_pgm(const DomainDataset& ds, const std::filesystem::path& dir,
                const std::string& prefix);

struct GlyphPairConfig {
  GlyphStyle source_style{};
  GlyphStyle target_style{true, 1, 0.15, 3.0, 0.45, 0.0, 16};
  int source_per_class = 200;
  int target_pool_per_class = 50;  // pool size before low-resource subsampling
  int val_per_class = 50;
  int test_per_class = 50;
  std::uint64_t seed = 1;
};

struct DomainPair {
  DomainDataset src_train, src_val, src_test;
  DomainDataset tgt_train, tgt_val, tgt_test;
};

// Source and target corpora; splits draw from disjoint seed streams.
// tgt_train is the full pool; per-experiment subsampling happens on top.
DomainPair make_glyph_pair(const GlyphPairConfig& cfg);

}  // namespace acal
