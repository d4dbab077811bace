#pragma once

#include "semab/rng.hpp"
#include "semab/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace semab {

/// Images (C x H x W, values in [0, 1]) with class ids in [0, K).
struct LabeledDataset {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return images.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  /// Shape shared by all images; empty for an empty dataset.
  Shape image_shape() const { return images.empty() ? Shape{} : images.front().shape; }
  std::vector<std::size_t> class_histogram() const;

  /// Throws Error("invalid_dataset") on length mismatch, out-of-range
  /// labels or mixed image shapes.
  void validate() const;
};

struct TestExample {
  Tensor image;
  bool is_anomaly = false;
  /// Label in the split's remapped class space; empty for anomalies.
  std::optional<std::size_t> label;
};

/// One hold-out-class configuration: the classifier never sees
/// `held_out_class` during training, and those test examples are the
/// anomalies.
struct HoldOutSplit {
  std::size_t held_out_class = 0;
  std::string held_out_name;
  LabeledDataset train;  // K - 1 classes, labels remapped order-preserving
  std::vector<TestExample> test_examples;
  double skew = 0.0;
  std::size_t trials = 1;
  /// Map from remapped train label back to the source class id.
  std::vector<std::size_t> source_classes;

  /// Fraction of anomalous test examples, recomputed from test_examples.
  double recompute_skew() const;
};

// --- loaders ---------------------------------------------------------------

/// CIFAR-10 binary batch: 3073-byte records (label byte, then 1024 R, G, B
/// bytes each, row-major 32 x 32).
LabeledDataset load_cifar_binary(const std::filesystem::path& path);
/// Concatenates several CIFAR-10 batch files.
LabeledDataset load_cifar_binary(std::span<const std::filesystem::path> paths);

/// IDX images (magic 0x00000803) and labels (magic 0x00000801), big-endian.
LabeledDataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path);

/// Raw tensor container:
///   "SEMT" | u32 version = 1 | u32 N | u32 C | u32 H | u32 W | u32 K |
///   N label bytes | N*C*H*W pixel bytes          (all integers little-endian)
/// Pixels are bytes scaled by 1/255.
LabeledDataset load_raw_tensor(const std::filesystem::path& path);
/// Inverse of load_raw_tensor; pixel values are rounded to the nearest k/255.
void write_raw_tensor(const LabeledDataset& dataset, const std::filesystem::path& path);

/// Parsers over in-memory bytes, used by the file loaders.
LabeledDataset parse_cifar_binary(std::span<const std::uint8_t> bytes);
LabeledDataset parse_raw_tensor(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// --- synthetic shapes --------------------------------------------------------

enum class ShapeKind { disk, square, cross, bar };

ShapeKind parse_shape_kind(std::string_view name);
std::string_view to_string(ShapeKind kind);

/// Colour images of one filled shape per image on a textured background.
/// Position, scale, colours and textures are random and drawn from the same
/// pools for every class, so only the global outline identifies the class.
/// Shapes keep an upright canonical pose up to a small orientation jitter.
LabeledDataset synth_shapes(std::size_t n_per_class, std::span<const ShapeKind> classes,
                            std::size_t image_size, Rng rng);

// --- hold-out-class protocol --------------------------------------------------

/// Split for a single held-out class.
HoldOutSplit make_holdout_split(const LabeledDataset& train, const LabeledDataset& test,
                                std::size_t held_out_class, std::size_t trials_per_class);

/// One split per class, in class order.
std::vector<HoldOutSplit> make_holdout_splits(const LabeledDataset& train,
                                              const LabeledDataset& test,
                                              std::size_t trials_per_class);

// --- transforms ---------------------------------------------------------------

enum class RotationMode { all_four, sampled };

struct RotationBatch {
  std::vector<Tensor> images;
  std::vector<std::size_t> rotation_labels;  // 0, 1, 2, 3 = 0, 90, 180, 270 degrees CCW
};

/// Rotates a square C x H x W image by quarter_turns * 90 degrees
/// counter-clockwise.
Tensor rotate_ccw(const Tensor& image, std::size_t quarter_turns);

/// all_four: every image four times, labels 0..3 in order.
/// sampled: every image once with a uniformly drawn orientation.
RotationBatch rotate_batch(std::span<const Tensor> images, Rng& rng, RotationMode mode);

/// Block-masking geometry; the defaults are the 32 x 32 setting (16 x 16
/// block inside the central 21 x 21 window).
struct MaskGeometry {
  std::size_t window = 21;
  std::size_t block = 16;
  std::size_t min_dim = 26;

  /// Same proportions for a different side length.
  static MaskGeometry scaled_to(std::size_t side);
  /// First row/col of the central window: floor((side - window) / 2).
  std::size_t window_start(std::size_t side) const { return (side - window) / 2; }
  /// Number of valid top-left offsets along one axis.
  std::size_t placements() const { return window - block + 1; }
};

struct MaskPlacement {
  std::size_t top = 0;
  std::size_t left = 0;
};

/// Zeroes a block in all channels; the block lies inside the central window.
/// Throws Error("image_too_small") when H or W < geometry.min_dim.
Tensor random_center_mask(const Tensor& image, Rng& rng, const MaskGeometry& geometry = {},
                          MaskPlacement* placement = nullptr);

/// Zero-pads by `pad`, crops back to the input size at (top, left) in the
/// padded frame, and optionally mirrors horizontally.
Tensor crop_flip(const Tensor& image, std::size_t pad, std::size_t top, std::size_t left,
                 bool flip);
/// Random crop offsets in [0, 2 * pad] and a fair coin for the flip.
Tensor augment_crop_flip(const Tensor& image, std::size_t pad, Rng& rng);

}  // namespace semab
