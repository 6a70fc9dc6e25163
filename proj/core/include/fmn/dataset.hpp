#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fmn/image_io.hpp"
#include "fmn/tensor.hpp"
#include "fmn/training.hpp"

namespace fmn {

enum class Split { kTrain, kQuery, kGallery };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct ManifestEntry {
  std::string image;  // relative to the manifest's directory
  std::uint32_t identity = 0;
  std::uint32_t camera = 0;
  Split split = Split::kTrain;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::size_t num_identities = 0;
  Shape image_shape{3, 64, 32};
  std::vector<ManifestEntry> entries;

  bool operator==(const DatasetManifest&) const = default;
};

std::string manifest_to_json(const DatasetManifest& manifest);
/// ParseError carries the line number of syntax errors and the JSON path of
/// structural ones. `source` names the input in messages.
DatasetManifest manifest_from_json(std::string_view text, const std::string& source = "manifest");

/// Generator settings. Identities 0..num_train_identities-1 form the training
/// split; the rest are held out for query/gallery. Confusable pairs are
/// (0,1), (2,3), ... and share every global appearance cue.
struct SyntheticConfig {
  std::size_t num_identities = 16;
  std::size_t images_per_identity = 12;
  std::size_t num_cameras = 3;
  std::size_t height = 64;
  std::size_t width = 32;
  std::size_t confusable_pairs = 8;
  std::size_t num_train_identities = 8;
  double occlusion_prob = 0.2;
  double noise_sigma = 0.03;
  std::uint64_t seed = 0;

  void validate() const;

  /// 16 identities in 8 confusable pairs, 12 images each, 3 cameras,
  /// 8 training and 8 held-out identities, occlusion probability 0.2.
  static SyntheticConfig synth_reid_16(std::uint64_t seed);

  bool operator==(const SyntheticConfig&) const = default;
};

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<RgbImage> images;  // parallel to manifest.entries
};

/// Image i of an identity comes from camera i mod num_cameras. For held-out
/// identities the first image of each camera is a query while at least two
/// gallery images remain; everything else is gallery.
SyntheticDataset generate_synthetic(const SyntheticConfig& config);

/// Writes images/<identity>_<index>.ppm and manifest.json under `dir`.
/// Returns the manifest path.
std::filesystem::path write_dataset(const SyntheticDataset& dataset, const std::filesystem::path& dir);

struct LoadedDataset {
  std::filesystem::path manifest_path;
  DatasetManifest manifest;
  std::vector<Tensor<float>> images;  // [3,h,w] in [0,1], parallel to entries
};

LoadedDataset load_dataset(const std::filesystem::path& manifest_path);

Tensor<float> image_to_tensor(const RgbImage& image);

/// Sorted distinct identities; position in the result is the dense label.
std::vector<std::uint32_t> dense_label_map(std::span<const std::uint32_t> identities);

/// Training entries with identities remapped densely in ascending order.
/// `label_map`, when given, receives the original identity of each label.
TrainingSet make_training_set(const LoadedDataset& data, std::vector<std::uint32_t>* label_map = nullptr);

std::vector<std::size_t> entries_in(const DatasetManifest& manifest, Split split);

}  // namespace fmn
