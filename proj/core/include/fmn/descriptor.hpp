#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace fmn {

/// Norms at or below this are treated as degenerate.
inline constexpr double kDegenerateNorm = 1e-12;

std::vector<double> l2_normalize(std::span<const double> v);

struct Descriptor {
  std::vector<double> values;  // [alpha * g_hat ; (1 - alpha) * l_hat]
  double alpha = 0.5;
};

Descriptor build_descriptor(std::span<const double> global_g, std::span<const double> local_l, double alpha = 0.5);

double euclidean_distance(std::span<const double> a, std::span<const double> b);

/// Labelled descriptor collection; used for both galleries and query sets.
/// Parallel arrays, immutable once built.
class GalleryIndex {
 public:
  GalleryIndex() = default;

  void add(std::string key, std::uint32_t identity, std::uint32_t camera, std::vector<double> descriptor);

  std::size_t size() const { return keys_.size(); }
  bool empty() const { return keys_.empty(); }
  std::size_t dim() const { return descriptors_.empty() ? 0 : descriptors_.front().size(); }

  const std::vector<double>& descriptor(std::size_t i) const { return descriptors_.at(i); }
  const std::string& key(std::size_t i) const { return keys_.at(i); }
  std::uint32_t identity(std::size_t i) const { return ids_.at(i); }
  std::uint32_t camera(std::size_t i) const { return cams_.at(i); }

  const std::vector<std::vector<double>>& descriptors() const { return descriptors_; }
  const std::vector<std::string>& keys() const { return keys_; }

 private:
  std::vector<std::vector<double>> descriptors_;
  std::vector<std::uint32_t> ids_;
  std::vector<std::uint32_t> cams_;
  std::vector<std::string> keys_;
};

struct RankedEntry {
  std::size_t index = 0;  // position in the gallery
  std::string key;
  double distance = 0.0;
};

/// Orders (distance, key) pairs ascending; ties on both fall back to index.
bool ranks_before(double da, const std::string& ka, std::size_t ia, double db, const std::string& kb,
                  std::size_t ib);

/// Whole gallery sorted by ascending Euclidean distance, ties by key.
std::vector<RankedEntry> rank_gallery(std::span<const double> query, const GalleryIndex& index);

// ---- descriptor files --------------------------------------------------------------

struct DescriptorRecord {
  std::string key;
  std::uint32_t identity = 0;
  std::uint32_t camera = 0;
  std::vector<float> values;

  bool operator==(const DescriptorRecord&) const = default;
};

/// "FMND" layout: magic, u32 count, u32 dim, then per record u32 key length,
/// UTF-8 key, u32 identity, u32 camera and dim little-endian float32 values.
std::vector<std::uint8_t> encode_descriptors(std::span<const DescriptorRecord> records);
std::vector<DescriptorRecord> decode_descriptors(std::span<const std::uint8_t> bytes);
void write_descriptors(const std::filesystem::path& path, std::span<const DescriptorRecord> records);
std::vector<DescriptorRecord> read_descriptors(const std::filesystem::path& path);

GalleryIndex make_index(std::span<const DescriptorRecord> records);

}  // namespace fmn
