#include "fmn/descriptor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fmn/binary_io.hpp"
#include "fmn/errors.hpp"

namespace fmn {

std::vector<double> l2_normalize(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (!(norm > kDegenerateNorm)) {
    throw DegenerateVectorError("l2_normalize: vector norm " + std::to_string(norm) + " is too small to normalize");
  }
  std::vector<double> out(v.begin(), v.end());
  for (double& x : out) x /= norm;
  return out;
}

Descriptor build_descriptor(std::span<const double> global_g, std::span<const double> local_l, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("build_descriptor: alpha must lie in [0, 1]");
  const std::vector<double> g = l2_normalize(global_g);
  const std::vector<double> l = l2_normalize(local_l);
  Descriptor d;
  d.alpha = alpha;
  d.values.reserve(g.size() + l.size());
  for (double x : g) d.values.push_back(alpha * x);
  for (double x : l) d.values.push_back((1.0 - alpha) * x);
  return d;
}

double euclidean_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("euclidean_distance: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " differ");
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sq += d * d;
  }
  return std::sqrt(sq);
}

void GalleryIndex::add(std::string key, std::uint32_t identity, std::uint32_t camera, std::vector<double> descriptor) {
  if (descriptor.empty()) throw DimensionError("GalleryIndex: empty descriptor for \"" + key + "\"");
  if (!descriptors_.empty() && descriptor.size() != dim()) {
    throw DimensionError("GalleryIndex: descriptor \"" + key + "\" has length " + std::to_string(descriptor.size()) +
                         ", index holds length " + std::to_string(dim()));
  }
  descriptors_.push_back(std::move(descriptor));
  ids_.push_back(identity);
  cams_.push_back(camera);
  keys_.push_back(std::move(key));
}

bool ranks_before(double da, const std::string& ka, std::size_t ia, double db, const std::string& kb,
                  std::size_t ib) {
  if (da != db) return da < db;
  if (ka != kb) return ka < kb;
  return ia < ib;
}

std::vector<RankedEntry> rank_gallery(std::span<const double> query, const GalleryIndex& index) {
  if (index.empty()) throw ContractError("rank_gallery: the gallery is empty");
  if (query.size() != index.dim()) {
    throw DimensionError("rank_gallery: query length " + std::to_string(query.size()) + " does not match gallery " +
                         std::to_string(index.dim()));
  }
  std::vector<RankedEntry> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    out[i] = {i, index.key(i), euclidean_distance(query, index.descriptor(i))};
  }
  std::sort(out.begin(), out.end(), [](const RankedEntry& a, const RankedEntry& b) {
    return ranks_before(a.distance, a.key, a.index, b.distance, b.key, b.index);
  });
  return out;
}

std::vector<std::uint8_t> encode_descriptors(std::span<const DescriptorRecord> records) {
  const std::size_t dim = records.empty() ? 0 : records.front().values.size();
  io::ByteWriter w;
  w.put_bytes("FMND");
  w.put_u32(static_cast<std::uint32_t>(records.size()));
  w.put_u32(static_cast<std::uint32_t>(dim));
  for (const auto& r : records) {
    if (r.values.size() != dim) {
      throw DimensionError("encode_descriptors: record \"" + r.key + "\" has length " +
                           std::to_string(r.values.size()) + ", expected " + std::to_string(dim));
    }
    w.put_u32(static_cast<std::uint32_t>(r.key.size()));
    w.put_bytes(r.key);
    w.put_u32(r.identity);
    w.put_u32(r.camera);
    for (float v : r.values) w.put_f32(v);
  }
  return w.take();
}

std::vector<DescriptorRecord> decode_descriptors(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes, "descriptor file");
  r.expect_magic("FMND");
  const std::uint32_t count = r.get_u32();
  const std::uint32_t dim = r.get_u32();
  std::vector<DescriptorRecord> out;
  out.reserve(std::min<std::size_t>(count, r.remaining() / 12));
  for (std::uint32_t i = 0; i < count; ++i) {
    DescriptorRecord rec;
    rec.key = r.get_string(r.get_u32());
    rec.identity = r.get_u32();
    rec.camera = r.get_u32();
    rec.values.resize(dim);
    for (float& v : rec.values) v = r.get_f32();
    out.push_back(std::move(rec));
  }
  if (!r.at_end()) throw ParseError("descriptor file: trailing bytes after the last record");
  return out;
}

void write_descriptors(const std::filesystem::path& path, std::span<const DescriptorRecord> records) {
  io::write_file(path, encode_descriptors(records));
}

std::vector<DescriptorRecord> read_descriptors(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  try {
    return decode_descriptors(bytes);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

GalleryIndex make_index(std::span<const DescriptorRecord> records) {
  GalleryIndex index;
  for (const auto& r : records) {
    index.add(r.key, r.identity, r.camera, std::vector<double>(r.values.begin(), r.values.end()));
  }
  return index;
}

}  // namespace fmn
