#pragma once

#include <span>
#include <string>
#include <vector>

#include "fmn/descriptor.hpp"

namespace fmn {

struct ReRankConfig {
  std::size_t k1 = 20;
  std::size_t k2 = 6;
  double lambda = 0.3;

  /// Throws ContractError unless 1 <= k2 <= k1 < gallery_size and
  /// lambda lies in [0, 1].
  void validate(std::size_t gallery_size) const;

  /// Shrinks k1 to at most floor(gallery_size / 3) (but at least 1) and k2 to
  /// at most k1, for galleries too small for the configured neighbourhoods.
  ReRankConfig clamped(std::size_t gallery_size) const;

  bool operator==(const ReRankConfig&) const = default;
};

/// Dense square matrix of pairwise distances, row-major.
class DistanceMatrix {
 public:
  DistanceMatrix() = default;
  DistanceMatrix(std::size_t n, std::vector<double> values);

  /// Euclidean distances between all rows of `points`.
  static DistanceMatrix euclidean(std::span<const std::vector<double>> points);

  std::size_t size() const { return n_; }
  double operator()(std::size_t i, std::size_t j) const { return values_[i * n_ + j]; }

 private:
  std::size_t n_ = 0;
  std::vector<double> values_;
};

/// The k entries closest to i (self excluded), nearest first, ties broken by
/// lower index. Requires 1 <= k < size.
std::vector<std::size_t> knn(const DistanceMatrix& d, std::size_t i, std::size_t k);

/// Mutual k-nearest neighbours of i, before the half-k expansion. Sorted.
std::vector<std::size_t> mutual_neighbors(const DistanceMatrix& d, std::size_t i, std::size_t k);

/// Mutual neighbours expanded by R(j, k/2) for every member j whose half-k set
/// overlaps the original set in at least two thirds of its entries. Sorted,
/// self excluded.
std::vector<std::size_t> k_reciprocal_neighbors(const DistanceMatrix& d, std::size_t i, std::size_t k);

/// Dense non-negative weights over all matrix entries.
struct ReciprocalFeature {
  std::vector<double> weights;
};

/// exp(-d(i,j)) over the expanded reciprocal set, normalized to sum 1.
ReciprocalFeature raw_reciprocal_feature(const DistanceMatrix& d, std::size_t i, std::size_t k1);

/// Raw feature of i averaged with the raw features of its k2 - 1 nearest
/// neighbours (local query expansion; k2 = 1 leaves the raw feature as is).
ReciprocalFeature encode_reciprocal_feature(const DistanceMatrix& d, std::size_t i, const ReRankConfig& config);

/// Expanded features for every entry, sharing the raw features.
std::vector<ReciprocalFeature> encode_all_features(const DistanceMatrix& d, const ReRankConfig& config);

/// 1 - sum(min) / sum(max); two empty features are at distance 1.
double jaccard_distance(const ReciprocalFeature& a, const ReciprocalFeature& b);

double aggregate_distance(double d_original, double d_jaccard, double lambda);

/// Re-ranks the gallery for every query. Queries and gallery together form
/// the neighbourhood universe; no identity or camera labels are read.
std::vector<std::vector<RankedEntry>> rerank(std::span<const std::vector<double>> queries,
                                             std::span<const std::vector<double>> gallery,
                                             std::span<const std::string> gallery_keys, const ReRankConfig& config);

/// "query_key TAB gallery_key TAB distance" per line, in rank order.
std::string format_ranking(std::span<const std::string> query_keys,
                           std::span<const std::vector<RankedEntry>> rankings);

}  // namespace fmn
