#include "fmn/rerank.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "fmn/errors.hpp"

namespace fmn {

void ReRankConfig::validate(std::size_t gallery_size) const {
  if (k2 < 1 || k2 > k1) throw ContractError("rerank: need 1 <= k2 <= k1 (k1=" + std::to_string(k1) +
                                             ", k2=" + std::to_string(k2) + ")");
  if (k1 >= gallery_size) {
    throw ContractError("rerank: k1=" + std::to_string(k1) + " must be smaller than the gallery size " +
                        std::to_string(gallery_size));
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ContractError("rerank: lambda must lie in [0, 1]");
}

ReRankConfig ReRankConfig::clamped(std::size_t gallery_size) const {
  ReRankConfig c = *this;
  c.k1 = std::max<std::size_t>(1, std::min(k1, gallery_size / 3));
  c.k2 = std::min(k2, c.k1);
  return c;
}

DistanceMatrix::DistanceMatrix(std::size_t n, std::vector<double> values) : n_(n), values_(std::move(values)) {
  if (values_.size() != n * n) throw DimensionError("DistanceMatrix: value count is not n*n");
}

DistanceMatrix DistanceMatrix::euclidean(std::span<const std::vector<double>> points) {
  const std::size_t n = points.size();
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) v[i * n + j] = euclidean_distance(points[i], points[j]);
  }
  return DistanceMatrix(n, std::move(v));
}

namespace {

void check_k(const DistanceMatrix& d, std::size_t i, std::size_t k) {
  if (i >= d.size()) throw ContractError("knn: index " + std::to_string(i) + " outside the matrix");
  if (k < 1 || k >= d.size()) {
    throw ContractError("knn: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(d.size()) + ")");
  }
}

/// Every row's neighbours in rank order (self excluded) and the inverse
/// permutation, so "i is among the k nearest of j" is a single lookup.
class Neighborhoods {
 public:
  explicit Neighborhoods(const DistanceMatrix& d) : order_(d.size()), position_(d.size()) {
    const std::size_t n = d.size();
    for (std::size_t i = 0; i < n; ++i) {
      auto& row = order_[i];
      row.reserve(n - 1);
      for (std::size_t j = 0; j < n; ++j) {
        if (j != i) row.push_back(j);
      }
      std::sort(row.begin(), row.end(), [&](std::size_t a, std::size_t b) {
        return d(i, a) != d(i, b) ? d(i, a) < d(i, b) : a < b;
      });
      position_[i].assign(n, n);
      for (std::size_t r = 0; r < row.size(); ++r) position_[i][row[r]] = r;
    }
  }

  std::span<const std::size_t> knn(std::size_t i, std::size_t k) const { return {order_[i].data(), k}; }
  bool within(std::size_t j, std::size_t i, std::size_t k) const { return position_[j][i] < k; }

  std::vector<std::size_t> mutual(std::size_t i, std::size_t k) const {
    std::vector<std::size_t> out;
    for (std::size_t j : knn(i, k)) {
      if (within(j, i, k)) out.push_back(j);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  std::vector<std::size_t> expanded(std::size_t i, std::size_t k) const {
    const std::vector<std::size_t> base = mutual(i, k);
    std::vector<std::size_t> out = base;
    const std::size_t half = k / 2;
    if (half >= 1) {
      for (std::size_t j : base) {
        const std::vector<std::size_t> cand = mutual(j, half);
        std::vector<std::size_t> common;
        std::set_intersection(base.begin(), base.end(), cand.begin(), cand.end(), std::back_inserter(common));
        if (3 * common.size() >= 2 * cand.size()) {
          std::vector<std::size_t> merged;
          std::set_union(out.begin(), out.end(), cand.begin(), cand.end(), std::back_inserter(merged));
          out.swap(merged);
        }
      }
    }
    std::erase(out, i);
    return out;
  }

 private:
  std::vector<std::vector<std::size_t>> order_;
  std::vector<std::vector<std::size_t>> position_;
};

ReciprocalFeature raw_feature(const DistanceMatrix& d, const Neighborhoods& nb, std::size_t i, std::size_t k1) {
  ReciprocalFeature f{std::vector<double>(d.size(), 0.0)};
  const std::vector<std::size_t> support = nb.expanded(i, k1);
  double total = 0.0;
  for (std::size_t j : support) {
    f.weights[j] = std::exp(-d(i, j));
    total += f.weights[j];
  }
  if (total > 0.0) {
    for (std::size_t j : support) f.weights[j] /= total;
  }
  return f;
}

/// Members of the query-expansion average: i first, then its nearest
/// neighbours in rank order.
std::vector<std::size_t> expansion_members(const Neighborhoods& nb, std::size_t i, std::size_t k2) {
  std::vector<std::size_t> members{i};
  if (k2 > 1) {
    const auto near = nb.knn(i, k2 - 1);
    members.insert(members.end(), near.begin(), near.end());
  }
  return members;
}

ReciprocalFeature average(std::span<const ReciprocalFeature* const> features) {
  ReciprocalFeature out{std::vector<double>(features.front()->weights.size(), 0.0)};
  for (const ReciprocalFeature* f : features) {
    for (std::size_t j = 0; j < out.weights.size(); ++j) out.weights[j] += f->weights[j];
  }
  const double n = static_cast<double>(features.size());
  for (double& w : out.weights) w /= n;
  return out;
}

void check_config(const DistanceMatrix& d, std::size_t i, const ReRankConfig& config) {
  check_k(d, i, config.k1);
  if (config.k2 < 1 || config.k2 > config.k1) throw ContractError("rerank: need 1 <= k2 <= k1");
}

}  // namespace

std::vector<std::size_t> knn(const DistanceMatrix& d, std::size_t i, std::size_t k) {
  check_k(d, i, k);
  std::vector<std::size_t> idx;
  idx.reserve(d.size() - 1);
  for (std::size_t j = 0; j < d.size(); ++j) {
    if (j != i) idx.push_back(j);
  }
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return d(i, a) != d(i, b) ? d(i, a) < d(i, b) : a < b; });
  idx.resize(k);
  return idx;
}

std::vector<std::size_t> mutual_neighbors(const DistanceMatrix& d, std::size_t i, std::size_t k) {
  check_k(d, i, k);
  return Neighborhoods(d).mutual(i, k);
}

std::vector<std::size_t> k_reciprocal_neighbors(const DistanceMatrix& d, std::size_t i, std::size_t k) {
  check_k(d, i, k);
  return Neighborhoods(d).expanded(i, k);
}

ReciprocalFeature raw_reciprocal_feature(const DistanceMatrix& d, std::size_t i, std::size_t k1) {
  check_k(d, i, k1);
  return raw_feature(d, Neighborhoods(d), i, k1);
}

ReciprocalFeature encode_reciprocal_feature(const DistanceMatrix& d, std::size_t i, const ReRankConfig& config) {
  check_config(d, i, config);
  const Neighborhoods nb(d);
  std::vector<ReciprocalFeature> raws;
  for (std::size_t m : expansion_members(nb, i, config.k2)) raws.push_back(raw_feature(d, nb, m, config.k1));
  std::vector<const ReciprocalFeature*> ptrs;
  for (const auto& r : raws) ptrs.push_back(&r);
  return average(ptrs);
}

std::vector<ReciprocalFeature> encode_all_features(const DistanceMatrix& d, const ReRankConfig& config) {
  if (d.size() == 0) return {};
  check_config(d, 0, config);
  const Neighborhoods nb(d);
  std::vector<ReciprocalFeature> raws;
  raws.reserve(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) raws.push_back(raw_feature(d, nb, i, config.k1));
  std::vector<ReciprocalFeature> out;
  out.reserve(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::vector<const ReciprocalFeature*> ptrs;
    for (std::size_t m : expansion_members(nb, i, config.k2)) ptrs.push_back(&raws[m]);
    out.push_back(average(ptrs));
  }
  return out;
}

double jaccard_distance(const ReciprocalFeature& a, const ReciprocalFeature& b) {
  if (a.weights.size() != b.weights.size()) throw DimensionError("jaccard_distance: features differ in length");
  double inter = 0.0, uni = 0.0;
  for (std::size_t j = 0; j < a.weights.size(); ++j) {
    inter += std::min(a.weights[j], b.weights[j]);
    uni += std::max(a.weights[j], b.weights[j]);
  }
  if (uni == 0.0) return 1.0;
  return 1.0 - inter / uni;
}

double aggregate_distance(double d_original, double d_jaccard, double lambda) {
  return lambda * d_original + (1.0 - lambda) * d_jaccard;
}

std::vector<std::vector<RankedEntry>> rerank(std::span<const std::vector<double>> queries,
                                             std::span<const std::vector<double>> gallery,
                                             std::span<const std::string> gallery_keys, const ReRankConfig& config) {
  if (gallery.size() != gallery_keys.size()) throw ContractError("rerank: gallery and key counts differ");
  config.validate(gallery.size());
  const std::size_t nq = queries.size();
  std::vector<std::vector<double>> universe(queries.begin(), queries.end());
  universe.insert(universe.end(), gallery.begin(), gallery.end());
  const DistanceMatrix d = DistanceMatrix::euclidean(universe);
  const std::vector<ReciprocalFeature> features = encode_all_features(d, config);

  std::vector<std::vector<RankedEntry>> out(nq);
  for (std::size_t q = 0; q < nq; ++q) {
    auto& list = out[q];
    list.reserve(gallery.size());
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      const double dj = jaccard_distance(features[q], features[nq + g]);
      list.push_back({g, gallery_keys[g], aggregate_distance(d(q, nq + g), dj, config.lambda)});
    }
    std::sort(list.begin(), list.end(), [](const RankedEntry& a, const RankedEntry& b) {
      return ranks_before(a.distance, a.key, a.index, b.distance, b.key, b.index);
    });
  }
  return out;
}

std::string format_ranking(std::span<const std::string> query_keys,
                           std::span<const std::vector<RankedEntry>> rankings) {
  if (query_keys.size() != rankings.size()) throw ContractError("format_ranking: query and ranking counts differ");
  std::string out;
  char buf[64];
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    for (const RankedEntry& e : rankings[q]) {
      std::snprintf(buf, sizeof buf, "%.9g", e.distance);
      out += query_keys[q] + '\t' + e.key + '\t' + buf + '\n';
    }
  }
  return out;
}

}  // namespace fmn
