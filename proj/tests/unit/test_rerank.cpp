#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fmn/rerank.hpp"
#include "oracles/retrieval_oracle.hpp"
#include "support.hpp"

using fmn::DistanceMatrix;

namespace {

std::vector<std::vector<double>> line(std::initializer_list<double> xs) {
  std::vector<std::vector<double>> pts;
  for (double x : xs) pts.push_back({x});
  return pts;
}

std::vector<std::vector<double>> cloud(fmn::Rng& rng, std::size_t n, std::size_t dim, bool clustered, bool lattice) {
  std::vector<std::vector<double>> centers;
  for (int c = 0; c < 5; ++c) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.uniform(-3, 3);
    centers.push_back(v);
  }
  std::vector<std::vector<double>> pts;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      double x = clustered ? centers[rng.below(5)][d] + rng.normal(0, 0.5) : rng.uniform(-1, 1);
      // Integer coordinates produce many exactly equal distances.
      v[d] = lattice ? std::round(x * 2.0) : x;
    }
    pts.push_back(v);
  }
  return pts;
}

void expect_close(const std::vector<double>& a, const std::vector<double>& b, double tol = 1e-12) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t j = 0; j < a.size(); ++j) EXPECT_NEAR(a[j], b[j], tol) << j;
}

std::vector<std::size_t> as_vector(const std::set<std::size_t>& s) { return {s.begin(), s.end()}; }

}  // namespace

// ---- neighbourhoods -------------------------------------------------------------------

TEST(Knn, TwoPointsSeeEachOther) {
  const auto d = DistanceMatrix::euclidean(line({0, 5}));
  EXPECT_EQ(fmn::knn(d, 0, 1), (std::vector<std::size_t>{1}));
  EXPECT_EQ(fmn::knn(d, 1, 1), (std::vector<std::size_t>{0}));
  EXPECT_EQ(fmn::k_reciprocal_neighbors(d, 0, 1), (std::vector<std::size_t>{1}));
}

TEST(Knn, EqualDistancesPreferLowerIndex) {
  // Point 0 is equidistant from the other four.
  const auto d = DistanceMatrix::euclidean(std::vector<std::vector<double>>{{0, 0}, {1, 0}, {0, 1}, {-1, 0}, {0, -1}});
  EXPECT_EQ(fmn::knn(d, 0, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(fmn::knn(d, 0, 4), (std::vector<std::size_t>{1, 2, 3, 4}));
}

TEST(Knn, HandDistancesOnALine) {
  const auto d = DistanceMatrix::euclidean(line({0, 1, 3, 7}));
  EXPECT_EQ(fmn::knn(d, 0, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(fmn::knn(d, 3, 2), (std::vector<std::size_t>{2, 1}));
}

TEST(Knn, KOutOfRangeIsContractError) {
  const auto d = DistanceMatrix::euclidean(line({0, 1, 3}));
  EXPECT_THROW(fmn::knn(d, 0, 3), fmn::ContractError);
  EXPECT_THROW(fmn::knn(d, 0, 0), fmn::ContractError);
  EXPECT_THROW(fmn::k_reciprocal_neighbors(d, 0, 3), fmn::ContractError);
}

TEST(ReciprocalNeighbors, HubIsLeftOut) {
  // Two tight pairs far apart and a hub in the middle: the hub's nearest
  // points all prefer their partner.
  const auto pts = line({-10, -11, 10, 11, 0});
  const auto d = DistanceMatrix::euclidean(pts);
  const fmn::oracle::ReRanker ref(pts, 1, 1, 0.0);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto r = fmn::mutual_neighbors(d, i, 1);
    EXPECT_EQ(r, as_vector(ref.mutual(i, 1))) << i;
    if (i != 4) {
      EXPECT_EQ(std::count(r.begin(), r.end(), 4u), 0) << i;
    }
  }
  EXPECT_TRUE(fmn::mutual_neighbors(d, 4, 1).empty());
  EXPECT_EQ(fmn::mutual_neighbors(d, 0, 1), (std::vector<std::size_t>{1}));
}

TEST(ReciprocalNeighbors, SubsetOfKnnAndReciprocal) {
  fmn::Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto pts = cloud(rng, 30, 3, trial % 2 == 0, trial % 3 == 0);
    const auto d = DistanceMatrix::euclidean(pts);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto nn = fmn::knn(d, i, 6);
      for (std::size_t j : fmn::mutual_neighbors(d, i, 6)) {
        EXPECT_NE(std::find(nn.begin(), nn.end(), j), nn.end());
        const auto back = fmn::knn(d, j, 6);
        EXPECT_NE(std::find(back.begin(), back.end(), i), back.end());
      }
    }
  }
}

TEST(ReciprocalNeighbors, ExpansionMatchesBruteForce) {
  fmn::Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 8 + rng.below(40);
    const auto pts = cloud(rng, n, 2 + rng.below(3), trial % 2 == 0, trial % 4 == 1);
    const auto d = DistanceMatrix::euclidean(pts);
    const std::size_t k = 1 + rng.below(n / 2);
    const fmn::oracle::ReRanker ref(pts, k, 1, 0.3);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_EQ(fmn::mutual_neighbors(d, i, k), as_vector(ref.mutual(i, k)));
      EXPECT_EQ(fmn::k_reciprocal_neighbors(d, i, k), as_vector(ref.expanded(i, k)));
    }
  }
}

// ---- features ----------------------------------------------------------------------------

TEST(ReciprocalFeature, HandWeightsOnALine) {
  const auto d = DistanceMatrix::euclidean(line({0, 1, 3, 7}));
  EXPECT_EQ(fmn::k_reciprocal_neighbors(d, 0, 2), (std::vector<std::size_t>{1, 2}));
  const auto f = fmn::encode_reciprocal_feature(d, 0, {2, 1, 0.3});
  const double z = std::exp(-1.0) + std::exp(-3.0);
  ASSERT_EQ(f.weights.size(), 4u);
  EXPECT_EQ(f.weights[0], 0.0);
  EXPECT_NEAR(f.weights[1], std::exp(-1.0) / z, 1e-15);
  EXPECT_NEAR(f.weights[2], std::exp(-3.0) / z, 1e-15);
  EXPECT_EQ(f.weights[3], 0.0);
}

TEST(ReciprocalFeature, SupportEqualsExpandedSet) {
  fmn::Rng rng(9);
  const auto pts = cloud(rng, 40, 3, true, false);
  const auto d = DistanceMatrix::euclidean(pts);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto raw = fmn::raw_reciprocal_feature(d, i, 8);
    std::vector<std::size_t> support;
    double total = 0;
    for (std::size_t j = 0; j < raw.weights.size(); ++j) {
      if (raw.weights[j] > 0) support.push_back(j);
      EXPECT_LE(raw.weights[j], 1.0);
      total += raw.weights[j];
    }
    EXPECT_EQ(support, fmn::k_reciprocal_neighbors(d, i, 8));
    if (!support.empty()) {
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(ReciprocalFeature, SingleNeighbourExpansionIsIdentity) {
  fmn::Rng rng(10);
  const auto pts = cloud(rng, 25, 2, true, false);
  const auto d = DistanceMatrix::euclidean(pts);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_EQ(fmn::encode_reciprocal_feature(d, i, {5, 1, 0.3}).weights, fmn::raw_reciprocal_feature(d, i, 5).weights);
  }
}

TEST(ReciprocalFeature, QueryExpansionMatchesBruteForce) {
  fmn::Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const auto pts = cloud(rng, 40, 3, trial % 2 == 0, trial % 3 == 0);
    const fmn::ReRankConfig config{9, 4, 0.3};
    const auto d = DistanceMatrix::euclidean(pts);
    const fmn::oracle::ReRanker ref(pts, config.k1, config.k2, config.lambda);
    const auto all = fmn::encode_all_features(d, config);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      expect_close(fmn::raw_reciprocal_feature(d, i, config.k1).weights, ref.raw_feature(i));
      expect_close(fmn::encode_reciprocal_feature(d, i, config).weights, ref.feature(i));
      expect_close(all[i].weights, ref.feature(i));
    }
  }
}

// ---- distances -----------------------------------------------------------------------------

TEST(Jaccard, Endpoints) {
  const fmn::ReciprocalFeature a{{0.2, 0.8, 0}}, b{{0, 0, 1}}, empty{{0, 0, 0}};
  EXPECT_EQ(fmn::jaccard_distance(a, a), 0.0);
  EXPECT_EQ(fmn::jaccard_distance(a, b), 1.0);
  EXPECT_EQ(fmn::jaccard_distance(empty, empty), 1.0);
}

TEST(Jaccard, HandExample) {
  const fmn::ReciprocalFeature a{{0.5, 0.5, 0}}, b{{0.5, 0, 0.5}};
  EXPECT_NEAR(fmn::jaccard_distance(a, b), 2.0 / 3.0, 1e-15);
}

TEST(Jaccard, SymmetricAndBounded) {
  fmn::Rng rng(12);
  for (int t = 0; t < 200; ++t) {
    fmn::ReciprocalFeature a{std::vector<double>(6)}, b{std::vector<double>(6)};
    for (std::size_t j = 0; j < 6; ++j) {
      a.weights[j] = rng.bernoulli(0.5) ? rng.uniform() : 0.0;
      b.weights[j] = rng.bernoulli(0.5) ? rng.uniform() : 0.0;
    }
    const double ab = fmn::jaccard_distance(a, b);
    EXPECT_EQ(ab, fmn::jaccard_distance(b, a));
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
  }
}

TEST(Aggregate, LinearBlend) {
  EXPECT_EQ(fmn::aggregate_distance(2.0, 0.5, 1.0), 2.0);
  EXPECT_EQ(fmn::aggregate_distance(2.0, 0.5, 0.0), 0.5);
  EXPECT_NEAR(fmn::aggregate_distance(2.0, 0.5, 0.3), 0.95, 1e-15);
}

// ---- configuration ---------------------------------------------------------------------------

TEST(ReRankConfig, DefaultsAndValidation) {
  const fmn::ReRankConfig c;
  EXPECT_EQ(c.k1, 20u);
  EXPECT_EQ(c.k2, 6u);
  EXPECT_EQ(c.lambda, 0.3);
  EXPECT_NO_THROW(c.validate(21));
  EXPECT_THROW(c.validate(20), fmn::ContractError);
  EXPECT_THROW((fmn::ReRankConfig{3, 4, 0.3}.validate(10)), fmn::ContractError);
  EXPECT_THROW((fmn::ReRankConfig{3, 0, 0.3}.validate(10)), fmn::ContractError);
  EXPECT_THROW((fmn::ReRankConfig{3, 2, 1.1}.validate(10)), fmn::ContractError);
}

TEST(ReRankConfig, ClampingForSmallGalleries) {
  const fmn::ReRankConfig c;
  EXPECT_EQ(c.clamped(72), (fmn::ReRankConfig{20, 6, 0.3}));
  EXPECT_EQ(c.clamped(30), (fmn::ReRankConfig{10, 6, 0.3}));
  EXPECT_EQ(c.clamped(9), (fmn::ReRankConfig{3, 3, 0.3}));
  EXPECT_EQ(c.clamped(2), (fmn::ReRankConfig{1, 1, 0.3}));
  for (std::size_t n = 2; n < 100; ++n) EXPECT_NO_THROW(c.clamped(n).validate(n)) << n;
}

// ---- full re-ranking ---------------------------------------------------------------------------

namespace {

struct Split {
  std::vector<std::vector<double>> queries, gallery;
  std::vector<std::string> keys;
};

Split split(const std::vector<std::vector<double>>& pts, std::size_t num_queries, fmn::Rng& rng) {
  Split s;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i < num_queries) {
      s.queries.push_back(pts[i]);
    } else {
      s.gallery.push_back(pts[i]);
      // Short random keys so that key ties and key order both occur.
      s.keys.push_back(std::string(1, static_cast<char>('a' + rng.below(6))));
    }
  }
  return s;
}

}  // namespace

TEST(Rerank, MatchesBruteForceOnSmallFixtures) {
  fmn::Rng rng(13);
  std::size_t fixtures = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 6 + rng.below(59);  // universe of at most 64 entries
    const std::size_t nq = 1 + rng.below(n / 3);
    const auto pts = cloud(rng, n, 1 + rng.below(4), trial % 2 == 0, trial % 3 == 0);
    const auto s = split(pts, nq, rng);
    const std::size_t k1 = 1 + rng.below(s.gallery.size() - 1);
    const fmn::ReRankConfig config{k1, 1 + rng.below(k1), rng.uniform()};
    const auto out = fmn::rerank(s.queries, s.gallery, s.keys, config);
    const fmn::oracle::ReRanker ref(pts, config.k1, config.k2, config.lambda);
    ASSERT_EQ(out.size(), nq);
    for (std::size_t q = 0; q < nq; ++q) {
      const auto expected = ref.rank(q, nq, s.keys);
      ASSERT_EQ(out[q].size(), expected.size());
      for (std::size_t r = 0; r < expected.size(); ++r) {
        ASSERT_EQ(out[q][r].index, expected[r]) << "trial " << trial << " query " << q << " rank " << r;
        const std::size_t u = nq + expected[r];
        EXPECT_NEAR(out[q][r].distance, config.lambda * ref.d(q, u) + (1.0 - config.lambda) * ref.jaccard(q, u),
                    1e-12);
        EXPECT_EQ(out[q][r].key, s.keys[expected[r]]);
      }
    }
    ++fixtures;
  }
  EXPECT_EQ(fixtures, 60u);
}

TEST(Rerank, LambdaOneReproducesPlainRanking) {
  fmn::Rng rng(14);
  const auto pts = cloud(rng, 40, 3, true, false);
  const auto s = split(pts, 8, rng);
  fmn::GalleryIndex index;
  for (std::size_t i = 0; i < s.gallery.size(); ++i) index.add(s.keys[i], 0, 0, s.gallery[i]);
  const auto out = fmn::rerank(s.queries, s.gallery, s.keys, {10, 3, 1.0});
  for (std::size_t q = 0; q < s.queries.size(); ++q) {
    const auto plain = fmn::rank_gallery(s.queries[q], index);
    for (std::size_t r = 0; r < plain.size(); ++r) EXPECT_EQ(out[q][r].index, plain[r].index);
  }
}

TEST(Rerank, OutputIsAPermutation) {
  fmn::Rng rng(15);
  const auto pts = cloud(rng, 50, 4, false, false);
  const auto s = split(pts, 10, rng);
  for (const auto& list : fmn::rerank(s.queries, s.gallery, s.keys, {12, 4, 0.3})) {
    std::vector<bool> seen(s.gallery.size(), false);
    for (const auto& e : list) {
      EXPECT_FALSE(seen[e.index]);
      seen[e.index] = true;
    }
    EXPECT_EQ(std::count(seen.begin(), seen.end(), true), static_cast<long>(s.gallery.size()));
  }
}

TEST(Rerank, InvalidConfigIsContractError) {
  const std::vector<std::vector<double>> q{{0}}, g{{1}, {2}, {3}};
  const std::vector<std::string> keys{"a", "b", "c"};
  EXPECT_THROW(fmn::rerank(q, g, keys, {3, 1, 0.3}), fmn::ContractError);
  EXPECT_THROW(fmn::rerank(q, g, keys, {2, 3, 0.3}), fmn::ContractError);
  EXPECT_NO_THROW(fmn::rerank(q, g, keys, {2, 2, 0.3}));
}

TEST(Rerank, RankingFileFormat) {
  const std::vector<std::string> qk{"q0"};
  const std::vector<std::vector<fmn::RankedEntry>> lists{{{1, "g1", 0.5}, {0, "g0", 1.25}}};
  EXPECT_EQ(fmn::format_ranking(qk, lists), "q0\tg1\t0.5\nq0\tg0\t1.25\n");
}
