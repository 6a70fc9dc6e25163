#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fmn/descriptor.hpp"
#include "fmn/rerank.hpp"

namespace fmn {

struct EvalProtocol {
  bool exclude_same_camera_same_id = true;
  std::vector<std::size_t> ranks_reported{1, 5, 20};

  /// Ranks must be positive and strictly ascending.
  void validate() const;

  bool operator==(const EvalProtocol&) const = default;
};

struct EntryLabel {
  std::string key;
  std::uint32_t identity = 0;
  std::uint32_t camera = 0;
};

/// Gallery positions in rank order.
using RankedList = std::vector<std::size_t>;

/// Ground-truth hits of one ranked list after protocol exclusions: the
/// 1-based positions of same-identity entries within the filtered list.
std::vector<std::size_t> match_positions(const RankedList& list, const EntryLabel& query,
                                         std::span<const EntryLabel> gallery, const EvalProtocol& protocol);

/// Mean over queries of "a true match appears within the top i", for each
/// requested rank. ProtocolError names any query without a valid match.
std::map<std::size_t, double> cmc(std::span<const RankedList> lists, std::span<const EntryLabel> queries,
                                  std::span<const EntryLabel> gallery, const EvalProtocol& protocol);

/// Mean of t / p_t over the ground-truth matches.
double average_precision(const RankedList& list, const EntryLabel& query, std::span<const EntryLabel> gallery,
                         const EvalProtocol& protocol);

double mean_average_precision(std::span<const RankedList> lists, std::span<const EntryLabel> queries,
                              std::span<const EntryLabel> gallery, const EvalProtocol& protocol);

struct EvalReport {
  std::map<std::size_t, double> cmc;
  double map_score = 0.0;
  std::vector<std::string> query_keys;
  std::vector<double> per_query_ap;
  EvalProtocol protocol;
  std::optional<ReRankConfig> rerank;

  std::size_t num_queries() const { return per_query_ap.size(); }
};

std::vector<EntryLabel> labels_of(const GalleryIndex& index);

/// Gallery ranking for every query: plain Euclidean, or re-ranked when a
/// configuration is given.
std::vector<std::vector<RankedEntry>> rank_queries(const GalleryIndex& queries, const GalleryIndex& gallery,
                                                   const std::optional<ReRankConfig>& rerank_config);

EvalReport evaluate(const GalleryIndex& queries, const GalleryIndex& gallery, const EvalProtocol& protocol,
                    const std::optional<ReRankConfig>& rerank_config = std::nullopt);

/// {"rank1":..,"rank5":..,"rank20":..,"mAP":..,"num_queries":..,"protocol":{..}}
/// with one "rank<i>" field per reported rank.
std::string report_to_json(const EvalReport& report);

/// "query_key TAB ap" per query.
std::string per_query_ap_tsv(const EvalReport& report);

}  // namespace fmn
