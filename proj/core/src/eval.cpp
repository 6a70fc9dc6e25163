#include "fmn/eval.hpp"

#include <cstdio>

#include <nlohmann/json.hpp>

#include "fmn/errors.hpp"

namespace fmn {

void EvalProtocol::validate() const {
  if (ranks_reported.empty()) throw ContractError("eval.ranks must list at least one rank");
  for (std::size_t i = 0; i < ranks_reported.size(); ++i) {
    if (ranks_reported[i] == 0) throw ContractError("eval.ranks must be positive");
    if (i > 0 && ranks_reported[i] <= ranks_reported[i - 1]) throw ContractError("eval.ranks must be ascending");
  }
}

std::vector<std::size_t> match_positions(const RankedList& list, const EntryLabel& query,
                                         std::span<const EntryLabel> gallery, const EvalProtocol& protocol) {
  std::vector<std::size_t> hits;
  std::size_t position = 0;
  for (std::size_t g : list) {
    if (g >= gallery.size()) throw ContractError("ranked list for \"" + query.key + "\" refers past the gallery");
    const EntryLabel& e = gallery[g];
    const bool same_id = e.identity == query.identity;
    if (protocol.exclude_same_camera_same_id && same_id && e.camera == query.camera) continue;
    ++position;
    if (same_id) hits.push_back(position);
  }
  if (hits.empty()) {
    throw ProtocolError("query \"" + query.key + "\" has no valid gallery match under the evaluation protocol");
  }
  return hits;
}

namespace {

void check_sizes(std::span<const RankedList> lists, std::span<const EntryLabel> queries) {
  if (lists.size() != queries.size()) throw ContractError("eval: ranked list and query counts differ");
  if (queries.empty()) throw ContractError("eval: no queries");
}

}  // namespace

std::map<std::size_t, double> cmc(std::span<const RankedList> lists, std::span<const EntryLabel> queries,
                                  std::span<const EntryLabel> gallery, const EvalProtocol& protocol) {
  protocol.validate();
  check_sizes(lists, queries);
  std::map<std::size_t, double> out;
  for (std::size_t r : protocol.ranks_reported) out[r] = 0.0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const std::size_t first = match_positions(lists[q], queries[q], gallery, protocol).front();
    for (auto& [rank, hits] : out) hits += first <= rank ? 1.0 : 0.0;
  }
  for (auto& [rank, value] : out) value /= static_cast<double>(queries.size());
  return out;
}

double average_precision(const RankedList& list, const EntryLabel& query, std::span<const EntryLabel> gallery,
                         const EvalProtocol& protocol) {
  const std::vector<std::size_t> hits = match_positions(list, query, gallery, protocol);
  double sum = 0.0;
  for (std::size_t t = 0; t < hits.size(); ++t) sum += static_cast<double>(t + 1) / static_cast<double>(hits[t]);
  return sum / static_cast<double>(hits.size());
}

double mean_average_precision(std::span<const RankedList> lists, std::span<const EntryLabel> queries,
                              std::span<const EntryLabel> gallery, const EvalProtocol& protocol) {
  check_sizes(lists, queries);
  double sum = 0.0;
  for (std::size_t q = 0; q < queries.size(); ++q) sum += average_precision(lists[q], queries[q], gallery, protocol);
  return sum / static_cast<double>(queries.size());
}

std::vector<EntryLabel> labels_of(const GalleryIndex& index) {
  std::vector<EntryLabel> out;
  out.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out.push_back({index.key(i), index.identity(i), index.camera(i)});
  return out;
}

std::vector<std::vector<RankedEntry>> rank_queries(const GalleryIndex& queries, const GalleryIndex& gallery,
                                                   const std::optional<ReRankConfig>& rerank_config) {
  if (queries.empty() || gallery.empty()) throw ContractError("eval: query and gallery sets must be nonempty");
  if (queries.dim() != gallery.dim()) {
    throw DimensionError("eval: query descriptors have length " + std::to_string(queries.dim()) +
                         ", gallery descriptors " + std::to_string(gallery.dim()));
  }
  if (rerank_config) return rerank(queries.descriptors(), gallery.descriptors(), gallery.keys(), *rerank_config);
  std::vector<std::vector<RankedEntry>> out;
  out.reserve(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) out.push_back(rank_gallery(queries.descriptor(q), gallery));
  return out;
}

EvalReport evaluate(const GalleryIndex& queries, const GalleryIndex& gallery, const EvalProtocol& protocol,
                    const std::optional<ReRankConfig>& rerank_config) {
  protocol.validate();
  const auto rankings = rank_queries(queries, gallery, rerank_config);
  std::vector<RankedList> lists;
  lists.reserve(rankings.size());
  for (const auto& r : rankings) {
    RankedList l;
    l.reserve(r.size());
    for (const RankedEntry& e : r) l.push_back(e.index);
    lists.push_back(std::move(l));
  }
  const std::vector<EntryLabel> q = labels_of(queries);
  const std::vector<EntryLabel> g = labels_of(gallery);

  EvalReport report;
  report.protocol = protocol;
  report.rerank = rerank_config;
  report.cmc = cmc(lists, q, g, protocol);
  double sum = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    report.query_keys.push_back(q[i].key);
    report.per_query_ap.push_back(average_precision(lists[i], q[i], g, protocol));
    sum += report.per_query_ap.back();
  }
  report.map_score = sum / static_cast<double>(q.size());
  return report;
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  for (const auto& [rank, value] : report.cmc) j["rank" + std::to_string(rank)] = value;
  j["mAP"] = report.map_score;
  j["num_queries"] = report.num_queries();
  nlohmann::ordered_json protocol;
  protocol["exclude_same_camera_same_id"] = report.protocol.exclude_same_camera_same_id;
  protocol["ranks"] = report.protocol.ranks_reported;
  if (report.rerank) {
    protocol["rerank"] = {{"k1", report.rerank->k1}, {"k2", report.rerank->k2}, {"lambda", report.rerank->lambda}};
  } else {
    protocol["rerank"] = nullptr;
  }
  j["protocol"] = std::move(protocol);
  return j.dump(2) + "\n";
}

std::string per_query_ap_tsv(const EvalReport& report) {
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < report.per_query_ap.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", report.per_query_ap[i]);
    out += report.query_keys[i] + '\t' + buf + '\n';
  }
  return out;
}

}  // namespace fmn
