#include "ddrvlad/evaluation.h"

#include <algorithm>

namespace ddrvlad {

GroundTruth ground_truth_from_manifest(const DatasetManifest& manifest, Protocol protocol) {
  GroundTruth gt;
  gt.protocol = protocol;
  std::map<std::string, std::vector<const ManifestEntry*>> by_class;
  for (const auto& e : manifest.entries) by_class[e.class_id].push_back(&e);
  for (const auto& e : manifest.entries) {
    if (!e.is_query) continue;
    QueryTruth truth;
    for (const auto* other : by_class[e.class_id]) {
      if (other->image_id == e.image_id && protocol == Protocol::exclude_query) continue;
      truth.relevant.insert(other->image_id);
    }
    truth.junk.insert(e.junk.begin(), e.junk.end());
    if (truth.relevant.empty())
      throw Error("query '" + e.image_id + "' has no relevant images under protocol " + to_string(protocol));
    gt.queries.emplace(e.image_id, std::move(truth));
  }
  if (gt.queries.empty()) throw Error("manifest '" + manifest.dataset_name + "' has no query entries");
  return gt;
}

double average_precision(const RankedList& ranked, const std::set<std::string>& relevant,
                         const std::set<std::string>& junk) {
  if (relevant.empty()) throw Error("average precision needs a non-empty relevant set");
  std::size_t rank = 0;
  std::size_t found = 0;
  double sum = 0.0;
  for (const auto& hit : ranked.hits) {
    if (junk.count(hit.image_id)) continue;
    ++rank;
    if (relevant.count(hit.image_id)) {
      ++found;
      sum += static_cast<double>(found) / static_cast<double>(rank);
    }
  }
  if (rank == 0) throw Error("ranked list for '" + ranked.query_id + "' is empty after exclusions");
  return sum / static_cast<double>(relevant.size());
}

namespace {

const QueryTruth& truth_for(const GroundTruth& gt, const std::string& query_id) {
  auto it = gt.queries.find(query_id);
  if (it == gt.queries.end()) throw Error("no ground truth for query '" + query_id + "'");
  return it->second;
}

double ordered_mean(std::vector<std::pair<std::string, double>>& per_query) {
  std::sort(per_query.begin(), per_query.end());
  double sum = 0.0;
  for (const auto& [id, v] : per_query) sum += v;
  return per_query.empty() ? 0.0 : sum / static_cast<double>(per_query.size());
}

}  // namespace

MeanApResult mean_ap(const std::vector<RankedList>& all_ranked, const GroundTruth& gt) {
  MeanApResult out;
  for (const auto& ranked : all_ranked) {
    const auto& truth = truth_for(gt, ranked.query_id);
    out.per_query.emplace_back(ranked.query_id, average_precision(ranked, truth.relevant, truth.junk));
  }
  out.value = ordered_mean(out.per_query);
  return out;
}

UkbResult ukb_score(const std::vector<RankedList>& all_ranked, const GroundTruth& gt) {
  if (gt.protocol != Protocol::include_query) throw Error("UKB score requires the include_query protocol");
  UkbResult out;
  for (const auto& ranked : all_ranked) {
    if (ranked.hits.size() < 4)
      throw Error("UKB score needs at least 4 results for '" + ranked.query_id + "'");
    const auto& truth = truth_for(gt, ranked.query_id);
    double count = 0.0;
    for (std::size_t r = 0; r < 4; ++r) count += truth.relevant.count(ranked.hits[r].image_id) ? 1.0 : 0.0;
    out.per_query.emplace_back(ranked.query_id, count);
  }
  out.value = ordered_mean(out.per_query);
  return out;
}

}  // namespace ddrvlad
