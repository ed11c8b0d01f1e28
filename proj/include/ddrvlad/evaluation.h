#pragma once

#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ddrvlad/common.h"
#include "ddrvlad/retrieval.h"
#include "ddrvlad/tensor_store.h"

namespace ddrvlad {

struct QueryTruth {
  std::set<std::string> relevant;
  /// Ignored when scoring: neither hits nor misses, and they take no rank.
  std::set<std::string> junk;
};

struct GroundTruth {
  Protocol protocol = Protocol::exclude_query;
  std::map<std::string, QueryTruth> queries;
};

/// Relevant images are those sharing the query's class_id; the query itself
/// counts only under include_query.
GroundTruth ground_truth_from_manifest(const DatasetManifest& manifest, Protocol protocol);

/// Non-interpolated AP: mean over relevant items of precision at the rank
/// where each is retrieved; items never retrieved contribute 0.
double average_precision(const RankedList& ranked, const std::set<std::string>& relevant,
                         const std::set<std::string>& junk = {});

struct MeanApResult {
  double value = 0.0;
  /// Sorted by query id.
  std::vector<std::pair<std::string, double>> per_query;
};

/// Unweighted mean of per-query AP, summed in query-id order.
MeanApResult mean_ap(const std::vector<RankedList>& all_ranked, const GroundTruth& gt);

struct UkbResult {
  double value = 0.0;
  std::vector<std::pair<std::string, double>> per_query;
};

/// Mean number of relevant images among the top 4 hits (include_query only).
UkbResult ukb_score(const std::vector<RankedList>& all_ranked, const GroundTruth& gt);

}  // namespace ddrvlad
