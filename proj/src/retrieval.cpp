#include "ddrvlad/retrieval.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "ddrvlad/parallel.h"
#include "ddrvlad/tensor_store.h"

namespace ddrvlad {

namespace {
constexpr std::size_t kScanChunk = 1024;
}

Index index_build(Matrix vectors, std::vector<std::string> ids) {
  if (ids.size() != vectors.rows)
    throw Error("index has " + std::to_string(vectors.rows) + " vectors but " + std::to_string(ids.size()) +
                " ids");
  Index idx;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!idx.row_of_.emplace(ids[i], i).second) throw Error("duplicate id '" + ids[i] + "' in index");
    const auto row = vectors.row(i);
    if (!std::all_of(row.begin(), row.end(), [](double v) { return std::isfinite(v); }))
      throw Error("non-finite vector for id '" + ids[i] + "'");
    const double norm = l2_norm(row);
    if (std::abs(norm - 1.0) > kUnitNormTolerance)
      throw Error("vector for id '" + ids[i] + "' is not unit-norm (norm " + std::to_string(norm) + ")");
  }
  idx.matrix_ = std::move(vectors);
  idx.ids_ = std::move(ids);
  return idx;
}

RankedList Index::search(std::span<const double> query, std::optional<std::size_t> top_k,
                         const std::optional<std::string>& exclude_id, const std::string& query_id,
                         unsigned threads) const {
  if (query.size() != dim())
    throw Error("query dimension " + std::to_string(query.size()) + " does not match index dimension " +
                std::to_string(dim()));
  std::vector<double> dist(size());
  parallel_chunks(size(), kScanChunk, threads, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) dist[i] = std::sqrt(squared_l2(query, matrix_.row(i)));
  });

  std::vector<std::size_t> order;
  order.reserve(size());
  std::optional<std::size_t> skip;
  if (exclude_id) {
    if (auto it = row_of_.find(*exclude_id); it != row_of_.end()) skip = it->second;
  }
  for (std::size_t i = 0; i < size(); ++i)
    if (!skip || *skip != i) order.push_back(i);

  const std::size_t keep = std::min(order.size(), top_k.value_or(order.size()));
  const auto closer = [&](std::size_t a, std::size_t b) {
    return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), closer);

  RankedList out;
  out.query_id = query_id;
  out.hits.reserve(keep);
  for (std::size_t r = 0; r < keep; ++r) out.hits.push_back({ids_[order[r]], dist[order[r]]});
  return out;
}

void Index::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_matrix(dir / "index.fmap", matrix_);
  nlohmann::ordered_json meta;
  meta["dim"] = dim();
  meta["ids"] = ids_;
  std::ofstream out(dir / "index.json");
  if (!out) throw Error("cannot write " + (dir / "index.json").string());
  out << meta.dump(2) << '\n';
}

Index Index::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "index.json");
  if (!in) throw Error("missing index sidecar in " + dir.string());
  const auto meta = nlohmann::json::parse(in);
  Matrix m = read_matrix(dir / "index.fmap");
  if (meta.at("dim").get<std::size_t>() != m.cols) throw Error("index sidecar dim disagrees with tensor");
  return index_build(std::move(m), meta.at("ids").get<std::vector<std::string>>());
}

}  // namespace ddrvlad
