#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ddrvlad/common.h"

namespace ddrvlad {

inline constexpr double kUnitNormTolerance = 1e-6;

struct Hit {
  std::string image_id;
  double distance = 0.0;
};

struct RankedList {
  std::string query_id;
  /// Ascending distance; ties keep insertion order.
  std::vector<Hit> hits;
};

/// Exact L2 index over unit-norm database vectors. Immutable once built.
class Index {
 public:
  Index() = default;

  std::size_t size() const { return matrix_.rows; }
  std::size_t dim() const { return matrix_.cols; }
  const std::vector<std::string>& ids() const { return ids_; }
  const Matrix& matrix() const { return matrix_; }

  /// Exhaustive scan. top_k = nullopt returns every (non-excluded) row.
  RankedList search(std::span<const double> query, std::optional<std::size_t> top_k = std::nullopt,
                    const std::optional<std::string>& exclude_id = std::nullopt,
                    const std::string& query_id = {}, unsigned threads = 1) const;

  /// Writes <dir>/index.fmap and <dir>/index.json.
  void save(const std::filesystem::path& dir) const;
  static Index load(const std::filesystem::path& dir);

  friend Index index_build(Matrix vectors, std::vector<std::string> ids);

 private:
  Matrix matrix_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::size_t> row_of_;
};

/// Rejects duplicate ids, non-finite rows and rows that are not unit-norm.
Index index_build(Matrix vectors, std::vector<std::string> ids);

}  // namespace ddrvlad
