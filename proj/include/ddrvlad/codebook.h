#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ddrvlad/common.h"

namespace ddrvlad {

inline constexpr std::size_t kDefaultWords = 100;
inline constexpr std::size_t kDefaultMaxIters = 100;
inline constexpr double kDefaultTol = 1e-4;
inline constexpr std::size_t kDefaultMaxPool = 2'000'000;

/// K visual words of dimension d.
class Codebook {
 public:
  Codebook() = default;
  /// Validates that centroids are finite and pairwise distinct.
  explicit Codebook(Matrix centroids, std::string trained_on = {}, std::uint64_t seed = 0);

  std::size_t size() const { return centroids_.rows; }
  std::size_t dim() const { return centroids_.cols; }
  const Matrix& centroids() const { return centroids_; }
  std::span<const double> centroid(std::size_t i) const { return centroids_.row(i); }
  const std::string& trained_on() const { return trained_on_; }
  std::uint64_t seed() const { return seed_; }

  /// Index of the nearest centroid; ties go to the lowest index.
  std::size_t quantize(std::span<const double> x) const;

  /// Writes <prefix>.fmap (K x d) and the <prefix>.json sidecar.
  void save(const std::filesystem::path& prefix) const;
  static Codebook load(const std::filesystem::path& prefix);

 private:
  Matrix centroids_;
  std::string trained_on_;
  std::uint64_t seed_ = 0;
};

struct KMeansOptions {
  std::size_t k = kDefaultWords;
  std::uint64_t seed = 0;
  std::size_t max_iters = kDefaultMaxIters;
  double tol = kDefaultTol;
  unsigned threads = 1;
};

struct KMeansResult {
  Codebook codebook;
  /// Objective (sum of squared distances to the assigned centroid) measured
  /// at each assignment step, in iteration order.
  std::vector<double> objective;
  std::size_t iterations = 0;
  bool converged = false;
  std::size_t empty_cluster_reseeds = 0;
};

/// D^2-weighted seeding. Deterministic for a given seed.
Codebook kmeans_pp_init(const Matrix& points, std::size_t k, std::uint64_t seed);

/// Lloyd iterations from kmeans_pp_init. Reduction order is fixed, so the
/// result does not depend on opts.threads.
KMeansResult kmeans_train(const Matrix& points, const KMeansOptions& opts);

/// Nearest-centroid index for every row of points.
std::vector<std::size_t> quantize_all(const Codebook& cb, const Matrix& points, unsigned threads = 1);

/// Uniform sample (without replacement) of at most max_rows rows, kept in
/// original order. Returns points unchanged when already small enough.
Matrix subsample_rows(const Matrix& points, std::size_t max_rows, std::uint64_t seed);

}  // namespace ddrvlad
