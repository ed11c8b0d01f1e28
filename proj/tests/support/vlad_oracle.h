#pragma once

// Straight-line VLAD reference used only by tests: nearest centroid by a
// plain scan, residuals normalized one by one, one global mean/std, final
// L2. Shares no code with the library's encoder.

#include <cmath>
#include <vector>

namespace ddrvlad::testing {

using Rows = std::vector<std::vector<double>>;

inline std::vector<double> oracle_vlad(const Rows& descriptors, const Rows& centroids, bool* sigma_guard = nullptr,
                                       std::vector<double>* pre_l2 = nullptr) {
  const std::size_t k = centroids.size();
  const std::size_t d = centroids[0].size();
  std::vector<double> v(k * d, 0.0);
  for (const auto& x : descriptors) {
    std::size_t best = 0;
    double best_dist = 1e300;
    for (std::size_t c = 0; c < k; ++c) {
      double dist = 0;
      for (std::size_t j = 0; j < d; ++j) dist += (x[j] - centroids[c][j]) * (x[j] - centroids[c][j]);
      if (dist < best_dist) {
        best_dist = dist;
        best = c;
      }
    }
    const double norm = std::sqrt(best_dist);
    if (norm < 1e-12) continue;
    for (std::size_t j = 0; j < d; ++j) v[best * d + j] += (x[j] - centroids[best][j]) / norm;
  }
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sigma = std::sqrt(var / static_cast<double>(v.size()));
  const bool guard = sigma < 1e-12;
  if (sigma_guard) *sigma_guard = guard;
  if (!guard)
    for (double& x : v) x = (x - mean) / sigma;
  if (pre_l2) *pre_l2 = v;
  double norm = 0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm >= 1e-12)
    for (double& x : v) x /= norm;
  else
    for (double& x : v) x = 0;
  return v;
}

}  // namespace ddrvlad::testing
