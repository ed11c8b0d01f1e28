#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ddrvlad/common.h"
#include "ddrvlad/vlad.h"

namespace ddrvlad {

inline constexpr double kDefaultRidge = 1e-9;
/// Components with eigenvalue below this are unusable.
inline constexpr double kMinEigenvalue = 1e-10;

struct WhiteningModel {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  double ridge = 0.0;
  std::string trained_on;
  std::vector<double> mean;
  /// output_dim x input_dim; row i is the i-th principal direction divided
  /// by sqrt(eigenvalue_i + ridge).
  Matrix basis;
  /// Non-increasing, all >= kMinEigenvalue.
  std::vector<double> eigenvalues;

  /// Writes <prefix>_mean.fmap, <prefix>_basis.fmap and <prefix>.json.
  void save(const std::filesystem::path& prefix) const;
  static WhiteningModel load(const std::filesystem::path& prefix);
};

/// PCA on the rows of train (n x D) with covariance normalized by n. Uses
/// the n x n Gram matrix when n < D. Eigenvector signs are fixed so the
/// largest-magnitude coordinate is positive.
WhiteningModel whitening_fit(const Matrix& train, std::size_t output_dim, double ridge = kDefaultRidge);

/// basis * (x - mean), without renormalization.
std::vector<double> whitening_project(const WhiteningModel& model, std::span<const double> x);

/// Projects an l2_final vector and re-normalizes it to unit length.
VladVector whitening_apply(const WhiteningModel& model, const VladVector& v);

}  // namespace ddrvlad
