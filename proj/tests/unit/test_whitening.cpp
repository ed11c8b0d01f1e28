#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "ddrvlad/whitening.h"
#include "synthetic.h"

using namespace ddrvlad;

namespace {

// Covariance (normalized by n) of the projected, un-renormalized rows.
Matrix whitened_covariance(const WhiteningModel& m, const Matrix& x) {
  Matrix y(x.rows, m.output_dim);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const auto p = whitening_project(m, x.row(i));
    std::copy(p.begin(), p.end(), y.row(i).begin());
  }
  std::vector<double> mean(m.output_dim, 0.0);
  for (std::size_t i = 0; i < y.rows; ++i)
    for (std::size_t j = 0; j < y.cols; ++j) mean[j] += y(i, j) / static_cast<double>(y.rows);
  Matrix cov(y.cols, y.cols);
  for (std::size_t i = 0; i < y.rows; ++i)
    for (std::size_t a = 0; a < y.cols; ++a)
      for (std::size_t b = 0; b < y.cols; ++b)
        cov(a, b) += (y(i, a) - mean[a]) * (y(i, b) - mean[b]) / static_cast<double>(y.rows);
  return cov;
}

double max_identity_error(const Matrix& cov) {
  double worst = 0;
  for (std::size_t a = 0; a < cov.rows; ++a)
    for (std::size_t b = 0; b < cov.cols; ++b) worst = std::max(worst, std::abs(cov(a, b) - (a == b ? 1.0 : 0.0)));
  return worst;
}

double max_orthonormal_error(const WhiteningModel& m) {
  double worst = 0;
  for (std::size_t a = 0; a < m.output_dim; ++a)
    for (std::size_t b = 0; b < m.output_dim; ++b) {
      double dot = 0;
      const double sa = std::sqrt(m.eigenvalues[a] + m.ridge), sb = std::sqrt(m.eigenvalues[b] + m.ridge);
      for (std::size_t j = 0; j < m.input_dim; ++j) dot += m.basis(a, j) * sa * m.basis(b, j) * sb;
      worst = std::max(worst, std::abs(dot - (a == b ? 1.0 : 0.0)));
    }
  return worst;
}

}  // namespace

TEST_CASE("axis-aligned Gaussian with variances (4, 1) whitens to identity") {
  std::mt19937_64 rng(41);
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix x(2000, 2);
  for (std::size_t i = 0; i < x.rows; ++i) {
    x(i, 0) = 2.0 * g(rng) + 3.0;
    x(i, 1) = g(rng) - 1.0;
  }
  const WhiteningModel m = whitening_fit(x, 2, 0.0);
  CHECK(max_identity_error(whitened_covariance(m, x)) < 1e-6);
  CHECK(m.eigenvalues[0] >= m.eigenvalues[1]);
  CHECK(std::abs(m.eigenvalues[0] - 4.0) < 0.5);
  CHECK(std::abs(m.eigenvalues[1] - 1.0) < 0.2);
  // First direction is the x axis, sign fixed positive.
  CHECK(m.basis(0, 0) > 0);
}

TEST_CASE("full rank: the transform is invertible") {
  std::mt19937_64 rng(42);
  const Matrix x = testing::random_matrix(60, 8, rng);
  const WhiteningModel m = whitening_fit(x, 8, 0.0);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const auto y = whitening_project(m, x.row(i));
    // x - mean = sum_k u_k * sqrt(lambda_k) * y_k, with u_k = basis_k * sqrt(lambda_k).
    for (std::size_t j = 0; j < 8; ++j) {
      double back = 0;
      for (std::size_t k = 0; k < 8; ++k) back += m.basis(k, j) * m.eigenvalues[k] * y[k];
      CHECK(std::abs(back - (x(i, j) - m.mean[j])) < 1e-8);
    }
  }
  CHECK(max_orthonormal_error(m) < 1e-8);
}

TEST_CASE("whitening_fit errors") {
  std::mt19937_64 rng(43);
  const Matrix x = testing::random_matrix(10, 16, rng);
  CHECK_THROWS_AS(whitening_fit(x, 10, 0.0), Error);  // n == p
  CHECK_THROWS_AS(whitening_fit(x, 17, 0.0), Error);
  CHECK_THROWS_AS(whitening_fit(x, 0, 0.0), Error);

  Matrix flat(30, 4);  // rank-1 data: every row on one line
  for (std::size_t i = 0; i < flat.rows; ++i)
    for (std::size_t j = 0; j < 4; ++j) flat(i, j) = static_cast<double>(i) * (j + 1);
  CHECK_THROWS_WITH_AS(whitening_fit(flat, 2, 0.0), doctest::Contains("usable rank is 1"), Error);
}

TEST_CASE("projecting the mean gives a degenerate zero vector") {
  std::mt19937_64 rng(44);
  const Matrix x = testing::random_matrix(40, 6, rng, true);
  const WhiteningModel m = whitening_fit(x, 4, 0.0);
  VladVector v;
  v.values = m.mean;
  v.stage = VladStage::l2_final;
  const VladVector w = whitening_apply(m, v);
  CHECK(w.degenerate);
  CHECK(w.stage == VladStage::whitened);
  CHECK(w.whitened_dim == 4u);
}

TEST_CASE("whitening_apply output is unit norm and checks its input") {
  std::mt19937_64 rng(45);
  const Matrix x = testing::random_matrix(40, 6, rng, true);
  const WhiteningModel m = whitening_fit(x, 3, kDefaultRidge);
  VladVector v;
  v.values.assign(x.row(0).begin(), x.row(0).end());
  v.stage = VladStage::l2_final;
  const VladVector w = whitening_apply(m, v);
  CHECK(w.values.size() == 3);
  CHECK(std::abs(l2_norm(w.values) - 1.0) < 1e-12);
  v.stage = VladStage::zscored;
  CHECK_THROWS_AS(whitening_apply(m, v), Error);
  v.stage = VladStage::l2_final;
  v.values.pop_back();
  CHECK_THROWS_AS(whitening_apply(m, v), Error);
}

TEST_CASE("Gram path (n < D): whitened training variance is 1 per component") {
  std::mt19937_64 rng(46);
  const Matrix x = testing::random_matrix(50, 200, rng, true);
  const WhiteningModel m = whitening_fit(x, 20, 0.0);
  CHECK(max_identity_error(whitened_covariance(m, x)) < 1e-6);
  CHECK(max_orthonormal_error(m) < 1e-8);
  for (std::size_t i = 1; i < m.eigenvalues.size(); ++i) CHECK(m.eigenvalues[i] <= m.eigenvalues[i - 1]);
}

TEST_CASE("fit is deterministic") {
  std::mt19937_64 rng(47);
  const Matrix x = testing::random_matrix(80, 30, rng);
  CHECK(whitening_fit(x, 10, 0.0).basis.data == whitening_fit(x, 10, 0.0).basis.data);
}

TEST_CASE("output dims 128/256/512 are selectable and recorded in the sidecar") {
  std::mt19937_64 rng(48);
  const Matrix x = testing::random_matrix(600, 520, rng, true);
  const auto dir = testing::scratch_dir("whiten");
  for (std::size_t p : {128u, 256u, 512u}) {
    WhiteningModel m = whitening_fit(x, p, kDefaultRidge);
    m.trained_on = "paris";
    CHECK(m.output_dim == p);
    const auto prefix = dir / ("w" + std::to_string(p));
    m.save(prefix);
    std::ifstream in(sidecar_file(prefix));
    const auto meta = nlohmann::json::parse(in);
    CHECK(meta.at("output_dim").get<std::size_t>() == p);
    CHECK(meta.at("input_dim").get<std::size_t>() == 520);
    CHECK(meta.at("trained_on").get<std::string>() == "paris");
    const WhiteningModel back = WhiteningModel::load(prefix);
    CHECK(back.output_dim == p);
    CHECK(back.basis.rows == p);
  }
}
