#include "ddrvlad/whitening.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "ddrvlad/tensor_store.h"

namespace ddrvlad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::filesystem::path suffixed(const std::filesystem::path& prefix, const char* suffix) {
  return std::filesystem::path(prefix.string() + suffix);
}

}  // namespace

WhiteningModel whitening_fit(const Matrix& train, std::size_t output_dim, double ridge) {
  const std::size_t n = train.rows;
  const std::size_t dim = train.cols;
  if (output_dim == 0) throw Error("whitening output_dim must be positive");
  if (output_dim > dim)
    throw Error("whitening output_dim " + std::to_string(output_dim) + " exceeds input dim " +
                std::to_string(dim));
  if (n < output_dim + 1)
    throw Error("whitening to " + std::to_string(output_dim) + " dims needs at least " +
                std::to_string(output_dim + 1) + " training vectors, got " + std::to_string(n));
  if (ridge < 0.0) throw Error("ridge must be non-negative");

  Eigen::Map<const RowMatrix> x(train.data.data(), static_cast<Eigen::Index>(n),
                                static_cast<Eigen::Index>(dim));
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const RowMatrix centered = x.rowwise() - mean;
  const double inv_n = 1.0 / static_cast<double>(n);

  // Eigenpairs sorted by decreasing eigenvalue; columns of dirs are unit directions.
  Eigen::VectorXd values;
  Eigen::MatrixXd dirs;
  if (n >= dim) {
    const Eigen::MatrixXd cov = (centered.transpose() * centered) * inv_n;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw Error("covariance eigendecomposition failed");
    values = es.eigenvalues().reverse();
    dirs = es.eigenvectors().rowwise().reverse();
  } else {
    // Gram trick: if G a = l a with G = Xc Xc^T / n, then Xc^T a / sqrt(n l)
    // is a unit eigenvector of the covariance with the same eigenvalue.
    const Eigen::MatrixXd gram = (centered * centered.transpose()) * inv_n;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
    if (es.info() != Eigen::Success) throw Error("Gram eigendecomposition failed");
    values = es.eigenvalues().reverse();
    const Eigen::MatrixXd a = es.eigenvectors().rowwise().reverse();
    const Eigen::Index usable = std::min<Eigen::Index>(static_cast<Eigen::Index>(output_dim), values.size());
    dirs.resize(static_cast<Eigen::Index>(dim), usable);
    for (Eigen::Index i = 0; i < usable; ++i) {
      if (values(i) < kMinEigenvalue) break;
      dirs.col(i) = centered.transpose() * a.col(i) / std::sqrt(static_cast<double>(n) * values(i));
      dirs.col(i).normalize();
    }
  }

  std::size_t rank = 0;
  while (rank < static_cast<std::size_t>(values.size()) && values(static_cast<Eigen::Index>(rank)) >= kMinEigenvalue)
    ++rank;
  if (rank < output_dim)
    throw Error("whitening to " + std::to_string(output_dim) + " dims impossible: usable rank is " +
                std::to_string(rank));

  WhiteningModel model;
  model.input_dim = dim;
  model.output_dim = output_dim;
  model.ridge = ridge;
  model.mean.assign(mean.data(), mean.data() + dim);
  model.basis = Matrix(output_dim, dim);
  for (std::size_t i = 0; i < output_dim; ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    Eigen::VectorXd u = dirs.col(col);
    Eigen::Index arg = 0;
    u.cwiseAbs().maxCoeff(&arg);
    if (u(arg) < 0) u = -u;
    const double lambda = values(col);
    model.eigenvalues.push_back(lambda);
    const double scale = 1.0 / std::sqrt(lambda + ridge);
    for (std::size_t j = 0; j < dim; ++j) model.basis(i, j) = u(static_cast<Eigen::Index>(j)) * scale;
  }
  return model;
}

std::vector<double> whitening_project(const WhiteningModel& model, std::span<const double> x) {
  if (x.size() != model.input_dim)
    throw Error("vector dimension " + std::to_string(x.size()) + " does not match whitening input dim " +
                std::to_string(model.input_dim));
  std::vector<double> centered(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) centered[j] = x[j] - model.mean[j];
  std::vector<double> y(model.output_dim, 0.0);
  for (std::size_t i = 0; i < model.output_dim; ++i) {
    const auto b = model.basis.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < centered.size(); ++j) s += b[j] * centered[j];
    y[i] = s;
  }
  return y;
}

VladVector whitening_apply(const WhiteningModel& model, const VladVector& v) {
  if (v.stage != VladStage::l2_final)
    throw Error("whitening expects an l2_final vector, got stage " + to_string(v.stage));
  VladVector out;
  out.words = v.words;
  out.word_dim = v.word_dim;
  out.values = whitening_project(model, v.values);
  out.stage = VladStage::whitened;
  out.whitened_dim = model.output_dim;
  out.sigma_guard_fired = v.sigma_guard_fired;
  return l2_finalize(std::move(out));
}

void WhiteningModel::save(const std::filesystem::path& prefix) const {
  const std::vector<float> mean_f(mean.begin(), mean.end());
  const std::array<std::uint32_t, 1> mean_shape = {static_cast<std::uint32_t>(mean.size())};
  write_tensor(suffixed(prefix, "_mean.fmap"), mean_shape, mean_f);
  write_matrix(suffixed(prefix, "_basis.fmap"), basis);
  nlohmann::ordered_json meta;
  meta["input_dim"] = input_dim;
  meta["output_dim"] = output_dim;
  meta["ridge"] = ridge;
  meta["trained_on"] = trained_on;
  meta["eigenvalues"] = eigenvalues;
  std::ofstream out(sidecar_file(prefix));
  if (!out) throw Error("cannot write " + sidecar_file(prefix).string());
  out << meta.dump(2) << '\n';
}

WhiteningModel WhiteningModel::load(const std::filesystem::path& prefix) {
  std::ifstream in(sidecar_file(prefix));
  if (!in) throw Error("missing whitening sidecar " + sidecar_file(prefix).string());
  const auto meta = nlohmann::json::parse(in);
  WhiteningModel m;
  m.input_dim = meta.at("input_dim").get<std::size_t>();
  m.output_dim = meta.at("output_dim").get<std::size_t>();
  m.ridge = meta.at("ridge").get<double>();
  m.trained_on = meta.at("trained_on").get<std::string>();
  if (meta.contains("eigenvalues")) m.eigenvalues = meta["eigenvalues"].get<std::vector<double>>();
  const Matrix mean = read_matrix(suffixed(prefix, "_mean.fmap"));
  m.mean = mean.data;
  m.basis = read_matrix(suffixed(prefix, "_basis.fmap"));
  if (m.mean.size() != m.input_dim || m.basis.rows != m.output_dim || m.basis.cols != m.input_dim)
    throw Error("whitening files under " + prefix.string() + " disagree with their sidecar");
  return m;
}

}  // namespace ddrvlad
