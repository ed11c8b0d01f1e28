#include "ddrvlad/codebook.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include <json.hpp>

#include "ddrvlad/parallel.h"
#include "ddrvlad/tensor_store.h"

namespace ddrvlad {

namespace {

constexpr std::size_t kAssignChunk = 4096;
constexpr std::size_t kReduceChunk = 16384;

struct Assignment {
  std::vector<std::size_t> label;
  std::vector<double> dist;  // squared distance to the assigned centroid
};

std::size_t nearest(const Matrix& centroids, std::span<const double> x, double* best_dist) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows; ++c) {
    const double d = squared_l2(x, centroids.row(c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  if (best_dist) *best_dist = best_d;
  return best;
}

Assignment assign(const Matrix& centroids, const Matrix& points, unsigned threads) {
  Assignment a{std::vector<std::size_t>(points.rows), std::vector<double>(points.rows)};
  parallel_chunks(points.rows, kAssignChunk, threads, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) a.label[i] = nearest(centroids, points.row(i), &a.dist[i]);
  });
  return a;
}

// Sum in fixed chunk order so the total is independent of the thread count.
double ordered_sum(const std::vector<double>& values, unsigned threads) {
  std::vector<double> partial(chunk_count(values.size(), kReduceChunk), 0.0);
  parallel_chunks(values.size(), kReduceChunk, threads, [&](std::size_t c, std::size_t b, std::size_t e) {
    double s = 0.0;
    for (std::size_t i = b; i < e; ++i) s += values[i];
    partial[c] = s;
  });
  return std::accumulate(partial.begin(), partial.end(), 0.0);
}

void check_points(const Matrix& points, std::size_t k) {
  if (k == 0) throw Error("K must be at least 1");
  if (points.rows < k)
    throw Error("need at least K=" + std::to_string(k) + " points, got " + std::to_string(points.rows));
}

}  // namespace

Codebook::Codebook(Matrix centroids, std::string trained_on, std::uint64_t seed)
    : centroids_(std::move(centroids)), trained_on_(std::move(trained_on)), seed_(seed) {
  if (centroids_.rows == 0 || centroids_.cols == 0) throw Error("codebook must be non-empty");
  for (double v : centroids_.data)
    if (!std::isfinite(v)) throw Error("codebook contains non-finite values");
  for (std::size_t i = 0; i < centroids_.rows; ++i)
    for (std::size_t j = i + 1; j < centroids_.rows; ++j)
      if (std::sqrt(squared_l2(centroids_.row(i), centroids_.row(j))) <= 1e-12)
        throw Error("codebook centroids " + std::to_string(i) + " and " + std::to_string(j) +
                    " coincide");
}

std::size_t Codebook::quantize(std::span<const double> x) const {
  if (x.size() != dim())
    throw Error("descriptor dimension " + std::to_string(x.size()) + " does not match codebook dimension " +
                std::to_string(dim()));
  return nearest(centroids_, x, nullptr);
}

void Codebook::save(const std::filesystem::path& prefix) const {
  write_matrix(tensor_file(prefix), centroids_);
  nlohmann::ordered_json meta;
  meta["K"] = size();
  meta["d"] = dim();
  meta["trained_on"] = trained_on_;
  meta["seed"] = seed_;
  std::ofstream out(sidecar_file(prefix));
  if (!out) throw Error("cannot write " + sidecar_file(prefix).string());
  out << meta.dump(2) << '\n';
}

Codebook Codebook::load(const std::filesystem::path& prefix) {
  Matrix centroids = read_matrix(tensor_file(prefix));
  std::ifstream in(sidecar_file(prefix));
  if (!in) throw Error("missing codebook sidecar " + sidecar_file(prefix).string());
  const auto meta = nlohmann::json::parse(in);
  if (meta.at("K").get<std::size_t>() != centroids.rows || meta.at("d").get<std::size_t>() != centroids.cols)
    throw Error("codebook sidecar shape disagrees with " + tensor_file(prefix).string());
  return Codebook(std::move(centroids), meta.at("trained_on").get<std::string>(),
                  meta.at("seed").get<std::uint64_t>());
}

Codebook kmeans_pp_init(const Matrix& points, std::size_t k, std::uint64_t seed) {
  check_points(points, k);
  std::mt19937_64 rng(seed);
  const std::size_t n = points.rows;

  Matrix centroids(k, points.cols);
  auto take = [&](std::size_t c, std::size_t i) {
    std::copy(points.row(i).begin(), points.row(i).end(), centroids.row(c).begin());
  };
  take(0, std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));

  std::vector<double> min_dist(n);
  for (std::size_t i = 0; i < n; ++i) min_dist[i] = squared_l2(points.row(i), centroids.row(0));

  for (std::size_t c = 1; c < k; ++c) {
    const double total = std::accumulate(min_dist.begin(), min_dist.end(), 0.0);
    if (!(total > 0.0))
      throw Error("fewer than K=" + std::to_string(k) + " distinct points (only " + std::to_string(c) +
                  " found)");
    const double target = std::uniform_real_distribution<double>(0.0, total)(rng);
    std::size_t pick = n;
    double cumulative = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_dist[i] <= 0.0) continue;
      cumulative += min_dist[i];
      pick = i;
      if (cumulative > target) break;
    }
    take(c, pick);
    for (std::size_t i = 0; i < n; ++i)
      min_dist[i] = std::min(min_dist[i], squared_l2(points.row(i), centroids.row(c)));
  }
  return Codebook(std::move(centroids), {}, seed);
}

KMeansResult kmeans_train(const Matrix& points, const KMeansOptions& opts) {
  check_points(points, opts.k);
  if (opts.max_iters < 1) throw Error("max_iters must be at least 1");
  const std::size_t k = opts.k;
  const std::size_t d = points.cols;

  KMeansResult result;
  Matrix centroids = kmeans_pp_init(points, k, opts.seed).centroids();
  const std::size_t chunks = chunk_count(points.rows, kReduceChunk);

  for (std::size_t iter = 0; iter < opts.max_iters; ++iter) {
    Assignment a = assign(centroids, points, opts.threads);
    result.objective.push_back(ordered_sum(a.dist, opts.threads));
    result.iterations = iter + 1;

    // Per-chunk partial sums, combined in chunk order.
    std::vector<Matrix> part_sum(chunks, Matrix(k, d));
    std::vector<std::vector<std::size_t>> part_count(chunks, std::vector<std::size_t>(k, 0));
    parallel_chunks(points.rows, kReduceChunk, opts.threads, [&](std::size_t c, std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        auto dst = part_sum[c].row(a.label[i]);
        const auto src = points.row(i);
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        ++part_count[c][a.label[i]];
      }
    });
    Matrix sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t c = 0; c < chunks; ++c) {
      for (std::size_t i = 0; i < sums.data.size(); ++i) sums.data[i] += part_sum[c].data[i];
      for (std::size_t w = 0; w < k; ++w) counts[w] += part_count[c][w];
    }

    Matrix next(k, d);
    for (std::size_t w = 0; w < k; ++w) {
      if (counts[w] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) next(w, j) = sums(w, j) / static_cast<double>(counts[w]);
    }
    // Empty words are moved onto the point farthest from its own centroid.
    for (std::size_t w = 0; w < k; ++w) {
      if (counts[w] != 0) continue;
      const auto far = static_cast<std::size_t>(
          std::distance(a.dist.begin(), std::max_element(a.dist.begin(), a.dist.end())));
      std::copy(points.row(far).begin(), points.row(far).end(), next.row(w).begin());
      a.dist[far] = -1.0;
      ++result.empty_cluster_reseeds;
    }

    double max_move = 0.0;
    for (std::size_t w = 0; w < k; ++w)
      max_move = std::max(max_move, std::sqrt(squared_l2(next.row(w), centroids.row(w))));
    centroids = std::move(next);
    if (max_move < opts.tol) {
      result.converged = true;
      break;
    }
  }
  result.codebook = Codebook(std::move(centroids), {}, opts.seed);
  return result;
}

std::vector<std::size_t> quantize_all(const Codebook& cb, const Matrix& points, unsigned threads) {
  if (points.cols != cb.dim())
    throw Error("descriptor dimension " + std::to_string(points.cols) +
                " does not match codebook dimension " + std::to_string(cb.dim()));
  return assign(cb.centroids(), points, threads).label;
}

Matrix subsample_rows(const Matrix& points, std::size_t max_rows, std::uint64_t seed) {
  if (points.rows <= max_rows) return points;
  std::vector<std::size_t> all(points.rows);
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::size_t> keep;
  keep.reserve(max_rows);
  std::mt19937_64 rng(seed);
  std::sample(all.begin(), all.end(), std::back_inserter(keep), max_rows, rng);
  Matrix out(keep.size(), points.cols);
  for (std::size_t r = 0; r < keep.size(); ++r)
    std::copy(points.row(keep[r]).begin(), points.row(keep[r]).end(), out.row(r).begin());
  return out;
}

}  // namespace ddrvlad
