#include "synthetic.h"

#include <atomic>
#include <cmath>
#include <vector>

#include <unistd.h>

namespace ddrvlad::testing {

namespace fs = std::filesystem;

fs::path write_synthetic_dataset(const fs::path& dir, const SyntheticSpec& spec) {
  fs::create_directories(dir / "maps");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const std::size_t values = static_cast<std::size_t>(spec.height) * spec.width * spec.depth;

  DatasetManifest manifest;
  manifest.dataset_name = spec.name;
  manifest.protocol = Protocol::exclude_query;
  std::vector<double> source(values);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (double& s : source) s = spec.separation * unit(rng);
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      std::vector<float> data(values);
      for (std::size_t v = 0; v < values; ++v)
        data[v] = static_cast<float>(source[v] + spec.sigma_within * unit(rng));
      const std::string id = spec.name + "_c" + std::to_string(c) + "_i" + std::to_string(i);
      const std::string rel = "maps/" + id + ".fmap";
      write_feature_map(dir / rel, FeatureMap(spec.height, spec.width, spec.depth, std::move(data)));
      manifest.entries.push_back({id, "class" + std::to_string(c), i == 0, rel, {}});
    }
  }
  save_manifest(dir / "manifest.json", manifest);
  return dir / "manifest.json";
}

fs::path scratch_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const fs::path dir = fs::temp_directory_path() /
                       ("ddrvlad-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, bool unit_rows) {
  std::normal_distribution<double> unit(0.0, 1.0);
  Matrix m(rows, cols);
  for (double& v : m.data) v = unit(rng);
  if (unit_rows) {
    for (std::size_t i = 0; i < rows; ++i) {
      const double n = l2_norm(m.row(i));
      for (double& v : m.row(i)) v /= n;
    }
  }
  return m;
}

}  // namespace ddrvlad::testing
