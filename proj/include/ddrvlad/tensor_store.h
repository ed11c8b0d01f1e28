#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddrvlad/common.h"

namespace ddrvlad {

// FMAP layout: "FMAP" | u8 version (1) | u8 rank (1..3) | 2 zero bytes |
// rank x u32 LE dims | prod(dims) x f32 LE values, last dim innermost.
inline constexpr std::uint8_t kTensorVersion = 1;
inline constexpr std::size_t kTensorMaxRank = 3;

struct Tensor {
  std::vector<std::uint32_t> shape;
  std::vector<float> data;
  /// Count of NaN/Inf values seen when read with NonFinite::allow.
  std::size_t non_finite = 0;
};

enum class NonFinite { reject, allow };

void write_tensor(const std::filesystem::path& path, std::span<const std::uint32_t> shape,
                  std::span<const float> data);
Tensor read_tensor(const std::filesystem::path& path, NonFinite policy = NonFinite::reject);
/// Header-only read: the shape, without loading the payload.
std::vector<std::uint32_t> read_tensor_shape(const std::filesystem::path& path);

/// Writes a rank-2 tensor from a double matrix, rounding to f32.
void write_matrix(const std::filesystem::path& path, const Matrix& m);
/// Reads a rank-1 or rank-2 tensor as a matrix (rank 1 becomes 1 x n).
Matrix read_matrix(const std::filesystem::path& path);

/// One image's activations, laid out H outer, W middle, D innermost.
struct FeatureMap {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t depth = 0;
  std::vector<float> data;

  FeatureMap() = default;
  FeatureMap(std::uint32_t h, std::uint32_t w, std::uint32_t d, std::vector<float> values);

  std::size_t cells() const { return static_cast<std::size_t>(height) * width; }
  float at(std::uint32_t h, std::uint32_t w, std::uint32_t c) const {
    return data[(static_cast<std::size_t>(h) * width + w) * depth + c];
  }
};

/// <prefix>.fmap and <prefix>.json: the tensor file and its JSON sidecar.
std::filesystem::path tensor_file(const std::filesystem::path& prefix);
std::filesystem::path sidecar_file(const std::filesystem::path& prefix);

FeatureMap read_feature_map(const std::filesystem::path& path);
void write_feature_map(const std::filesystem::path& path, const FeatureMap& fm);

struct ManifestEntry {
  std::string image_id;
  std::string class_id;
  bool is_query = false;
  /// As written in the manifest (relative to the manifest directory).
  std::string tensor_path;
  /// Images ignored when scoring this query (optional "junk" list).
  std::vector<std::string> junk;
};

struct DatasetManifest {
  std::string dataset_name;
  std::optional<Protocol> protocol;
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestEntry& e) const { return base_dir / e.tensor_path; }
  std::size_t query_count() const;
  std::size_t class_count() const;
};

/// Parses and validates a manifest. Dangling tensor paths are errors when
/// strict, otherwise they are appended to warnings.
DatasetManifest load_manifest(const std::filesystem::path& path, bool strict = true,
                              std::vector<std::string>* warnings = nullptr);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

}  // namespace ddrvlad
