#include "ddrvlad/tensor_store.h"

#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_set>

#include <json.hpp>

namespace ddrvlad {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 4> kMagic = {'F', 'M', 'A', 'P'};

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::string describe(const fs::path& path) { return "'" + path.string() + "'"; }

}  // namespace

void write_tensor(const fs::path& path, std::span<const std::uint32_t> shape,
                  std::span<const float> data) {
  if (shape.empty() || shape.size() > kTensorMaxRank)
    throw Error("tensor rank must be between 1 and 3, got " + std::to_string(shape.size()));
  std::size_t count = 1;
  for (auto d : shape) {
    if (d == 0) throw Error("tensor dimensions must be positive");
    count *= d;
  }
  if (count != data.size())
    throw Error("shape/data mismatch: shape holds " + std::to_string(count) + " values, data has " +
                std::to_string(data.size()));

  std::vector<unsigned char> bytes;
  bytes.reserve(8 + 4 * shape.size() + 4 * data.size());
  bytes.insert(bytes.end(), kMagic.begin(), kMagic.end());
  bytes.push_back(kTensorVersion);
  bytes.push_back(static_cast<unsigned char>(shape.size()));
  bytes.push_back(0);
  bytes.push_back(0);
  for (auto d : shape) put_u32(bytes, d);
  for (float v : data) put_u32(bytes, std::bit_cast<std::uint32_t>(v));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + describe(path) + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + describe(path));
}

Tensor read_tensor(const fs::path& path, NonFinite policy) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + describe(path));
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 8 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw Error("bad magic in " + describe(path));
  if (bytes[4] != kTensorVersion)
    throw Error("unsupported version " + std::to_string(bytes[4]) + " in " + describe(path));
  const std::size_t rank = bytes[5];
  if (rank < 1 || rank > kTensorMaxRank)
    throw Error("invalid rank " + std::to_string(rank) + " in " + describe(path));
  if (bytes[6] != 0 || bytes[7] != 0) throw Error("reserved bytes not zero in " + describe(path));
  if (bytes.size() < 8 + 4 * rank) throw Error("truncated header in " + describe(path));

  Tensor t;
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const auto d = get_u32(bytes.data() + 8 + 4 * i);
    if (d == 0) throw Error("zero dimension in " + describe(path));
    t.shape.push_back(d);
    count *= d;
  }
  const std::size_t offset = 8 + 4 * rank;
  const std::size_t available = (bytes.size() - offset) / 4;
  if (available < count)
    throw Error("truncated payload in " + describe(path) + ": header declares " +
                std::to_string(count) + " values, " + std::to_string(available) + " present");
  if (bytes.size() != offset + 4 * count)
    throw Error("trailing bytes after payload in " + describe(path));

  t.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const float v = std::bit_cast<float>(get_u32(bytes.data() + offset + 4 * i));
    if (!std::isfinite(v)) ++t.non_finite;
    t.data[i] = v;
  }
  if (t.non_finite > 0 && policy == NonFinite::reject)
    throw Error(std::to_string(t.non_finite) + " non-finite values in " + describe(path));
  return t;
}

std::vector<std::uint32_t> read_tensor_shape(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + describe(path));
  std::array<unsigned char, 8 + 4 * kTensorMaxRank> head{};
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got < 8 || !std::equal(kMagic.begin(), kMagic.end(), head.begin()))
    throw Error("bad magic in " + describe(path));
  if (head[4] != kTensorVersion)
    throw Error("unsupported version " + std::to_string(head[4]) + " in " + describe(path));
  const std::size_t rank = head[5];
  if (rank < 1 || rank > kTensorMaxRank)
    throw Error("invalid rank " + std::to_string(rank) + " in " + describe(path));
  if (got < 8 + 4 * rank) throw Error("truncated header in " + describe(path));
  std::vector<std::uint32_t> shape;
  for (std::size_t i = 0; i < rank; ++i) shape.push_back(get_u32(head.data() + 8 + 4 * i));
  return shape;
}

void write_matrix(const fs::path& path, const Matrix& m) {
  std::vector<float> values(m.data.begin(), m.data.end());
  const std::array<std::uint32_t, 2> shape = {static_cast<std::uint32_t>(m.rows),
                                              static_cast<std::uint32_t>(m.cols)};
  write_tensor(path, shape, values);
}

Matrix read_matrix(const fs::path& path) {
  Tensor t = read_tensor(path);
  if (t.shape.size() > 2) throw Error("expected a rank-1 or rank-2 tensor in " + describe(path));
  Matrix m(t.shape.size() == 1 ? 1 : t.shape[0], t.shape.back());
  std::copy(t.data.begin(), t.data.end(), m.data.begin());
  return m;
}

fs::path tensor_file(const fs::path& prefix) { return fs::path(prefix.string() + ".fmap"); }
fs::path sidecar_file(const fs::path& prefix) { return fs::path(prefix.string() + ".json"); }

FeatureMap::FeatureMap(std::uint32_t h, std::uint32_t w, std::uint32_t d, std::vector<float> values)
    : height(h), width(w), depth(d), data(std::move(values)) {
  if (h == 0 || w == 0 || d == 0) throw Error("feature map dimensions must be positive");
  if (data.size() != static_cast<std::size_t>(h) * w * d)
    throw Error("feature map data length does not equal H*W*D");
  for (float v : data)
    if (!std::isfinite(v)) throw Error("feature map contains non-finite values");
}

FeatureMap read_feature_map(const fs::path& path) {
  Tensor t = read_tensor(path);
  if (t.shape.size() != 3)
    throw Error("feature map " + describe(path) + " must be rank 3 (H, W, D), got rank " +
                std::to_string(t.shape.size()));
  return FeatureMap(t.shape[0], t.shape[1], t.shape[2], std::move(t.data));
}

void write_feature_map(const fs::path& path, const FeatureMap& fm) {
  const std::array<std::uint32_t, 3> shape = {fm.height, fm.width, fm.depth};
  write_tensor(path, shape, fm.data);
}

std::size_t DatasetManifest::query_count() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.is_query ? 1 : 0;
  return n;
}

std::size_t DatasetManifest::class_count() const {
  std::set<std::string> classes;
  for (const auto& e : entries) classes.insert(e.class_id);
  return classes.size();
}

DatasetManifest load_manifest(const fs::path& path, bool strict, std::vector<std::string>* warnings) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + describe(path));
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error("manifest parse error in " + describe(path) + ": " + e.what());
  }

  DatasetManifest m;
  m.base_dir = path.parent_path();
  try {
    m.dataset_name = doc.at("dataset_name").get<std::string>();
    if (doc.contains("protocol")) m.protocol = parse_protocol(doc["protocol"].get<std::string>());
    std::unordered_set<std::string> seen;
    for (const auto& row : doc.at("entries")) {
      ManifestEntry e;
      e.image_id = row.at("image_id").get<std::string>();
      e.class_id = row.at("class_id").get<std::string>();
      e.is_query = row.at("is_query").get<bool>();
      e.tensor_path = row.at("tensor_path").get<std::string>();
      if (row.contains("junk")) e.junk = row["junk"].get<std::vector<std::string>>();
      if (!seen.insert(e.image_id).second)
        throw Error("duplicate image_id '" + e.image_id + "' in manifest " + describe(path));
      m.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw Error("malformed manifest " + describe(path) + ": " + e.what());
  }

  for (const auto& e : m.entries) {
    const fs::path p = m.resolve(e);
    std::ifstream probe(p, std::ios::binary);
    if (probe) continue;
    const std::string msg = "tensor_path for '" + e.image_id + "' is not readable: " + p.string();
    if (strict) throw Error(msg);
    if (warnings) warnings->push_back(msg);
  }
  return m;
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest) {
  nlohmann::ordered_json doc;
  doc["dataset_name"] = manifest.dataset_name;
  if (manifest.protocol) doc["protocol"] = to_string(*manifest.protocol);
  auto& rows = doc["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : manifest.entries) {
    nlohmann::ordered_json row;
    row["image_id"] = e.image_id;
    row["class_id"] = e.class_id;
    row["is_query"] = e.is_query;
    row["tensor_path"] = e.tensor_path;
    if (!e.junk.empty()) row["junk"] = e.junk;
    rows.push_back(std::move(row));
  }
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + describe(path) + " for writing");
  out << doc.dump(2) << '\n';
}

}  // namespace ddrvlad
