#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddrvlad/codebook.h"
#include "ddrvlad/ddr.h"
#include "ddrvlad/evaluation.h"
#include "ddrvlad/retrieval.h"
#include "ddrvlad/tensor_store.h"
#include "ddrvlad/vlad.h"
#include "ddrvlad/whitening.h"

namespace ddrvlad {

/// Error raised by a pipeline stage, tagged with the stage and (when known)
/// the offending image.
class StageError : public Error {
 public:
  StageError(std::string stage, std::string image_id, const std::string& what);
  const std::string& stage() const { return stage_; }
  const std::string& image_id() const { return image_id_; }

 private:
  std::string stage_;
  std::string image_id_;
};

enum class Encoder { vlad, locvlad };
std::string to_string(Encoder e);
Encoder parse_encoder(const std::string& name);

/// Which manifest rows an encoding pass covers. Database encodes every entry
/// as a database image; queries encodes only is_query entries as queries.
enum class Subset { database, queries };
std::string to_string(Subset s);
Subset parse_subset(const std::string& name);

struct EncodeOptions {
  DdrConfig ddr;
  Encoder encoder = Encoder::locvlad;
  LocVladConfig loc;
  VladConfig vlad;
  Subset subset = Subset::database;
  unsigned threads = 1;

  /// True when this image should get the locVLAD treatment.
  bool use_locvlad(bool is_query) const {
    return encoder == Encoder::locvlad && (is_query || !loc.queries_only);
  }
  nlohmann::ordered_json to_json() const;
};

/// Encoded vectors for a list of images, one row per image.
struct EncodedSet {
  std::string dataset;
  std::vector<std::string> ids;
  Matrix vectors;
  VladStage stage = VladStage::l2_final;
  std::vector<std::string> degenerate;
  nlohmann::ordered_json config;

  /// Writes <prefix>.fmap and the <prefix>.json sidecar.
  void save(const std::filesystem::path& prefix) const;
  static EncodedSet load(const std::filesystem::path& prefix);
};

struct CodebookOptions {
  DdrConfig ddr;
  KMeansOptions kmeans;
  std::size_t max_pool = kDefaultMaxPool;
};

/// Descriptor pool over every manifest image, uniformly subsampled to
/// max_pool rows with the given seed.
Matrix collect_descriptors(const DatasetManifest& manifest, const DdrConfig& ddr, std::size_t max_pool,
                           std::uint64_t seed);

KMeansResult train_codebook(const DatasetManifest& manifest, const CodebookOptions& opts);

EncodedSet encode_dataset(const DatasetManifest& manifest, const Codebook& cb, const EncodeOptions& opts);

WhiteningModel train_whitening(const EncodedSet& vectors, std::size_t output_dim, double ridge);
EncodedSet apply_whitening(const EncodedSet& vectors, const WhiteningModel& model);

std::vector<RankedList> search_all(const Index& index, const EncodedSet& queries,
                                   std::optional<std::size_t> top_k, bool exclude_self, unsigned threads);

void write_rankings(std::ostream& out, const std::vector<RankedList>& rankings);
std::vector<RankedList> read_rankings(std::istream& in);

enum class Metric { map, ukb };
std::string to_string(Metric m);
Metric parse_metric(const std::string& name);

/// {dataset, metric, value, per_query} plus secondary fields.
nlohmann::ordered_json evaluation_report(const std::string& dataset, Metric metric,
                                         const std::vector<RankedList>& rankings, const GroundTruth& gt);
std::string per_query_csv(const nlohmann::ordered_json& report);

struct PipelineConfig {
  std::uint32_t split_factor = kDefaultSplitFactor;
  /// false: one descriptor per cell holding the whole depth vector.
  bool ddr = true;
  bool root_square = true;
  std::size_t k = kDefaultWords;
  std::uint64_t seed = 0;
  std::size_t max_iters = kDefaultMaxIters;
  double tol = kDefaultTol;
  std::size_t max_pool = kDefaultMaxPool;
  Encoder encoder = Encoder::locvlad;
  double central_fraction = 0.75;
  bool locvlad_queries_only = true;
  ZScoreScope zscore_scope = ZScoreScope::global;
  std::optional<std::size_t> pca_dim;
  double ridge = kDefaultRidge;
  std::filesystem::path vocabulary_manifest;
  std::filesystem::path eval_manifest;
  /// Falls back to the eval manifest's protocol field, then exclude_query.
  std::optional<Protocol> protocol;
  Metric metric = Metric::map;
  bool allow_same_dataset = false;
  unsigned threads = 1;
  std::filesystem::path run_dir = "run";

  DdrConfig ddr_config() const { return {ddr ? split_factor : 0u, root_square}; }
  /// Every result-affecting knob. Paths and thread count are excluded.
  nlohmann::ordered_json to_json() const;
};

/// Human-readable listing of every knob with its default and origin.
std::string describe_config(const PipelineConfig& cfg);

struct PipelineResult {
  nlohmann::ordered_json report;
  /// Exact bytes written to <run_dir>/report.json.
  std::string report_text;
  std::filesystem::path report_path;
  std::size_t cache_hits = 0;
  std::size_t cache_misses = 0;
};

/// train-codebook -> encode -> train-pca -> build-index -> query -> evaluate.
/// Intermediate artifacts are cached under <run_dir>/cache keyed by a
/// SHA-256 of their inputs and configuration. Progress goes to log if set.
PipelineResult run_pipeline(const PipelineConfig& cfg, std::ostream* log = nullptr);

/// SHA-256 hex digest of a file's bytes.
std::string file_digest(const std::filesystem::path& path);
/// SHA-256 hex digest of the manifest file and every tensor it references.
std::string dataset_digest(const std::filesystem::path& manifest_path, const DatasetManifest& manifest);
std::string text_digest(const std::string& text);

}  // namespace ddrvlad
