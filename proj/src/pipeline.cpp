#include "ddrvlad/pipeline.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include <openssl/evp.h>

#include "ddrvlad/parallel.h"

namespace ddrvlad {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

StageError::StageError(std::string stage, std::string image_id, const std::string& what)
    : Error("[" + stage + "]" + (image_id.empty() ? "" : " image '" + image_id + "':") + " " + what),
      stage_(std::move(stage)),
      image_id_(std::move(image_id)) {}

std::string to_string(Encoder e) { return e == Encoder::vlad ? "vlad" : "locvlad"; }

Encoder parse_encoder(const std::string& name) {
  if (name == "vlad") return Encoder::vlad;
  if (name == "locvlad") return Encoder::locvlad;
  throw Error("unknown encoder '" + name + "' (expected vlad or locvlad)");
}

std::string to_string(Subset s) { return s == Subset::database ? "database" : "queries"; }

Subset parse_subset(const std::string& name) {
  if (name == "database") return Subset::database;
  if (name == "queries") return Subset::queries;
  throw Error("unknown subset '" + name + "' (expected database or queries)");
}

std::string to_string(Metric m) { return m == Metric::map ? "mAP" : "ukb"; }

Metric parse_metric(const std::string& name) {
  if (name == "map" || name == "mAP") return Metric::map;
  if (name == "ukb") return Metric::ukb;
  throw Error("unknown metric '" + name + "' (expected map or ukb)");
}

// ---------------------------------------------------------------------------
// Hashing

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t n) {
    if (EVP_DigestUpdate(ctx_, data, n) != 1) throw Error("SHA-256 update failed");
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx_, md, &len) != 1) throw Error("SHA-256 final failed");
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return out.str();
  }

 private:
  EVP_MD_CTX* ctx_;
};

void hash_file(Sha256& h, const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
}

}  // namespace

std::string file_digest(const fs::path& path) {
  Sha256 h;
  hash_file(h, path);
  return h.hex();
}

std::string dataset_digest(const fs::path& manifest_path, const DatasetManifest& manifest) {
  Sha256 h;
  hash_file(h, manifest_path);
  for (const auto& e : manifest.entries) {
    const std::string d = file_digest(manifest.resolve(e));
    h.update(e.image_id.data(), e.image_id.size());
    h.update(d.data(), d.size());
  }
  return h.hex();
}

std::string text_digest(const std::string& text) {
  Sha256 h;
  h.update(text.data(), text.size());
  return h.hex();
}

// ---------------------------------------------------------------------------
// Encoded vector sets

ojson EncodeOptions::to_json() const {
  ojson j;
  j["split_factor"] = ddr.split_factor;
  j["root_square"] = ddr.apply_root_square;
  // Only knobs that change the encoding of this subset.
  const bool loc_used = use_locvlad(subset == Subset::queries);
  j["encoder"] = to_string(loc_used ? Encoder::locvlad : Encoder::vlad);
  if (loc_used) j["central_fraction"] = loc.central_fraction;
  j["zscore_scope"] = to_string(vlad.zscore_scope);
  j["subset"] = to_string(subset);
  return j;
}

void EncodedSet::save(const fs::path& prefix) const {
  write_matrix(tensor_file(prefix), vectors);
  ojson meta;
  meta["dataset"] = dataset;
  meta["rows"] = vectors.rows;
  meta["dim"] = vectors.cols;
  meta["stage"] = to_string(stage);
  meta["image_ids"] = ids;
  meta["degenerate"] = degenerate;
  meta["config"] = config;
  std::ofstream out(sidecar_file(prefix));
  if (!out) throw Error("cannot write " + sidecar_file(prefix).string());
  out << meta.dump(2) << '\n';
}

EncodedSet EncodedSet::load(const fs::path& prefix) {
  std::ifstream in(sidecar_file(prefix));
  if (!in) throw Error("missing vector sidecar " + sidecar_file(prefix).string());
  const auto meta = ojson::parse(in);
  EncodedSet s;
  s.dataset = meta.at("dataset").get<std::string>();
  s.ids = meta.at("image_ids").get<std::vector<std::string>>();
  s.degenerate = meta.value("degenerate", std::vector<std::string>{});
  s.config = meta.value("config", ojson::object());
  const auto stage = meta.at("stage").get<std::string>();
  s.stage = stage == "whitened" ? VladStage::whitened : VladStage::l2_final;
  s.vectors = read_matrix(tensor_file(prefix));
  if (s.vectors.rows != s.ids.size())
    throw Error("vector file " + tensor_file(prefix).string() + " has " + std::to_string(s.vectors.rows) +
                " rows but its sidecar lists " + std::to_string(s.ids.size()) + " ids");
  return s;
}

namespace {

// Persisted artifacts are f32; rounding in memory keeps fresh and cached
// runs bit-identical.
void round_to_f32(std::vector<double>& values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

FeatureMap load_map(const DatasetManifest& manifest, const ManifestEntry& e, const char* stage) {
  try {
    return read_feature_map(manifest.resolve(e));
  } catch (const Error& err) {
    throw StageError(stage, e.image_id, err.what());
  }
}

std::size_t descriptors_per_image(const std::vector<std::uint32_t>& shape, const DdrConfig& ddr) {
  if (shape.size() != 3) throw Error("feature maps must be rank 3");
  const std::uint32_t split = ddr.split_factor == 0 ? shape[2] : ddr.split_factor;
  if (shape[2] % split != 0)
    throw Error("depth " + std::to_string(shape[2]) + " is not divisible by split factor " +
                std::to_string(split));
  return static_cast<std::size_t>(shape[0]) * shape[1] * (shape[2] / split);
}

}  // namespace

Matrix collect_descriptors(const DatasetManifest& manifest, const DdrConfig& ddr, std::size_t max_pool,
                           std::uint64_t seed) {
  if (manifest.entries.empty()) throw StageError("train-codebook", "", "manifest has no entries");
  std::vector<std::size_t> offset(manifest.entries.size() + 1, 0);
  std::size_t dim = 0;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    try {
      const auto shape = read_tensor_shape(manifest.resolve(e));
      offset[i + 1] = offset[i] + descriptors_per_image(shape, ddr);
      const std::size_t d = ddr.split_factor == 0 ? shape[2] : ddr.split_factor;
      if (dim != 0 && d != dim) throw Error("descriptor dimension differs from earlier images");
      dim = d;
    } catch (const Error& err) {
      throw StageError("train-codebook", e.image_id, err.what());
    }
  }
  const std::size_t total = offset.back();

  // Sorted global indices of the kept descriptors.
  std::vector<std::size_t> keep;
  if (total <= max_pool) {
    keep.resize(total);
    std::iota(keep.begin(), keep.end(), 0);
  } else {
    std::vector<std::size_t> all(total);
    std::iota(all.begin(), all.end(), 0);
    std::mt19937_64 rng(seed);
    keep.reserve(max_pool);
    std::sample(all.begin(), all.end(), std::back_inserter(keep), max_pool, rng);
  }

  Matrix pool(keep.size(), dim);
  std::size_t next = 0;
  for (std::size_t i = 0; i < manifest.entries.size() && next < keep.size(); ++i) {
    if (keep[next] >= offset[i + 1]) continue;
    const auto& e = manifest.entries[i];
    DescriptorSet ds;
    try {
      ds = extract_descriptors(load_map(manifest, e, "train-codebook"), ddr);
    } catch (const StageError&) {
      throw;
    } catch (const Error& err) {
      throw StageError("train-codebook", e.image_id, err.what());
    }
    for (; next < keep.size() && keep[next] < offset[i + 1]; ++next) {
      const auto src = ds.rows.row(keep[next] - offset[i]);
      std::copy(src.begin(), src.end(), pool.row(next).begin());
    }
  }
  return pool;
}

KMeansResult train_codebook(const DatasetManifest& manifest, const CodebookOptions& opts) {
  const Matrix pool = collect_descriptors(manifest, opts.ddr, opts.max_pool, opts.kmeans.seed);
  KMeansResult result;
  try {
    result = kmeans_train(pool, opts.kmeans);
    Matrix centroids = result.codebook.centroids();
    round_to_f32(centroids.data);
    result.codebook = Codebook(std::move(centroids), manifest.dataset_name, opts.kmeans.seed);
  } catch (const StageError&) {
    throw;
  } catch (const Error& err) {
    throw StageError("train-codebook", "", err.what());
  }
  return result;
}

EncodedSet encode_dataset(const DatasetManifest& manifest, const Codebook& cb, const EncodeOptions& opts) {
  std::vector<const ManifestEntry*> rows;
  for (const auto& e : manifest.entries)
    if (opts.subset == Subset::database || e.is_query) rows.push_back(&e);
  if (rows.empty())
    throw StageError("encode", "", "no images selected from '" + manifest.dataset_name + "' for subset " +
                                       to_string(opts.subset));

  std::vector<VladVector> encoded(rows.size());
  parallel_chunks(rows.size(), 1, opts.threads, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const ManifestEntry& entry = *rows[i];
      try {
        const DescriptorSet ds = extract_descriptors(load_map(manifest, entry, "encode"), opts.ddr);
        const bool as_query = opts.subset == Subset::queries && entry.is_query;
        encoded[i] = opts.use_locvlad(as_query) ? locvlad_encode(ds, cb, opts.loc, opts.vlad)
                                                : vlad_encode(ds, cb, opts.vlad);
      } catch (const StageError&) {
        throw;
      } catch (const Error& err) {
        throw StageError("encode", entry.image_id, err.what());
      }
    }
  });

  EncodedSet out;
  out.dataset = manifest.dataset_name;
  out.vectors = Matrix(rows.size(), encoded.front().values.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.ids.push_back(rows[i]->image_id);
    std::copy(encoded[i].values.begin(), encoded[i].values.end(), out.vectors.row(i).begin());
    if (encoded[i].degenerate) out.degenerate.push_back(rows[i]->image_id);
  }
  round_to_f32(out.vectors.data);
  out.config = opts.to_json();
  out.config["codebook_trained_on"] = cb.trained_on();
  out.config["K"] = cb.size();
  return out;
}

WhiteningModel train_whitening(const EncodedSet& vectors, std::size_t output_dim, double ridge) {
  if (vectors.stage != VladStage::l2_final)
    throw StageError("train-pca", "", "whitening must be trained on l2_final vectors");
  WhiteningModel model;
  try {
    model = whitening_fit(vectors.vectors, output_dim, ridge);
  } catch (const Error& err) {
    throw StageError("train-pca", "", err.what());
  }
  model.trained_on = vectors.dataset;
  round_to_f32(model.mean);
  round_to_f32(model.basis.data);
  return model;
}

EncodedSet apply_whitening(const EncodedSet& vectors, const WhiteningModel& model) {
  if (vectors.stage != VladStage::l2_final)
    throw StageError("encode", "", "vectors are already whitened");
  EncodedSet out;
  out.dataset = vectors.dataset;
  out.ids = vectors.ids;
  out.stage = VladStage::whitened;
  out.config = vectors.config;
  out.config["pca_dim"] = model.output_dim;
  out.config["whitening_trained_on"] = model.trained_on;
  out.vectors = Matrix(vectors.vectors.rows, model.output_dim);
  for (std::size_t i = 0; i < vectors.vectors.rows; ++i) {
    VladVector v;
    v.values.assign(vectors.vectors.row(i).begin(), vectors.vectors.row(i).end());
    v.stage = VladStage::l2_final;
    VladVector w;
    try {
      w = whitening_apply(model, v);
    } catch (const Error& err) {
      throw StageError("encode", vectors.ids[i], err.what());
    }
    std::copy(w.values.begin(), w.values.end(), out.vectors.row(i).begin());
    if (w.degenerate) out.degenerate.push_back(vectors.ids[i]);
  }
  round_to_f32(out.vectors.data);
  return out;
}

// ---------------------------------------------------------------------------
// Query and evaluation

std::vector<RankedList> search_all(const Index& index, const EncodedSet& queries,
                                   std::optional<std::size_t> top_k, bool exclude_self, unsigned threads) {
  std::vector<RankedList> out(queries.ids.size());
  // Per-query results land in fixed slots, so output order never depends on scheduling.
  parallel_chunks(queries.ids.size(), 1, threads, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      const auto& id = queries.ids[i];
      try {
        out[i] = index.search(queries.vectors.row(i), top_k,
                              exclude_self ? std::optional<std::string>(id) : std::nullopt, id);
      } catch (const Error& err) {
        throw StageError("query", id, err.what());
      }
    }
  });
  return out;
}

void write_rankings(std::ostream& out, const std::vector<RankedList>& rankings) {
  for (const auto& r : rankings) {
    ojson line;
    line["query_id"] = r.query_id;
    auto& hits = line["hits"] = ojson::array();
    for (const auto& h : r.hits) hits.push_back({{"image_id", h.image_id}, {"distance", h.distance}});
    out << line.dump() << '\n';
  }
}

std::vector<RankedList> read_rankings(std::istream& in) {
  std::vector<RankedList> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      RankedList r;
      r.query_id = j.at("query_id").get<std::string>();
      for (const auto& h : j.at("hits"))
        r.hits.push_back({h.at("image_id").get<std::string>(), h.at("distance").get<double>()});
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error("rankings line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

ojson evaluation_report(const std::string& dataset, Metric metric, const std::vector<RankedList>& rankings,
                        const GroundTruth& gt) {
  const MeanApResult map = mean_ap(rankings, gt);
  std::optional<UkbResult> ukb;
  if (gt.protocol == Protocol::include_query) ukb = ukb_score(rankings, gt);
  if (metric == Metric::ukb && !ukb) throw Error("the ukb metric requires the include_query protocol");

  ojson report;
  report["dataset"] = dataset;
  report["metric"] = to_string(metric);
  report["value"] = metric == Metric::map ? map.value : ukb->value;
  report["protocol"] = to_string(gt.protocol);
  report["queries"] = rankings.size();
  report["mAP"] = map.value;
  if (ukb) report["ukb_score"] = ukb->value;
  auto& per = report["per_query"] = ojson::object();
  for (const auto& [id, ap] : map.per_query) per[id] = ap;
  if (ukb) {
    auto& per_ukb = report["per_query_ukb"] = ojson::object();
    for (const auto& [id, count] : ukb->per_query) per_ukb[id] = count;
  }
  return report;
}

std::string per_query_csv(const ojson& report) {
  std::ostringstream out;
  out << "query_id,ap\n";
  out << std::setprecision(17);
  for (const auto& [id, ap] : report.at("per_query").items()) out << id << ',' << ap.get<double>() << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Configuration

ojson PipelineConfig::to_json() const {
  ojson j;
  j["split_factor"] = split_factor;
  j["ddr"] = ddr;
  j["root_square"] = root_square;
  j["K"] = k;
  j["seed"] = seed;
  j["max_iters"] = max_iters;
  j["tol"] = tol;
  j["max_pool"] = max_pool;
  j["encoder"] = to_string(encoder);
  j["central_fraction"] = central_fraction;
  j["locvlad_queries_only"] = locvlad_queries_only;
  j["zscore_scope"] = to_string(zscore_scope);
  j["pca_dim"] = pca_dim ? ojson(*pca_dim) : ojson(nullptr);
  j["ridge"] = ridge;
  j["protocol"] = protocol ? ojson(to_string(*protocol)) : ojson(nullptr);
  j["metric"] = to_string(metric);
  j["allow_same_dataset"] = allow_same_dataset;
  return j;
}

std::string describe_config(const PipelineConfig& cfg) {
  std::ostringstream out;
  const auto knob = [&out](const std::string& name, const std::string& value, const std::string& note) {
    out << "  " << std::left << std::setw(22) << name << std::setw(16) << value << note << '\n';
  };
  const auto num = [](double v) {
    std::ostringstream s;
    s << v;
    return s.str();
  };
  out << "DDR + VLAD retrieval pipeline configuration\n";
  knob("ddr", cfg.ddr ? "on" : "off",
       cfg.ddr ? "[published] depth split into dense low-dimensional descriptors"
               : "whole depth vector per cell (DDR ablation)");
  knob("split_factor", cfg.ddr ? std::to_string(cfg.split_factor) : "n/a",
       "[published] default 128: an 8x8x1280 map gives 640 descriptors of 128-D");
  knob("root_square", cfg.root_square ? "on" : "off", "[published] L1 then signed square root, default on");
  knob("K", std::to_string(cfg.k), "[published] default 100 visual words");
  knob("kmeans init", "k-means++", "[published] D^2-weighted seeding");
  knob("seed", std::to_string(cfg.seed), "[chosen] default 0");
  knob("max_iters", std::to_string(cfg.max_iters), "[chosen] default 100 Lloyd iterations");
  knob("tol", num(cfg.tol), "[chosen] default 1e-4 max centroid movement");
  knob("max_pool", std::to_string(cfg.max_pool), "[chosen] default 2000000 training descriptors");
  if (cfg.encoder == Encoder::locvlad) {
    knob("encoder", "locvlad",
         cfg.locvlad_queries_only
             ? "[published] locVLAD applied only to query images; database images use plain VLAD"
             : "locVLAD applied to query and database images");
    knob("central_fraction", num(cfg.central_fraction), "[chosen] default 0.75 of cells per axis, centered");
  } else {
    knob("encoder", "vlad", "plain VLAD for every image");
  }
  knob("residual norm", "on", "[published] each residual L2-normalized before summing");
  knob("zscore_scope", to_string(cfg.zscore_scope),
       "[chosen] default global: one mean/std over the whole vector");
  knob("final L2", "on", "[published] after Z-score");
  knob("pca_dim", cfg.pca_dim ? std::to_string(*cfg.pca_dim) : "none",
       cfg.pca_dim ? "[published] PCA-whitening, options 128/256/512" : "no whitening");
  if (cfg.pca_dim) knob("ridge", num(cfg.ridge), "[chosen] default 1e-9 added to eigenvalues");
  knob("distance", "L2", "[published] exhaustive L2 ranking");
  knob("protocol", cfg.protocol ? to_string(*cfg.protocol) : "from manifest",
       "[chosen] exclude_query for Holidays/Oxford/Paris, include_query for UKB");
  knob("metric", to_string(cfg.metric), "mAP, or ukb (mean same-class count in top 4)");
  knob("vocabulary", cfg.vocabulary_manifest.empty() ? "-" : cfg.vocabulary_manifest.string(),
       "[published] vocabulary built on a different dataset than the one evaluated");
  knob("eval", cfg.eval_manifest.empty() ? "-" : cfg.eval_manifest.string(), "");
  knob("threads", std::to_string(cfg.threads), "results do not depend on this");
  return out.str();
}

// ---------------------------------------------------------------------------
// Full run

namespace {

class Run {
 public:
  Run(const PipelineConfig& cfg, std::ostream* log) : cfg_(cfg), log_(log), cache_dir_(cfg.run_dir / "cache") {
    fs::create_directories(cache_dir_);
  }

  void note(const std::string& msg) const {
    if (log_) *log_ << msg << '\n';
  }

  fs::path slot(const std::string& stage, const std::string& key) const {
    return cache_dir_ / (stage + "-" + key.substr(0, 16));
  }

  // A cached artifact counts only if its sidecar records the full key.
  bool has(const fs::path& prefix, const std::string& key) const {
    const fs::path stamp = fs::path(prefix.string() + ".key");
    std::ifstream in(stamp);
    std::string stored;
    return in && std::getline(in, stored) && stored == key;
  }

  void stamp(const fs::path& prefix, const std::string& key) const {
    std::ofstream out(fs::path(prefix.string() + ".key"));
    out << key << '\n';
  }

  template <typename Load, typename Compute, typename Save>
  auto cached(const std::string& stage, const std::string& key, Load load, Compute compute, Save save) {
    const fs::path prefix = slot(stage, key);
    if (has(prefix, key)) {
      ++hits;
      note("[" + stage + "] cache hit " + key.substr(0, 16));
      return load(prefix);
    }
    ++misses;
    note("[" + stage + "] computing " + key.substr(0, 16));
    auto value = compute();
    save(value, prefix);
    stamp(prefix, key);
    return value;
  }

  std::size_t hits = 0;
  std::size_t misses = 0;

 private:
  const PipelineConfig& cfg_;
  std::ostream* log_;
  fs::path cache_dir_;
};

DatasetManifest load_stage_manifest(const fs::path& path, const char* role) {
  if (path.empty()) throw StageError("config", "", std::string("missing ") + role + " manifest");
  try {
    return load_manifest(path, true);
  } catch (const Error& err) {
    throw StageError("load-manifest", "", err.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StageError("evaluate", "", "cannot write " + path.string());
  out << text;
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& cfg, std::ostream* log) {
  if (cfg.k == 0) throw StageError("config", "", "K must be positive");
  if (cfg.ddr && cfg.split_factor == 0) throw StageError("config", "", "split_factor must be positive");
  if (cfg.pca_dim && *cfg.pca_dim == 0) throw StageError("config", "", "pca_dim must be positive");

  Run run(cfg, log);
  const DatasetManifest vocab = load_stage_manifest(cfg.vocabulary_manifest, "vocabulary");
  const DatasetManifest eval = load_stage_manifest(cfg.eval_manifest, "evaluation");
  const bool same_dataset = vocab.dataset_name == eval.dataset_name;
  if (same_dataset) {
    if (!cfg.allow_same_dataset)
      throw StageError("config", "",
                       "vocabulary and evaluation dataset are both '" + eval.dataset_name +
                           "'; pass --allow-same-dataset to permit this");
    run.note("warning: vocabulary is trained on the evaluation dataset '" + eval.dataset_name + "'");
  }
  if (eval.query_count() == 0) throw StageError("load-manifest", "", "evaluation manifest has no queries");
  const Protocol protocol = cfg.protocol.value_or(eval.protocol.value_or(Protocol::exclude_query));

  const std::string vocab_digest = dataset_digest(cfg.vocabulary_manifest, vocab);
  const std::string eval_digest = dataset_digest(cfg.eval_manifest, eval);

  CodebookOptions cb_opts;
  cb_opts.ddr = cfg.ddr_config();
  cb_opts.kmeans = {cfg.k, cfg.seed, cfg.max_iters, cfg.tol, cfg.threads};
  cb_opts.max_pool = cfg.max_pool;
  ojson cb_key_json = {{"stage", "codebook"}, {"vocab", vocab_digest}, {"split", cb_opts.ddr.split_factor},
                       {"root_square", cfg.root_square}, {"K", cfg.k}, {"seed", cfg.seed},
                       {"max_iters", cfg.max_iters}, {"tol", cfg.tol}, {"max_pool", cfg.max_pool}};
  const std::string cb_key = text_digest(cb_key_json.dump());
  const Codebook codebook = run.cached(
      "codebook", cb_key, [](const fs::path& p) { return Codebook::load(p); },
      [&] { return train_codebook(vocab, cb_opts).codebook; },
      [](const Codebook& cb, const fs::path& p) { cb.save(p); });

  EncodeOptions enc;
  enc.ddr = cfg.ddr_config();
  enc.encoder = cfg.encoder;
  enc.loc = {cfg.central_fraction, cfg.locvlad_queries_only};
  enc.vlad = {cfg.zscore_scope};
  enc.threads = cfg.threads;

  const auto encode_cached = [&](const DatasetManifest& m, const std::string& digest, Subset subset) {
    EncodeOptions o = enc;
    o.subset = subset;
    const std::string key =
        text_digest(ojson{{"stage", "encode"}, {"codebook", cb_key}, {"data", digest}, {"options", o.to_json()}}
                        .dump());
    return std::pair{run.cached(
                         "encode-" + to_string(subset), key,
                         [](const fs::path& p) { return EncodedSet::load(p); },
                         [&] { return encode_dataset(m, codebook, o); },
                         [](const EncodedSet& s, const fs::path& p) { s.save(p); }),
                     key};
  };

  auto [database, db_key] = encode_cached(eval, eval_digest, Subset::database);
  auto [queries, q_key] = encode_cached(eval, eval_digest, Subset::queries);

  std::optional<WhiteningModel> whitening;
  if (cfg.pca_dim) {
    auto [train_set, train_key] = encode_cached(vocab, vocab_digest, Subset::database);
    const std::string w_key = text_digest(
        ojson{{"stage", "whitening"}, {"train", train_key}, {"dim", *cfg.pca_dim}, {"ridge", cfg.ridge}}.dump());
    whitening = run.cached(
        "whitening", w_key, [](const fs::path& p) { return WhiteningModel::load(p); },
        [&] { return train_whitening(train_set, *cfg.pca_dim, cfg.ridge); },
        [](const WhiteningModel& m, const fs::path& p) { m.save(p); });
    database = apply_whitening(database, *whitening);
    queries = apply_whitening(queries, *whitening);
  }

  Index index;
  try {
    index = index_build(database.vectors, database.ids);
  } catch (const Error& err) {
    throw StageError("build-index", "", err.what());
  }
  index.save(cfg.run_dir / "index");
  const auto rankings =
      search_all(index, queries, std::nullopt, protocol == Protocol::exclude_query, cfg.threads);
  {
    std::ofstream out(cfg.run_dir / "rankings.jsonl", std::ios::binary | std::ios::trunc);
    write_rankings(out, rankings);
  }

  PipelineResult result;
  try {
    const GroundTruth gt = ground_truth_from_manifest(eval, protocol);
    result.report = evaluation_report(eval.dataset_name, cfg.metric, rankings, gt);
  } catch (const StageError&) {
    throw;
  } catch (const Error& err) {
    throw StageError("evaluate", "", err.what());
  }
  result.report["vocabulary"] = vocab.dataset_name;
  result.report["same_dataset_vocabulary"] = same_dataset;
  result.report["degenerate_vectors"] = database.degenerate.size() + queries.degenerate.size();
  result.report["config"] = cfg.to_json();
  result.report["inputs"] = {{"vocabulary", vocab_digest}, {"evaluation", eval_digest}};

  result.report_text = result.report.dump(2) + "\n";
  result.report_path = cfg.run_dir / "report.json";
  write_text(result.report_path, result.report_text);
  write_text(cfg.run_dir / "per_query_ap.csv", per_query_csv(result.report));
  result.cache_hits = run.hits;
  result.cache_misses = run.misses;
  run.note("[evaluate] " + to_string(cfg.metric) + " = " + std::to_string(result.report["value"].get<double>()));
  return result;
}

}  // namespace ddrvlad
