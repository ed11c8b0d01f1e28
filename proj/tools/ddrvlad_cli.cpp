// ddrvlad: command-line driver for the DDR + VLAD retrieval pipeline.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ddrvlad/pipeline.h"

namespace fs = std::filesystem;
using namespace ddrvlad;

namespace {

struct DdrFlags {
  std::uint32_t split_factor = kDefaultSplitFactor;
  bool no_ddr = false;
  bool no_root_square = false;

  void add(CLI::App* app) {
    app->add_option("--split-factor", split_factor, "Descriptor dimension after depth splitting")
        ->check(CLI::PositiveNumber);
    app->add_flag("--no-ddr", no_ddr, "Use the whole depth vector of each cell as one descriptor");
    app->add_flag("--no-root-square", no_root_square, "Skip root-square normalization of descriptors");
  }
  DdrConfig config() const { return {no_ddr ? 0u : split_factor, !no_root_square}; }
};

struct EncoderFlags {
  std::string encoder = "locvlad";
  double central_fraction = 0.75;
  bool locvlad_all = false;
  std::string zscore_scope = "global";

  void add(CLI::App* app) {
    app->add_option("--encoder", encoder, "vlad or locvlad")->check(CLI::IsMember({"vlad", "locvlad"}));
    app->add_option("--central-fraction", central_fraction, "locVLAD central window fraction per axis")
        ->check(CLI::Range(1e-9, 1.0));
    app->add_flag("--locvlad-all", locvlad_all, "Apply locVLAD to database images too");
    app->add_option("--zscore-scope", zscore_scope, "global or per_word")
        ->check(CLI::IsMember({"global", "per_word"}));
  }
};

struct RunFlags {
  PipelineConfig cfg;
  DdrFlags ddr;
  EncoderFlags enc;
  std::size_t pca_dim = 0;
  std::string protocol;
  std::string metric = "map";

  void add(CLI::App* app) {
    ddr.add(app);
    enc.add(app);
    app->add_option("--vocabulary", cfg.vocabulary_manifest, "Manifest of the vocabulary dataset");
    app->add_option("--eval", cfg.eval_manifest, "Manifest of the evaluation dataset");
    app->add_option("-K,--K", cfg.k, "Number of visual words")->check(CLI::PositiveNumber);
    app->add_option("--seed", cfg.seed, "Random seed");
    app->add_option("--max-iters", cfg.max_iters, "Lloyd iteration cap")->check(CLI::PositiveNumber);
    app->add_option("--tol", cfg.tol, "Convergence threshold on centroid movement");
    app->add_option("--max-pool", cfg.max_pool, "Cap on training descriptors")->check(CLI::PositiveNumber);
    app->add_option("--pca-dim", pca_dim, "PCA-whitening output dimension (0 = none)");
    app->add_option("--ridge", cfg.ridge, "Eigenvalue ridge for whitening");
    app->add_option("--protocol", protocol, "exclude_query or include_query (default: manifest)")
        ->check(CLI::IsMember({"exclude_query", "include_query"}));
    app->add_option("--metric", metric, "map or ukb")->check(CLI::IsMember({"map", "ukb"}));
    app->add_flag("--allow-same-dataset", cfg.allow_same_dataset,
                  "Allow the vocabulary to come from the evaluation dataset");
    app->add_option("--run-dir", cfg.run_dir, "Directory for cached artifacts and reports");
    app->add_option("--threads", cfg.threads, "Worker thread cap")->check(CLI::PositiveNumber);
  }

  PipelineConfig finish() {
    cfg.split_factor = ddr.split_factor;
    cfg.ddr = !ddr.no_ddr;
    cfg.root_square = !ddr.no_root_square;
    cfg.encoder = parse_encoder(enc.encoder);
    cfg.central_fraction = enc.central_fraction;
    cfg.locvlad_queries_only = !enc.locvlad_all;
    cfg.zscore_scope = parse_zscore_scope(enc.zscore_scope);
    if (pca_dim > 0) cfg.pca_dim = pca_dim;
    if (!protocol.empty()) cfg.protocol = parse_protocol(protocol);
    cfg.metric = parse_metric(metric);
    return cfg;
  }
};

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DDR + VLAD image retrieval: codebooks, encoding, whitening, search and evaluation"};
  app.require_subcommand(1);
  std::string current = "cli";

  // train-codebook
  auto* train_cb = app.add_subcommand("train-codebook", "Train the K-means vocabulary on a dataset");
  fs::path tc_manifest, tc_out;
  DdrFlags tc_ddr;
  KMeansOptions tc_km;
  std::size_t tc_pool = kDefaultMaxPool;
  train_cb->add_option("--manifest", tc_manifest, "Dataset manifest")->required();
  train_cb->add_option("--out", tc_out, "Output prefix (<out>.fmap, <out>.json)")->required();
  tc_ddr.add(train_cb);
  train_cb->add_option("-K,--K", tc_km.k, "Number of visual words")->check(CLI::PositiveNumber);
  train_cb->add_option("--seed", tc_km.seed, "Random seed");
  train_cb->add_option("--max-iters", tc_km.max_iters, "Lloyd iteration cap")->check(CLI::PositiveNumber);
  train_cb->add_option("--tol", tc_km.tol, "Convergence threshold");
  train_cb->add_option("--max-pool", tc_pool, "Cap on training descriptors")->check(CLI::PositiveNumber);
  train_cb->add_option("--threads", tc_km.threads, "Worker thread cap")->check(CLI::PositiveNumber);

  // encode
  auto* encode = app.add_subcommand("encode", "Encode a dataset into VLAD / locVLAD vectors");
  fs::path en_manifest, en_codebook, en_out, en_whitening;
  std::string en_subset = "database";
  DdrFlags en_ddr;
  EncoderFlags en_enc;
  unsigned en_threads = 1;
  encode->add_option("--manifest", en_manifest, "Dataset manifest")->required();
  encode->add_option("--codebook", en_codebook, "Codebook prefix")->required();
  encode->add_option("--out", en_out, "Output prefix")->required();
  encode->add_option("--subset", en_subset, "database (all images) or queries")
      ->check(CLI::IsMember({"database", "queries"}));
  encode->add_option("--whitening", en_whitening, "Whitening model prefix to apply");
  encode->add_option("--threads", en_threads, "Worker thread cap")->check(CLI::PositiveNumber);
  en_ddr.add(encode);
  en_enc.add(encode);

  // train-pca
  auto* train_pca = app.add_subcommand("train-pca", "Fit PCA-whitening on encoded vectors");
  fs::path tp_vectors, tp_out;
  std::size_t tp_dim = 128;
  double tp_ridge = kDefaultRidge;
  train_pca->add_option("--vectors", tp_vectors, "Encoded vector prefix")->required();
  train_pca->add_option("--out", tp_out, "Output prefix")->required();
  train_pca->add_option("--dim", tp_dim, "Output dimension (128, 256, 512, ...)")->check(CLI::PositiveNumber);
  train_pca->add_option("--ridge", tp_ridge, "Eigenvalue ridge");

  // build-index
  auto* build_index = app.add_subcommand("build-index", "Build an exhaustive L2 index");
  fs::path bi_vectors, bi_out;
  build_index->add_option("--vectors", bi_vectors, "Encoded vector prefix")->required();
  build_index->add_option("--out", bi_out, "Index directory")->required();

  // query
  auto* query = app.add_subcommand("query", "Rank the index for each query vector (JSON lines)");
  fs::path q_index, q_vectors, q_out;
  std::size_t q_top_k = 0;
  bool q_exclude_self = false;
  unsigned q_threads = 1;
  query->add_option("--index", q_index, "Index directory")->required();
  query->add_option("--vectors", q_vectors, "Query vector prefix")->required();
  query->add_option("--top-k", q_top_k, "Hits per query (0 = all)");
  query->add_flag("--exclude-self", q_exclude_self, "Drop each query's own id from its ranking");
  query->add_option("--out", q_out, "Output file (default: stdout)");
  query->add_option("--threads", q_threads, "Worker thread cap")->check(CLI::PositiveNumber);

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Compute mAP / UKB score from rankings");
  fs::path ev_manifest, ev_rankings, ev_out;
  std::string ev_metric = "map", ev_protocol;
  evaluate->add_option("--manifest", ev_manifest, "Dataset manifest")->required();
  evaluate->add_option("--rankings", ev_rankings, "JSON-lines rankings from `query`")->required();
  evaluate->add_option("--metric", ev_metric, "map or ukb")->check(CLI::IsMember({"map", "ukb"}));
  evaluate->add_option("--protocol", ev_protocol, "exclude_query or include_query (default: manifest)")
      ->check(CLI::IsMember({"exclude_query", "include_query"}));
  evaluate->add_option("--out", ev_out, "Output prefix (<out>.json, <out>.csv)");

  // run / describe
  auto* run = app.add_subcommand("run", "Run the full pipeline end to end");
  RunFlags run_flags;
  run_flags.add(run);
  auto* describe = app.add_subcommand("describe", "Print the effective configuration");
  RunFlags describe_flags;
  describe_flags.add(describe);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cb) {
      current = "train-codebook";
      const auto manifest = load_manifest(tc_manifest);
      const auto result = train_codebook(manifest, {tc_ddr.config(), tc_km, tc_pool});
      result.codebook.save(tc_out);
      std::cerr << "trained K=" << result.codebook.size() << " d=" << result.codebook.dim() << " in "
                << result.iterations << " iterations (objective " << result.objective.back() << ")\n";
    } else if (*encode) {
      current = "encode";
      const auto manifest = load_manifest(en_manifest);
      const auto codebook = Codebook::load(en_codebook);
      if (codebook.trained_on() == manifest.dataset_name)
        std::cerr << "warning: codebook was trained on the dataset being encoded ('" << manifest.dataset_name
                  << "')\n";
      EncodeOptions opts;
      opts.ddr = en_ddr.config();
      opts.encoder = parse_encoder(en_enc.encoder);
      opts.loc = {en_enc.central_fraction, !en_enc.locvlad_all};
      opts.vlad = {parse_zscore_scope(en_enc.zscore_scope)};
      opts.subset = parse_subset(en_subset);
      opts.threads = en_threads;
      EncodedSet set = encode_dataset(manifest, codebook, opts);
      if (!en_whitening.empty()) set = apply_whitening(set, WhiteningModel::load(en_whitening));
      set.save(en_out);
      std::cerr << "encoded " << set.ids.size() << " images to dim " << set.vectors.cols << '\n';
    } else if (*train_pca) {
      current = "train-pca";
      const auto vectors = EncodedSet::load(tp_vectors);
      const auto model = train_whitening(vectors, tp_dim, tp_ridge);
      model.save(tp_out);
      std::cerr << "whitening " << model.input_dim << " -> " << model.output_dim << " trained on "
                << model.trained_on << '\n';
    } else if (*build_index) {
      current = "build-index";
      auto vectors = EncodedSet::load(bi_vectors);
      index_build(std::move(vectors.vectors), vectors.ids).save(bi_out);
    } else if (*query) {
      current = "query";
      const auto index = Index::load(q_index);
      const auto queries = EncodedSet::load(q_vectors);
      const auto rankings = search_all(index, queries, q_top_k == 0 ? std::nullopt : std::optional(q_top_k),
                                       q_exclude_self, q_threads);
      if (q_out.empty()) {
        write_rankings(std::cout, rankings);
      } else {
        std::ofstream out(q_out);
        if (!out) throw Error("cannot write " + q_out.string());
        write_rankings(out, rankings);
      }
    } else if (*evaluate) {
      current = "evaluate";
      const auto manifest = load_manifest(ev_manifest, false);
      std::ifstream in(ev_rankings);
      if (!in) throw Error("cannot open " + ev_rankings.string());
      const auto rankings = read_rankings(in);
      const Protocol protocol = ev_protocol.empty() ? manifest.protocol.value_or(Protocol::exclude_query)
                                                    : parse_protocol(ev_protocol);
      const auto gt = ground_truth_from_manifest(manifest, protocol);
      const auto report = evaluation_report(manifest.dataset_name, parse_metric(ev_metric), rankings, gt);
      if (!ev_out.empty()) {
        write_json(fs::path(ev_out.string() + ".json"), report);
        std::ofstream csv(fs::path(ev_out.string() + ".csv"));
        csv << per_query_csv(report);
      }
      std::cout << report.dump(2) << '\n';
    } else if (*run) {
      current = "run";
      const PipelineConfig cfg = run_flags.finish();
      const auto result = run_pipeline(cfg, &std::cerr);
      std::cout << result.report_text;
    } else if (*describe) {
      current = "describe";
      std::cout << describe_config(describe_flags.finish());
    }
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: [" << current << "] " << e.what() << '\n';
    return 1;
  }
  return 0;
}
