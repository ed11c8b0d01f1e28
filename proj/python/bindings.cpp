#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "ddrvlad/codebook.h"
#include "ddrvlad/ddr.h"
#include "ddrvlad/evaluation.h"
#include "ddrvlad/pipeline.h"
#include "ddrvlad/retrieval.h"
#include "ddrvlad/tensor_store.h"
#include "ddrvlad/vlad.h"
#include "ddrvlad/whitening.h"

namespace py = pybind11;
using namespace ddrvlad;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const F64& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D array");
  Matrix m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), m.data.begin());
  return m;
}

std::vector<double> to_vector(const F64& a) {
  if (a.ndim() != 1) throw py::value_error("expected a 1-D array");
  return {a.data(), a.data() + a.size()};
}

F64 from_matrix(const Matrix& m) {
  F64 out({m.rows, m.cols});
  std::copy(m.data.begin(), m.data.end(), out.mutable_data());
  return out;
}

F64 from_vector(const std::vector<double>& v) {
  F64 out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(v.size())});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

FeatureMap to_feature_map(const F32& a) {
  if (a.ndim() != 3) throw py::value_error("feature maps are [H, W, D] arrays");
  return FeatureMap(static_cast<std::uint32_t>(a.shape(0)), static_cast<std::uint32_t>(a.shape(1)),
                    static_cast<std::uint32_t>(a.shape(2)), std::vector<float>(a.data(), a.data() + a.size()));
}

DescriptorSet to_descriptors(const F64& rows) {
  DescriptorSet ds;
  ds.rows = to_matrix(rows);
  return ds;
}

py::dict vlad_dict(const VladVector& v) {
  py::dict d;
  d["values"] = from_vector(v.values);
  d["stage"] = to_string(v.stage);
  d["degenerate"] = v.degenerate;
  d["sigma_guard_fired"] = v.sigma_guard_fired;
  return d;
}

RankedList to_ranked(const std::string& query_id, const std::vector<std::string>& ids) {
  RankedList r;
  r.query_id = query_id;
  for (std::size_t i = 0; i < ids.size(); ++i) r.hits.push_back({ids[i], static_cast<double>(i)});
  return r;
}

GroundTruth to_truth(const std::map<std::string, std::set<std::string>>& relevant,
                     const std::map<std::string, std::set<std::string>>& junk, Protocol protocol) {
  GroundTruth gt;
  gt.protocol = protocol;
  for (const auto& [q, rel] : relevant) gt.queries[q].relevant = rel;
  for (const auto& [q, j] : junk) gt.queries[q].junk = j;
  return gt;
}

std::vector<RankedList> to_rankings(const std::map<std::string, std::vector<std::string>>& rankings) {
  std::vector<RankedList> out;
  for (const auto& [q, ids] : rankings) out.push_back(to_ranked(q, ids));
  return out;
}

}  // namespace

PYBIND11_MODULE(_ddrvlad, m) {
  m.doc() = "DDR + VLAD image retrieval core";

  // Translators run newest first, so the subclass is registered last.
  const auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<StageError>(m, "StageError", error.ptr());

  m.def(
      "read_tensor",
      [](const std::filesystem::path& path) {
        const Tensor t = read_tensor(path);
        std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
        F32 out(shape);
        std::copy(t.data.begin(), t.data.end(), out.mutable_data());
        return out;
      },
      py::arg("path"));
  m.def(
      "write_tensor",
      [](const std::filesystem::path& path, const F32& a) {
        std::vector<std::uint32_t> shape;
        for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<std::uint32_t>(a.shape(i)));
        write_tensor(path, shape, std::span<const float>(a.data(), static_cast<std::size_t>(a.size())));
      },
      py::arg("path"), py::arg("array"));

  m.def(
      "ddr_split",
      [](const F32& fmap, std::uint32_t split_factor, bool root_square) {
        const DescriptorSet ds = extract_descriptors(to_feature_map(fmap), {split_factor, root_square});
        py::array_t<std::uint32_t> origin({ds.origin.size(), std::size_t{2}});
        auto o = origin.mutable_unchecked<2>();
        for (std::size_t i = 0; i < ds.origin.size(); ++i) {
          o(i, 0) = ds.origin[i].h;
          o(i, 1) = ds.origin[i].w;
        }
        return py::make_tuple(from_matrix(ds.rows), origin);
      },
      py::arg("fmap"), py::arg("split_factor") = kDefaultSplitFactor, py::arg("root_square") = true,
      "Split an [H, W, D] map into descriptors; returns (rows, cell origins).");
  m.def(
      "root_square_normalize", [](const F64& rows) { return from_matrix(root_square_normalize(to_descriptors(rows)).rows); },
      py::arg("rows"));

  m.def(
      "kmeans",
      [](const F64& points, std::size_t k, std::uint64_t seed, std::size_t max_iters, double tol, unsigned threads) {
        const KMeansResult r = kmeans_train(to_matrix(points), {k, seed, max_iters, tol, threads});
        py::dict d;
        d["centroids"] = from_matrix(r.codebook.centroids());
        d["objective"] = r.objective;
        d["iterations"] = r.iterations;
        d["converged"] = r.converged;
        d["empty_cluster_reseeds"] = r.empty_cluster_reseeds;
        return d;
      },
      py::arg("points"), py::arg("k") = kDefaultWords, py::arg("seed") = 0, py::arg("max_iters") = kDefaultMaxIters,
      py::arg("tol") = kDefaultTol, py::arg("threads") = 1);
  m.def(
      "quantize",
      [](const F64& centroids, const F64& points) {
        const auto labels = quantize_all(Codebook(to_matrix(centroids)), to_matrix(points));
        py::array_t<std::int64_t> out(std::vector<py::ssize_t>{static_cast<py::ssize_t>(labels.size())});
        std::copy(labels.begin(), labels.end(), out.mutable_data());
        return out;
      },
      py::arg("centroids"), py::arg("points"));

  m.def(
      "vlad_encode",
      [](const F64& descriptors, const F64& centroids, const std::string& zscore_scope) {
        return vlad_dict(vlad_encode(to_descriptors(descriptors), Codebook(to_matrix(centroids)),
                                     {parse_zscore_scope(zscore_scope)}));
      },
      py::arg("descriptors"), py::arg("centroids"), py::arg("zscore_scope") = "global");
  m.def(
      "locvlad_encode",
      [](const F32& fmap, const F64& centroids, std::uint32_t split_factor, bool root_square, double central_fraction,
         const std::string& zscore_scope) {
        return vlad_dict(locvlad_encode(to_feature_map(fmap), {split_factor, root_square}, {central_fraction, true},
                                        Codebook(to_matrix(centroids)), {parse_zscore_scope(zscore_scope)}));
      },
      py::arg("fmap"), py::arg("centroids"), py::arg("split_factor") = kDefaultSplitFactor,
      py::arg("root_square") = true, py::arg("central_fraction") = 0.75, py::arg("zscore_scope") = "global");

  py::class_<WhiteningModel>(m, "Whitening")
      .def_static(
          "fit", [](const F64& train, std::size_t dim, double ridge) { return whitening_fit(to_matrix(train), dim, ridge); },
          py::arg("train"), py::arg("dim"), py::arg("ridge") = kDefaultRidge)
      .def_static("load", &WhiteningModel::load, py::arg("prefix"))
      .def("save", &WhiteningModel::save, py::arg("prefix"))
      .def_readonly("input_dim", &WhiteningModel::input_dim)
      .def_readonly("output_dim", &WhiteningModel::output_dim)
      .def_readonly("ridge", &WhiteningModel::ridge)
      .def_property_readonly("mean", [](const WhiteningModel& w) { return from_vector(w.mean); })
      .def_property_readonly("basis", [](const WhiteningModel& w) { return from_matrix(w.basis); })
      .def_property_readonly("eigenvalues", [](const WhiteningModel& w) { return from_vector(w.eigenvalues); })
      .def(
          "project", [](const WhiteningModel& w, const F64& x) { return from_vector(whitening_project(w, to_vector(x))); },
          py::arg("x"), "Centered projection scaled per component, without renormalization.")
      .def(
          "apply",
          [](const WhiteningModel& w, const F64& x) {
            VladVector v;
            v.values = to_vector(x);
            v.stage = VladStage::l2_final;
            return vlad_dict(whitening_apply(w, v));
          },
          py::arg("x"));

  py::class_<Index>(m, "Index")
      .def(py::init([](const F64& vectors, std::vector<std::string> ids) {
             return index_build(to_matrix(vectors), std::move(ids));
           }),
           py::arg("vectors"), py::arg("ids"))
      .def_static("load", &Index::load, py::arg("dir"))
      .def("save", &Index::save, py::arg("dir"))
      .def("__len__", &Index::size)
      .def_property_readonly("dim", &Index::dim)
      .def_property_readonly("ids", &Index::ids)
      .def(
          "search",
          [](const Index& idx, const F64& query, std::optional<std::size_t> top_k,
             std::optional<std::string> exclude_id) {
            const RankedList r = idx.search(to_vector(query), top_k, exclude_id);
            std::vector<std::pair<std::string, double>> out;
            for (const auto& h : r.hits) out.emplace_back(h.image_id, h.distance);
            return out;
          },
          py::arg("query"), py::arg("top_k") = py::none(), py::arg("exclude_id") = py::none(),
          "Exact L2 ranking as (image_id, distance) pairs.");

  m.def(
      "average_precision",
      [](const std::vector<std::string>& ranked, const std::set<std::string>& relevant,
         const std::set<std::string>& junk) { return average_precision(to_ranked("q", ranked), relevant, junk); },
      py::arg("ranked"), py::arg("relevant"), py::arg("junk") = std::set<std::string>{});
  m.def(
      "mean_ap",
      [](const std::map<std::string, std::vector<std::string>>& rankings,
         const std::map<std::string, std::set<std::string>>& relevant,
         const std::map<std::string, std::set<std::string>>& junk) {
        const MeanApResult r = mean_ap(to_rankings(rankings), to_truth(relevant, junk, Protocol::exclude_query));
        return py::make_tuple(r.value, r.per_query);
      },
      py::arg("rankings"), py::arg("relevant"), py::arg("junk") = std::map<std::string, std::set<std::string>>{});
  m.def(
      "ukb_score",
      [](const std::map<std::string, std::vector<std::string>>& rankings,
         const std::map<std::string, std::set<std::string>>& relevant) {
        return ukb_score(to_rankings(rankings), to_truth(relevant, {}, Protocol::include_query)).value;
      },
      py::arg("rankings"), py::arg("relevant"));

  py::class_<PipelineConfig>(m, "PipelineConfig")
      .def(py::init<>())
      .def_readwrite("split_factor", &PipelineConfig::split_factor)
      .def_readwrite("ddr", &PipelineConfig::ddr)
      .def_readwrite("root_square", &PipelineConfig::root_square)
      .def_readwrite("k", &PipelineConfig::k)
      .def_readwrite("seed", &PipelineConfig::seed)
      .def_readwrite("max_iters", &PipelineConfig::max_iters)
      .def_readwrite("tol", &PipelineConfig::tol)
      .def_readwrite("max_pool", &PipelineConfig::max_pool)
      .def_property(
          "encoder", [](const PipelineConfig& c) { return to_string(c.encoder); },
          [](PipelineConfig& c, const std::string& s) { c.encoder = parse_encoder(s); })
      .def_readwrite("central_fraction", &PipelineConfig::central_fraction)
      .def_readwrite("locvlad_queries_only", &PipelineConfig::locvlad_queries_only)
      .def_property(
          "zscore_scope", [](const PipelineConfig& c) { return to_string(c.zscore_scope); },
          [](PipelineConfig& c, const std::string& s) { c.zscore_scope = parse_zscore_scope(s); })
      .def_readwrite("pca_dim", &PipelineConfig::pca_dim)
      .def_readwrite("ridge", &PipelineConfig::ridge)
      .def_readwrite("vocabulary_manifest", &PipelineConfig::vocabulary_manifest)
      .def_readwrite("eval_manifest", &PipelineConfig::eval_manifest)
      .def_property(
          "protocol",
          [](const PipelineConfig& c) { return c.protocol ? std::optional(to_string(*c.protocol)) : std::nullopt; },
          [](PipelineConfig& c, const std::optional<std::string>& s) {
            c.protocol = s ? std::optional(parse_protocol(*s)) : std::nullopt;
          })
      .def_property(
          "metric", [](const PipelineConfig& c) { return to_string(c.metric); },
          [](PipelineConfig& c, const std::string& s) { c.metric = parse_metric(s); })
      .def_readwrite("allow_same_dataset", &PipelineConfig::allow_same_dataset)
      .def_readwrite("threads", &PipelineConfig::threads)
      .def_readwrite("run_dir", &PipelineConfig::run_dir)
      .def("to_json", [](const PipelineConfig& c) { return c.to_json().dump(); });

  m.def("describe_config", &describe_config, py::arg("config"));
  m.def(
      "run_pipeline",
      [](const PipelineConfig& cfg) {
        std::ostringstream log;
        PipelineResult r;
        {
          py::gil_scoped_release release;
          r = run_pipeline(cfg, &log);
        }
        py::dict d;
        d["report"] = r.report_text;
        d["log"] = log.str();
        d["cache_hits"] = r.cache_hits;
        d["cache_misses"] = r.cache_misses;
        return d;
      },
      py::arg("config"), "Run the full pipeline; the report is returned as JSON text.");
}
