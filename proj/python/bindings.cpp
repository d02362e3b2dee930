#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "circles/experiment.hpp"
#include "circles/metrics.hpp"
#include "circles/mockworld.hpp"
#include "circles/prompting.hpp"

namespace py = pybind11;
using namespace circles;
using nlohmann::json;

namespace {

using Hits = std::vector<std::pair<std::string, double>>;

Hits hits(const RetrievalSet& s) {
  Hits out;
  for (const auto& e : s.entries) out.emplace_back(e.example_id, e.score);
  return out;
}

EmbeddingKind kind_of(const std::string& s) {
  if (s == "image") return EmbeddingKind::image;
  if (s == "question") return EmbeddingKind::question;
  if (s == "caption") return EmbeddingKind::caption;
  throw PreconditionError("unknown embedding kind '" + s + "'");
}

std::vector<float> unit(const std::vector<float>& v) { return normalize(v); }

RetrievalOptions excluding(const std::vector<std::string>& ids) {
  RetrievalOptions o;
  o.exclude.insert(ids.begin(), ids.end());
  return o;
}

// Runs one method on the mock stack; returns the report as JSON text.
std::string run_mock(const std::string& config_json) {
  auto cfg = RunConfig::from_json(json::parse(config_json));
  if (!cfg.mock) cfg.mock = MockSpec{};
  auto env = make_environment(cfg);
  const auto rep = run_experiment(cfg, env);
  const auto& a = rep.aggregates;
  json rows = json::array();
  for (const auto& r : rep.rows) rows.push_back(to_json(r));
  return json{{"method", rep.method},
              {"fingerprint", rep.fingerprint},
              {"queries", a.queries},
              {"failures", a.failures},
              {"em", a.em_mean},
              {"f1", a.f1_mean},
              {"accuracy", a.accuracy},
              {"weighted_f1", a.weighted_f1},
              {"mean_total_tokens", a.usage.mean_total_tokens},
              {"mean_calls", a.usage.mean_calls},
              {"rows", rows}}
      .dump();
}

std::string world_json(const std::string& config_json) {
  const auto w = mock::generate_world(mock::WorldConfig::from_json(json::parse(config_json)));
  json train = json::array(), queries = json::array();
  for (const auto& it : w.train) train.push_back(example_to_json(w.to_example(it)));
  for (const auto& it : w.queries) queries.push_back(example_to_json(w.to_example(it)));
  return json{{"schema", w.schema.to_json()}, {"train", train}, {"queries", queries}}.dump();
}

}  // namespace

PYBIND11_MODULE(_circles, m) {
  m.doc() = "Native core of the circles package";

  py::register_exception<PreconditionError>(m, "PreconditionError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<MissingEmbedding>(m, "MissingEmbedding", PyExc_KeyError);

  m.def("normalize_answer", &normalize_answer);
  m.def("exact_match", &exact_match);
  m.def("word_f1", &word_f1);
  m.def("classification_metrics",
        [](const std::vector<std::string>& preds, const std::vector<std::string>& golds,
           const std::vector<std::string>& labels) {
          const auto r = classification_metrics(preds, golds, labels);
          return std::make_pair(r.accuracy, r.weighted_f1);
        });

  m.def("allocate_budget", [](std::size_t total, std::size_t num_attributes, std::size_t k_corr) {
    const auto b = allocate_budget(total, num_attributes, k_corr);
    return py::dict(py::arg("k_corr") = b.k_corr, py::arg("k_causal") = b.k_causal,
                    py::arg("num_attributes") = b.num_attributes, py::arg("per_attribute_k") = b.per_attribute_k);
  });

  m.def("normalize", &unit);

  py::class_<EmbeddingStore>(m, "EmbeddingStore")
      .def(py::init<>())
      .def("add", [](EmbeddingStore& s, const std::string& id, const std::string& kind,
                     const std::vector<float>& v) { s.add(id, kind_of(kind), v); })
      .def("__len__", &EmbeddingStore::size)
      .def_property_readonly("dim", &EmbeddingStore::dim)
      .def("get", [](const EmbeddingStore& s, const std::string& id, const std::string& kind) {
        auto v = s.at(id, kind_of(kind));
        return std::vector<float>(v.begin(), v.end());
      })
      .def(
          "top_k",
          [](const EmbeddingStore& s, const std::vector<float>& q, std::size_t k, const std::string& kind,
             const std::vector<std::string>& exclude) { return hits(top_k(q, s, kind_of(kind), k, excluding(exclude))); },
          py::arg("query"), py::arg("k"), py::arg("kind") = "image", py::arg("exclude") = std::vector<std::string>{})
      .def(
          "rices",
          [](const EmbeddingStore& s, const std::vector<float>& image, std::size_t k,
             const std::vector<std::string>& exclude) { return hits(rices({image, {}}, s, k, excluding(exclude))); },
          py::arg("image"), py::arg("k"), py::arg("exclude") = std::vector<std::string>{})
      .def(
          "muier",
          [](const EmbeddingStore& s, const std::vector<float>& image, std::size_t k) {
            return hits(muier({image, {}}, s, k));
          },
          py::arg("image"), py::arg("k"))
      .def(
          "mmices",
          [](const EmbeddingStore& s, const std::vector<float>& image, const std::vector<float>& question,
             std::size_t k, std::size_t pool) { return hits(mmices({image, question}, s, k, pool)); },
          py::arg("image"), py::arg("question"), py::arg("k"), py::arg("pool") = kDefaultMmicesPool)
      .def(
          "counterfactual",
          [](const EmbeddingStore& s, const std::vector<float>& caption, const std::vector<float>& question,
             std::size_t k, bool use_text) {
            AttributeIntervention iv{"", "", caption};
            return hits(retrieve_counterfactual(iv, {{}, question}, s, k, use_text));
          },
          py::arg("caption"), py::arg("question"), py::arg("k"), py::arg("use_text") = true);

  m.def("mock_embed", [](const std::string& text, const std::string& schema_json) {
    return mock::mock_embed(text, mock::MockSchema::from_json(json::parse(schema_json)));
  });
  m.def("_generate_world", &world_json);
  m.def("_run_mock", &run_mock, py::call_guard<py::gil_scoped_release>());
  m.def("method_names", &method_names);
  m.def("count_demonstrations", &count_demonstrations);
}
