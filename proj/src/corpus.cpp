#include "circles/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "circles/common.hpp"

namespace circles {

using nlohmann::json;

std::string to_string(TaskKind kind) {
  return kind == TaskKind::classification ? "classification" : "open_vqa";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "open_vqa" || s == "vqa") return TaskKind::open_vqa;
  throw PreconditionError("unknown task kind '" + s + "' (expected classification|open_vqa)");
}

Corpus::Corpus(std::vector<Example> examples, TaskKind kind,
               std::optional<std::string> question_template)
    : examples_(std::move(examples)), kind_(kind), template_(std::move(question_template)) {
  for (std::size_t i = 0; i < examples_.size(); ++i) {
    const auto& ex = examples_[i];
    if (ex.id.empty()) throw CorpusError(0, "example " + std::to_string(i) + " has an empty id");
    if (!index_.emplace(ex.id, i).second) throw CorpusError(0, "duplicate id '" + ex.id + "'");
  }
  if (kind_ == TaskKind::classification && !template_) {
    if (!examples_.empty() &&
        std::all_of(examples_.begin(), examples_.end(),
                    [&](const Example& e) { return e.question == examples_.front().question; })) {
      template_ = examples_.front().question;
    } else {
      throw CorpusError(0, "classification corpus requires a question template");
    }
  }
}

const Example* Corpus::find(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? nullptr : &examples_[it->second];
}

const Example& Corpus::at(const std::string& id) const {
  if (const auto* ex = find(id)) return *ex;
  throw CorpusError(0, "id '" + id + "' not in corpus");
}

std::vector<std::string> Corpus::ids() const {
  std::vector<std::string> out;
  out.reserve(examples_.size());
  for (const auto& e : examples_) out.push_back(e.id);
  return out;
}

std::vector<std::string> Corpus::label_set() const {
  std::set<std::string> labels;
  for (const auto& e : examples_) labels.insert(e.label());
  return {labels.begin(), labels.end()};
}

json example_to_json(const Example& ex) {
  json j = ex.extra.is_object() ? ex.extra : json::object();
  j["id"] = ex.id;
  j["image"] = ex.image_ref;
  j["question"] = ex.question;
  j["answer"] = ex.answer;
  if (ex.attributes) j["attributes"] = *ex.attributes;
  if (ex.class_label) j["class_label"] = *ex.class_label;
  if (ex.options) j["options"] = *ex.options;
  return j;
}

namespace {

std::string required_string(const json& j, const char* key, std::size_t line) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null())
    throw CorpusError(line, std::string("missing required field \"") + key + "\"");
  if (!it->is_string())
    throw CorpusError(line, std::string("field \"") + key + "\" must be a string");
  return it->get<std::string>();
}

}  // namespace

Example example_from_json(const json& j, std::size_t line) {
  if (!j.is_object()) throw CorpusError(line, "record is not a JSON object");
  Example ex;
  ex.id = required_string(j, "id", line);
  ex.image_ref = required_string(j, "image", line);
  ex.question = required_string(j, "question", line);
  ex.answer = required_string(j, "answer", line);
  if (ex.id.empty()) throw CorpusError(line, "field \"id\" is empty");
  if (ex.image_ref.empty()) throw CorpusError(line, "field \"image\" is empty");
  if (ex.question.empty()) throw CorpusError(line, "field \"question\" is empty");

  if (auto it = j.find("attributes"); it != j.end() && !it->is_null()) {
    if (!it->is_object()) throw CorpusError(line, "field \"attributes\" must be an object");
    std::map<std::string, std::string> attrs;
    for (const auto& [k, v] : it->items()) {
      if (!v.is_string() || v.get<std::string>().empty())
        throw CorpusError(line, "attribute \"" + k + "\" must be a non-empty string");
      attrs[k] = v.get<std::string>();
    }
    ex.attributes = std::move(attrs);
  }
  if (auto it = j.find("class_label"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw CorpusError(line, "field \"class_label\" must be a string");
    ex.class_label = it->get<std::string>();
  }
  if (auto it = j.find("options"); it != j.end() && !it->is_null()) {
    if (!it->is_array()) throw CorpusError(line, "field \"options\" must be an array");
    std::vector<std::string> opts;
    for (const auto& o : *it) {
      if (!o.is_string()) throw CorpusError(line, "options must be strings");
      opts.push_back(o.get<std::string>());
    }
    ex.options = std::move(opts);
  }

  static const std::set<std::string> known = {"id",         "image",       "question", "answer",
                                              "attributes", "class_label", "options"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) ex.extra[k] = v;
  return ex;
}

Corpus parse_corpus(const std::string& jsonl, TaskKind kind,
                    std::optional<std::string> question_template) {
  std::vector<Example> examples;
  std::unordered_map<std::string, std::size_t> seen;
  std::istringstream in(jsonl);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw CorpusError(lineno, std::string("malformed JSON: ") + e.what());
    }
    Example ex = example_from_json(j, lineno);
    if (auto [it, fresh] = seen.emplace(ex.id, lineno); !fresh)
      throw CorpusError(lineno, "duplicate id '" + ex.id + "' (first seen on line " +
                                    std::to_string(it->second) + ")");
    examples.push_back(std::move(ex));
  }
  return Corpus(std::move(examples), kind, std::move(question_template));
}

Corpus load_corpus(const std::filesystem::path& path, TaskKind kind,
                   std::optional<std::string> question_template) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError(0, "cannot open corpus file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_corpus(buf.str(), kind, std::move(question_template));
}

std::string serialize_corpus(const Corpus& corpus) {
  std::string out;
  for (const auto& ex : corpus.examples()) {
    out += example_to_json(ex).dump();
    out += '\n';
  }
  return out;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError(0, "cannot write corpus file " + path.string());
  out << serialize_corpus(corpus);
}

Corpus subsample_corpus(const Corpus& corpus, double keep_fraction, std::uint64_t seed) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
    throw PreconditionError("keep_fraction must lie in (0, 1]");
  const std::size_t n = corpus.size();
  const auto keep = static_cast<std::size_t>(std::llround(keep_fraction * static_cast<double>(n)));
  if (keep == 0) throw PreconditionError("subsample would leave an empty corpus");

  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  // Partial Fisher-Yates: the first `keep` slots end up a uniform sample.
  for (std::size_t i = 0; i < keep; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.bounded(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());

  std::vector<Example> kept;
  kept.reserve(keep);
  for (auto i : idx) kept.push_back(corpus.examples()[i]);
  return Corpus(std::move(kept), corpus.task_kind(), corpus.question_template());
}

}  // namespace circles
