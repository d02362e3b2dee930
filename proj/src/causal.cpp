#include "circles/causal.hpp"

#include <algorithm>
#include <cctype>
#include <unordered_map>
#include <unordered_set>

#include "circles/common.hpp"

namespace circles {

std::string to_string(AttributeSource s) { return s == AttributeSource::vlm ? "vlm" : "dataset"; }

AttributeSource attribute_source_from_string(const std::string& s) {
  if (s == "vlm") return AttributeSource::vlm;
  if (s == "dataset") return AttributeSource::dataset;
  throw PreconditionError("unknown attribute source '" + s + "' (expected vlm|dataset)");
}

void BudgetConfig::validate() const {
  if (k_causal == 0) return;
  if (num_attributes == 0) throw PreconditionError("num_attributes must be positive");
  if (per_attribute_k == 0) throw PreconditionError("per_attribute_k must be positive");
  if (num_attributes * per_attribute_k < k_causal)
    throw PreconditionError("num_attributes x per_attribute_k (" + std::to_string(num_attributes * per_attribute_k) +
                            ") cannot fill k_causal=" + std::to_string(k_causal));
}

BudgetConfig allocate_budget(std::size_t total, std::size_t num_attributes, std::size_t k_corr) {
  if (total == 0) throw PreconditionError("budget must be positive");
  if (num_attributes == 0) throw PreconditionError("num_attributes must be positive");
  if (k_corr > total)
    throw PreconditionError("k_corr=" + std::to_string(k_corr) + " exceeds total budget " + std::to_string(total));
  BudgetConfig b;
  b.k_corr = k_corr;
  b.k_causal = total - k_corr;
  b.num_attributes = num_attributes;
  b.per_attribute_k = std::max<std::size_t>(1, (b.k_causal + num_attributes - 1) / num_attributes);
  return b;
}

// ---------------------------------------------------------------------------

namespace {

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool is_attribute_heading(const std::string& line) {
  std::string t = line;
  t.erase(std::remove(t.begin(), t.end(), '*'), t.end());
  t = lower(trim(t));
  if (t.rfind("###", 0) != 0) return false;
  t = trim(t.substr(3));
  if (!t.empty() && t.back() == ':') t.pop_back();
  return trim(t) == "attributes";
}

std::string strip_list_marker(std::string s) {
  s = trim(s);
  // Bullets.
  for (const char* b : {"- ", "* ", "+ ", "\xE2\x80\xA2 "}) {
    const std::string bullet(b);
    if (s.rfind(bullet, 0) == 0) {
      s = trim(s.substr(bullet.size()));
      break;
    }
  }
  if (s == "-" || s == "*" || s == "+") return {};
  // "1." "2)" "(3)"
  std::size_t i = 0;
  const bool paren = !s.empty() && s[0] == '(';
  if (paren) ++i;
  const std::size_t digits_begin = i;
  while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
  if (i > digits_begin && i < s.size() && (s[i] == '.' || s[i] == ')') && (i + 1 == s.size() || s[i + 1] == ' '))
    s = trim(s.substr(i + 1));
  // Markdown emphasis around the whole phrase.
  while (s.size() >= 4 && s.rfind("**", 0) == 0 && s.substr(s.size() - 2) == "**") s = trim(s.substr(2, s.size() - 4));
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '`' && s.back() == '`')))
    s = trim(s.substr(1, s.size() - 2));
  // "breast color: red" keeps the attribute name.
  if (auto colon = s.find(':'); colon != std::string::npos && colon > 0) s = trim(s.substr(0, colon));
  while (!s.empty() && (s.back() == '.' || s.back() == ',' || s.back() == ';')) s.pop_back();
  return trim(s);
}

}  // namespace

std::vector<std::string> parse_attribute_section(const std::string& response) {
  const auto lines = split_lines(response);
  std::size_t i = 0;
  while (i < lines.size() && !is_attribute_heading(lines[i])) ++i;
  if (i == lines.size()) return {};

  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (++i; i < lines.size(); ++i) {
    const std::string t = trim(lines[i]);
    if (t.empty()) continue;
    if (t[0] == '#') break;
    std::string item = strip_list_marker(t);
    if (item.empty()) continue;
    if (seen.insert(lower(item)).second) out.push_back(std::move(item));
  }
  return out;
}

std::string parse_caption(const std::string& response) {
  const auto lines = split_lines(response);
  std::string chosen;
  for (const auto& raw : lines) {
    std::string t = trim(raw);
    t.erase(std::remove(t.begin(), t.end(), '*'), t.end());
    const std::string l = lower(t);
    for (const char* label : {"edited caption:", "modified caption:", "new caption:", "caption:"}) {
      const std::string lab(label);
      if (l.rfind(lab, 0) == 0) {
        chosen = trim(t.substr(lab.size()));
        break;
      }
    }
  }
  if (chosen.empty()) {
    for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
      chosen = trim(*it);
      if (!chosen.empty()) break;
    }
  }
  if (chosen.size() >= 2 && chosen.front() == '"' && chosen.back() == '"') chosen = trim(chosen.substr(1, chosen.size() - 2));
  return chosen;
}

ExtractionResult extract_attributes(ChatEndpoint& vlm, const Example& query, std::size_t max_attrs,
                                    const GenerationConfig& cfg) {
  if (max_attrs == 0) throw PreconditionError("max_attrs must be positive");
  const auto prompt = attribute_extraction_prompt(query, max_attrs);
  ExtractionResult result;
  for (int attempt = 0; attempt < 2; ++attempt) {
    ChatResponse resp = call(vlm, prompt.messages(), cfg);
    result.usage += resp.usage;
    result.raw = std::move(resp.text);
    auto attrs = parse_attribute_section(result.raw);
    if (!attrs.empty()) {
      if (attrs.size() > max_attrs) attrs.resize(max_attrs);
      result.attributes = {std::move(attrs), AttributeSource::vlm};
      return result;
    }
  }
  throw AttributeExtractionFailed("no '### Attributes' section for query '" + query.id + "'", result.usage);
}

CaptionResult generate_cf_caption(ChatEndpoint& vlm, const Example& query, const std::string& attribute,
                                  TextEmbeddingCache& embedder, const GenerationConfig& cfg,
                                  const std::string& system_prompt) {
  ChatResponse resp = call(vlm, caption_prompt(query, attribute, system_prompt), cfg);
  CaptionResult result;
  result.usage = resp.usage;
  result.raw = resp.text;
  std::string caption = parse_caption(resp.text);
  if (caption.empty())
    throw CaptionGenerationFailed("empty caption for query '" + query.id + "', attribute '" + attribute + "'");
  result.intervention.attribute = attribute;
  result.intervention.caption_vec = embedder.embed(caption);
  result.intervention.caption = std::move(caption);
  return result;
}

// ---------------------------------------------------------------------------

ScoredCandidate cir_score(std::span<const float> caption_vec, std::span<const float> query_question_vec,
                          const std::string& candidate_id, const EmbeddingStore& store) {
  ScoredCandidate c{candidate_id, 0.0, {}};
  const double img = dot(store.at(candidate_id, EmbeddingKind::image), caption_vec);
  const double txt = dot(query_question_vec, store.at(candidate_id, EmbeddingKind::question));
  c.components["img_caption"] = img;
  c.components["txt_txt"] = txt;
  c.score = img + txt;
  return c;
}

ScoredCandidate cir_score_no_text(std::span<const float> caption_vec, const std::string& candidate_id,
                                  const EmbeddingStore& store) {
  ScoredCandidate c{candidate_id, 0.0, {}};
  c.score = dot(store.at(candidate_id, EmbeddingKind::image), caption_vec);
  c.components["img_caption"] = c.score;
  return c;
}

RetrievalSet retrieve_counterfactual(const AttributeIntervention& intervention, const QueryVectors& query,
                                     const EmbeddingStore& store, std::size_t k, bool use_text,
                                     const RetrievalOptions& opts) {
  if (intervention.caption_vec.empty()) throw PreconditionError("intervention has no caption embedding");
  std::vector<ScoreTerm> terms{{"img_caption", intervention.caption_vec, EmbeddingKind::image, 1.0}};
  if (use_text) {
    if (query.question.empty()) throw MissingEmbedding("query question embedding unavailable");
    terms.push_back({"txt_txt", query.question, EmbeddingKind::question, 1.0});
  }
  return rank_by_terms(store, terms, k, Provenance::causal(intervention.attribute), opts);
}

std::vector<CausalBlock> build_causal_pool(const std::vector<AttributeIntervention>& interventions,
                                           const QueryVectors& query, const EmbeddingStore& store,
                                           const BudgetConfig& budget, bool use_text, const RetrievalOptions& opts) {
  budget.validate();
  if (budget.k_causal == 0 || interventions.empty()) return {};
  const std::size_t n_attr = interventions.size();
  const std::size_t universe = store.count(EmbeddingKind::image);
  const std::size_t per_k = budget.per_attribute_k;

  std::vector<RetrievalSet> ranked;
  ranked.reserve(n_attr);
  for (const auto& iv : interventions)
    ranked.push_back(retrieve_counterfactual(iv, query, store, std::max<std::size_t>(universe, 1), use_text, opts));

  // Positions (into ranked[a]) currently selected for each attribute.
  std::vector<std::vector<std::size_t>> picked(n_attr);
  for (std::size_t a = 0; a < n_attr; ++a)
    for (std::size_t r = 0; r < std::min(per_k, ranked[a].size()); ++r) picked[a].push_back(r);

  // Duplicates keep their best-scoring occurrence; ties favour the more
  // important attribute.
  struct Owner {
    std::size_t attr;
    double score;
  };
  std::unordered_map<std::string, Owner> owner;
  for (std::size_t a = 0; a < n_attr; ++a)
    for (auto r : picked[a]) {
      const auto& e = ranked[a].entries[r];
      auto [it, fresh] = owner.try_emplace(e.example_id, Owner{a, e.score});
      if (!fresh && e.score > it->second.score) it->second = {a, e.score};
    }
  std::vector<std::size_t> lost(n_attr, 0);
  for (std::size_t a = 0; a < n_attr; ++a) {
    std::vector<std::size_t> kept;
    for (auto r : picked[a]) {
      if (owner.at(ranked[a].entries[r].example_id).attr == a)
        kept.push_back(r);
      else
        ++lost[a];
    }
    picked[a] = std::move(kept);
  }

  std::unordered_set<std::string> selected;
  for (const auto& [id, o] : owner) selected.insert(id);
  for (std::size_t a = 0; a < n_attr; ++a) {
    for (std::size_t r = per_k; lost[a] > 0 && r < ranked[a].size(); ++r) {
      const auto& id = ranked[a].entries[r].example_id;
      if (selected.count(id)) continue;
      selected.insert(id);
      picked[a].push_back(r);
      --lost[a];
    }
  }

  std::vector<CausalBlock> blocks;
  std::size_t room = budget.k_causal;
  for (std::size_t a = 0; a < n_attr && room > 0; ++a) {
    std::sort(picked[a].begin(), picked[a].end());
    CausalBlock block;
    block.attribute = interventions[a].attribute;
    block.caption = interventions[a].caption;
    block.set.provenance = Provenance::causal(interventions[a].attribute);
    for (auto r : picked[a]) {
      if (room == 0) break;
      block.set.entries.push_back(ranked[a].entries[r]);
      --room;
    }
    if (!block.set.empty()) blocks.push_back(std::move(block));
  }
  return blocks;
}

RetrievalSet flatten(const std::vector<CausalBlock>& blocks) {
  RetrievalSet out;
  out.provenance = Provenance::causal("");
  for (const auto& b : blocks)
    for (const auto& e : b.set.entries) out.entries.push_back(e);
  std::sort(out.entries.begin(), out.entries.end(), [](const ScoredCandidate& a, const ScoredCandidate& b) {
    return ranks_before(a.score, a.example_id, b.score, b.example_id);
  });
  return out;
}

// ---------------------------------------------------------------------------

AttributeSet rank_dataset_attributes(const FrequencyTable& table, const std::string& class_label,
                                     const std::set<std::string>& image_annotations, std::size_t max_attrs) {
  auto cls = table.find(class_label);
  if (cls == table.end()) throw PreconditionError("unknown class '" + class_label + "'");

  std::vector<std::pair<double, std::string>> scored;
  for (const auto& [attr, freq] : cls->second) {
    if (freq < 0.0 || freq > 1.0) throw PreconditionError("frequency outside [0,1] for '" + attr + "'");
    double other = 0.0;
    for (const auto& [name, row] : table) {
      if (name == class_label) continue;
      if (auto it = row.find(attr); it != row.end()) other = std::max(other, it->second);
    }
    scored.emplace_back(freq - other, attr);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });

  AttributeSet out;
  out.source = AttributeSource::dataset;
  for (const auto& [gap, attr] : scored) {
    if (!image_annotations.count(attr)) continue;
    out.attributes.push_back(attr);
    if (max_attrs && out.attributes.size() == max_attrs) break;
  }
  return out;
}

std::set<std::string> present_attributes(const Example& ex) {
  std::set<std::string> out;
  if (!ex.attributes) return out;
  for (const auto& [name, value] : *ex.attributes) {
    const std::string v = lower(trim(value));
    if (v == "0" || v == "false" || v == "no" || v == "absent") continue;
    out.insert(name);
  }
  return out;
}

FrequencyTable frequency_table(const Corpus& corpus) {
  std::map<std::string, std::size_t> class_size;
  std::map<std::string, std::map<std::string, std::size_t>> counts;
  std::set<std::string> all_attrs;
  for (const auto& ex : corpus.examples()) {
    ++class_size[ex.label()];
    auto& row = counts[ex.label()];
    for (const auto& a : present_attributes(ex)) {
      ++row[a];
      all_attrs.insert(a);
    }
  }
  FrequencyTable table;
  for (const auto& [cls, n] : class_size) {
    auto& row = table[cls];
    for (const auto& a : all_attrs) {
      auto it = counts[cls].find(a);
      row[a] = it == counts[cls].end() ? 0.0 : static_cast<double>(it->second) / static_cast<double>(n);
    }
  }
  return table;
}

}  // namespace circles
