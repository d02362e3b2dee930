#include "circles/retrieval.hpp"

#include <algorithm>
#include <numeric>

#include "circles/common.hpp"

namespace circles {

std::string Provenance::str() const {
  switch (kind) {
    case ProvenanceKind::corr: return "corr";
    case ProvenanceKind::random: return "random";
    case ProvenanceKind::causal: return "causal(" + attribute + ")";
  }
  return "unknown";
}

std::vector<std::string> RetrievalSet::ids() const {
  std::vector<std::string> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.example_id);
  return out;
}

RetrievalSet rank_by_terms(const EmbeddingStore& store, std::span<const ScoreTerm> terms, std::size_t k,
                           Provenance provenance, const RetrievalOptions& opts,
                           const std::unordered_set<std::string>* restrict_to) {
  if (k == 0) throw PreconditionError("k must be at least 1");
  if (terms.empty()) throw PreconditionError("no score terms");
  for (const auto& t : terms) {
    if (t.query.empty()) throw MissingEmbedding("query vector for term '" + t.name + "' unavailable");
    if (t.query.size() != store.dim())
      throw PreconditionError("query dimension " + std::to_string(t.query.size()) + " != store dimension " +
                              std::to_string(store.dim()));
  }
  const EmbeddingKind universe = terms[0].candidate_kind;
  if (store.count(universe) == 0) throw MissingEmbedding("store has no " + to_string(universe) + " embeddings");

  const auto& ids = store.ids(universe);
  std::vector<std::size_t> cand;
  cand.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (opts.exclude.count(ids[i])) continue;
    if (restrict_to && !restrict_to->count(ids[i])) continue;
    cand.push_back(i);
  }

  // One pass per term keeps the summation order fixed: term 0 + term 1 + ...
  std::vector<double> score(ids.size(), 0.0);
  std::vector<std::vector<double>> parts(terms.size(), std::vector<double>(ids.size(), 0.0));
  for (std::size_t t = 0; t < terms.size(); ++t) {
    for (auto i : cand) {
      std::span<const float> v = terms[t].candidate_kind == universe ? store.row(universe, i)
                                                                      : store.at(ids[i], terms[t].candidate_kind);
      parts[t][i] = terms[t].weight * dot(terms[t].query, v);
      score[i] += parts[t][i];
    }
  }

  const std::size_t take = std::min(k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(),
                    [&](std::size_t a, std::size_t b) { return ranks_before(score[a], ids[a], score[b], ids[b]); });

  RetrievalSet out;
  out.provenance = std::move(provenance);
  out.entries.reserve(take);
  for (std::size_t r = 0; r < take; ++r) {
    const auto i = cand[r];
    ScoredCandidate c{ids[i], score[i], {}};
    for (std::size_t t = 0; t < terms.size(); ++t) c.components[terms[t].name] = parts[t][i];
    out.entries.push_back(std::move(c));
  }
  return out;
}

RetrievalSet top_k(std::span<const float> query_vec, const EmbeddingStore& store, EmbeddingKind kind,
                   std::size_t k, const RetrievalOptions& opts) {
  const ScoreTerm term{"sim", query_vec, kind, 1.0};
  return rank_by_terms(store, std::span(&term, 1), k, Provenance::corr(), opts);
}

RetrievalSet rices(const QueryVectors& query, const EmbeddingStore& store, std::size_t k,
                   const RetrievalOptions& opts) {
  if (query.image.empty()) throw MissingEmbedding("query image embedding unavailable");
  const ScoreTerm term{"img_img", query.image, EmbeddingKind::image, 1.0};
  return rank_by_terms(store, std::span(&term, 1), k, Provenance::corr(), opts);
}

RetrievalSet muier(const QueryVectors& query, const EmbeddingStore& store, std::size_t k,
                   const RetrievalOptions& opts, MuierWeights w) {
  const ScoreTerm terms[] = {{"img_img", query.image, EmbeddingKind::image, w.img_img},
                             {"img_txt", query.image, EmbeddingKind::question, w.img_txt}};
  return rank_by_terms(store, terms, k, Provenance::corr(), opts);
}

RetrievalSet mmices(const QueryVectors& query, const EmbeddingStore& store, std::size_t k, std::size_t pool_size,
                    const RetrievalOptions& opts) {
  if (pool_size < k) throw PreconditionError("mmices: pool_size must be >= k");
  if (query.question.empty()) throw MissingEmbedding("query question embedding unavailable");
  const std::size_t pool = std::min(pool_size, store.count(EmbeddingKind::image));
  auto stage1 = rices(query, store, std::max<std::size_t>(pool, 1), opts);
  std::unordered_set<std::string> pool_ids;
  for (const auto& e : stage1.entries) pool_ids.insert(e.example_id);
  const ScoreTerm term{"txt_img", query.question, EmbeddingKind::image, 1.0};
  return rank_by_terms(store, std::span(&term, 1), k, Provenance::corr(), opts, &pool_ids);
}

RetrievalSet random_select(const std::vector<std::string>& candidate_ids, std::size_t k, std::uint64_t seed,
                           const RetrievalOptions& opts) {
  std::vector<std::string> pool;
  pool.reserve(candidate_ids.size());
  for (const auto& id : candidate_ids)
    if (!opts.exclude.count(id)) pool.push_back(id);
  if (k > pool.size())
    throw PreconditionError("random_select: k=" + std::to_string(k) + " exceeds " + std::to_string(pool.size()) +
                            " candidates");
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.bounded(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());

  RetrievalSet out;
  out.provenance = Provenance::random();
  for (auto& id : pool) out.entries.push_back({std::move(id), 0.0, {}});
  return out;
}

std::string to_string(ScorerVariant v) {
  switch (v) {
    case ScorerVariant::img_img: return "img_img";
    case ScorerVariant::img_img_plus_img_txt: return "img_img+img_txt";
    case ScorerVariant::img_img_plus_txt_txt: return "img_img+txt_txt";
  }
  return "unknown";
}

ScorerVariant scorer_variant_from_string(const std::string& s) {
  if (s == "img_img") return ScorerVariant::img_img;
  if (s == "img_img+img_txt") return ScorerVariant::img_img_plus_img_txt;
  if (s == "img_img+txt_txt") return ScorerVariant::img_img_plus_txt_txt;
  throw PreconditionError("unknown scorer variant '" + s + "' (expected img_img|img_img+img_txt|img_img+txt_txt)");
}

RetrievalSet scorer_variant(const QueryVectors& query, const EmbeddingStore& store, std::size_t k,
                            ScorerVariant variant, const RetrievalOptions& opts, VariantWeights w) {
  switch (variant) {
    case ScorerVariant::img_img: {
      const ScoreTerm term{"img_img", query.image, EmbeddingKind::image, w.img_img};
      return rank_by_terms(store, std::span(&term, 1), k, Provenance::corr(), opts);
    }
    case ScorerVariant::img_img_plus_img_txt:
      return muier(query, store, k, opts, {w.img_img, w.second});
    case ScorerVariant::img_img_plus_txt_txt: {
      const ScoreTerm terms[] = {{"img_img", query.image, EmbeddingKind::image, w.img_img},
                                 {"txt_txt", query.question, EmbeddingKind::question, w.second}};
      return rank_by_terms(store, terms, k, Provenance::corr(), opts);
    }
  }
  throw PreconditionError("unknown scorer variant");
}

nlohmann::json to_json(const RetrievalSet& set) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : set.entries)
    entries.push_back({{"id", e.example_id}, {"score", e.score}, {"components", e.components}});
  return {{"provenance", set.provenance.str()}, {"entries", std::move(entries)}};
}

}  // namespace circles
