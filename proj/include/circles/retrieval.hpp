#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "circles/embedding.hpp"
#include "json.hpp"

namespace circles {

enum class ProvenanceKind { corr, causal, random };

struct Provenance {
  ProvenanceKind kind = ProvenanceKind::corr;
  std::string attribute;  // causal only

  static Provenance corr() { return {ProvenanceKind::corr, {}}; }
  static Provenance random() { return {ProvenanceKind::random, {}}; }
  static Provenance causal(std::string attr) { return {ProvenanceKind::causal, std::move(attr)}; }
  std::string str() const;
  bool operator==(const Provenance&) const = default;
};

/// One ranked candidate. `score` is the sum of `components`, each component
/// already multiplied by its weight.
struct ScoredCandidate {
  std::string example_id;
  double score = 0.0;
  std::map<std::string, double> components;
};

/// Descending by score, ties by ascending id, no duplicate ids.
struct RetrievalSet {
  std::vector<ScoredCandidate> entries;
  Provenance provenance;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
  std::vector<std::string> ids() const;
};

// Total order used everywhere a ranking is produced.
inline bool ranks_before(double score_a, const std::string& id_a, double score_b, const std::string& id_b) {
  if (score_a != score_b) return score_a > score_b;
  return id_a < id_b;
}

/// Query-side vectors. `question` may be empty when not needed.
struct QueryVectors {
  std::span<const float> image;
  std::span<const float> question;
};

struct RetrievalOptions {
  // Candidate ids never returned (e.g. the query itself).
  std::unordered_set<std::string> exclude;
};

/// One similarity term: query vector against the candidate's `kind` vector.
struct ScoreTerm {
  std::string name;
  std::span<const float> query;
  EmbeddingKind candidate_kind;
  double weight = 1.0;
};

/// Exact ranking of every candidate holding a `terms[0].candidate_kind`
/// vector by the weighted sum of `terms`. If `restrict_to` is non-null only
/// those ids are considered.
RetrievalSet rank_by_terms(const EmbeddingStore& store, std::span<const ScoreTerm> terms, std::size_t k,
                           Provenance provenance, const RetrievalOptions& opts = {},
                           const std::unordered_set<std::string>* restrict_to = nullptr);

/// k highest dot products against the `kind` vectors (all of them if k
/// exceeds the store).
RetrievalSet top_k(std::span<const float> query_vec, const EmbeddingStore& store, EmbeddingKind kind,
                   std::size_t k, const RetrievalOptions& opts = {});

/// Image-image nearest neighbours.
RetrievalSet rices(const QueryVectors& query, const EmbeddingStore& store, std::size_t k,
                   const RetrievalOptions& opts = {});

struct MuierWeights {
  double img_img = 1.0;
  double img_txt = 1.0;
};

/// img_img + img_txt (query image against candidate question).
RetrievalSet muier(const QueryVectors& query, const EmbeddingStore& store, std::size_t k,
                   const RetrievalOptions& opts = {}, MuierWeights w = {});

inline constexpr std::size_t kDefaultMmicesPool = 1024;

/// Stage 1: top pool_size by img_img. Stage 2: re-rank that pool by the query
/// question against candidate images. pool_size is clamped to the store.
RetrievalSet mmices(const QueryVectors& query, const EmbeddingStore& store, std::size_t k,
                    std::size_t pool_size = kDefaultMmicesPool, const RetrievalOptions& opts = {});

/// Uniform sample without replacement; scores are zero so entries end up in
/// ascending id order.
RetrievalSet random_select(const std::vector<std::string>& candidate_ids, std::size_t k, std::uint64_t seed,
                           const RetrievalOptions& opts = {});

enum class ScorerVariant { img_img, img_img_plus_img_txt, img_img_plus_txt_txt };

std::string to_string(ScorerVariant v);
ScorerVariant scorer_variant_from_string(const std::string& s);

struct VariantWeights {
  double img_img = 1.0;
  double second = 1.0;
};

RetrievalSet scorer_variant(const QueryVectors& query, const EmbeddingStore& store, std::size_t k,
                            ScorerVariant variant, const RetrievalOptions& opts = {}, VariantWeights w = {});

nlohmann::json to_json(const RetrievalSet& set);

}  // namespace circles
