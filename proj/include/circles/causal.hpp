#pragma once

#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "circles/corpus.hpp"
#include "circles/embedding.hpp"
#include "circles/endpoint.hpp"
#include "circles/inference.hpp"
#include "circles/prompting.hpp"
#include "circles/retrieval.hpp"

namespace circles {

enum class AttributeSource { vlm, dataset };

std::string to_string(AttributeSource s);
AttributeSource attribute_source_from_string(const std::string& s);

/// Attribute phrases, most important first.
struct AttributeSet {
  std::vector<std::string> attributes;
  AttributeSource source = AttributeSource::vlm;
};

/// One atomic intervention do(attribute = alternative value). The
/// alternative value lives only inside the caption, chosen by the VLM.
struct AttributeIntervention {
  std::string attribute;
  std::string caption;
  std::vector<float> caption_vec;  // unit norm
};

/// Split of the demonstration budget between correlational and causal
/// retrieval.
struct BudgetConfig {
  std::size_t k_corr = 16;
  std::size_t k_causal = 16;
  std::size_t num_attributes = 1;
  std::size_t per_attribute_k = 16;

  std::size_t total() const { return k_corr + k_causal; }
  // Throws PreconditionError when the causal branch cannot fill k_causal.
  void validate() const;
};

inline constexpr std::size_t kDefaultBudget = 32;

/// k_causal = total - k_corr, per_attribute_k = ceil(k_causal / num_attributes).
BudgetConfig allocate_budget(std::size_t total, std::size_t num_attributes, std::size_t k_corr);

// ---------------------------------------------------------------------------
// Attribute identification and counterfactual captions

class AttributeExtractionFailed : public std::runtime_error {
 public:
  AttributeExtractionFailed(const std::string& what, Usage usage) : std::runtime_error(what), usage_(usage) {}
  const Usage& usage() const { return usage_; }

 private:
  Usage usage_;
};

class CaptionGenerationFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Lines under a "### Attributes" heading with list markers stripped, in
/// order, de-duplicated. Empty when the heading is absent or has no items.
std::vector<std::string> parse_attribute_section(const std::string& response);

/// Caption text from a caption-generation response: a labelled line such as
/// "Edited caption: ..." if present, otherwise the last non-empty line.
std::string parse_caption(const std::string& response);

struct ExtractionResult {
  AttributeSet attributes;
  Usage usage;
  std::string raw;
};

/// Asks the VLM for up to max_attrs attributes; retries once when the
/// section is missing, then throws AttributeExtractionFailed.
ExtractionResult extract_attributes(ChatEndpoint& vlm, const Example& query, std::size_t max_attrs,
                                    const GenerationConfig& cfg = {});

struct CaptionResult {
  AttributeIntervention intervention;
  Usage usage;
  std::string raw;
};

CaptionResult generate_cf_caption(ChatEndpoint& vlm, const Example& query, const std::string& attribute,
                                  TextEmbeddingCache& embedder, const GenerationConfig& cfg = {},
                                  const std::string& system_prompt = kDefaultCaptionSystemPrompt);

// ---------------------------------------------------------------------------
// Composed-retrieval scoring

/// img_caption (candidate image vs caption) + txt_txt (query question vs
/// candidate question).
ScoredCandidate cir_score(std::span<const float> caption_vec, std::span<const float> query_question_vec,
                          const std::string& candidate_id, const EmbeddingStore& store);

/// img_caption only.
ScoredCandidate cir_score_no_text(std::span<const float> caption_vec, const std::string& candidate_id,
                                  const EmbeddingStore& store);

/// Top-k by cir_score (or cir_score_no_text when use_text is false).
RetrievalSet retrieve_counterfactual(const AttributeIntervention& intervention, const QueryVectors& query,
                                     const EmbeddingStore& store, std::size_t k, bool use_text = true,
                                     const RetrievalOptions& opts = {});

/// Per-attribute counterfactual retrievals merged into one pool of at most
/// k_causal ids. Each attribute contributes per_attribute_k; an id retrieved
/// by several attributes stays with its highest-scoring occurrence and the
/// attributes that lost it backfill from their next-ranked candidates.
/// Overflow from ceiling division is trimmed from the least important
/// attributes. Ids in opts.exclude never enter the pool.
std::vector<CausalBlock> build_causal_pool(const std::vector<AttributeIntervention>& interventions,
                                           const QueryVectors& query, const EmbeddingStore& store,
                                           const BudgetConfig& budget, bool use_text = true,
                                           const RetrievalOptions& opts = {});

/// All causal blocks flattened, descending by score.
RetrievalSet flatten(const std::vector<CausalBlock>& blocks);

// ---------------------------------------------------------------------------
// Dataset-provided attributes

/// class -> attribute -> frequency in [0, 1].
using FrequencyTable = std::map<std::string, std::map<std::string, double>>;

/// Discriminativeness = in-class frequency minus the highest frequency in
/// any other class. Sorted descending (ties by name), then pruned to
/// attributes present in `image_annotations`.
AttributeSet rank_dataset_attributes(const FrequencyTable& table, const std::string& class_label,
                                     const std::set<std::string>& image_annotations,
                                     std::size_t max_attrs = 0);

/// Attribute presence per class over a corpus with annotations. Values
/// "0", "false", "no" and "absent" mean not present.
FrequencyTable frequency_table(const Corpus& corpus);
std::set<std::string> present_attributes(const Example& ex);

}  // namespace circles
