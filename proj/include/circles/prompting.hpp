#pragma once

#include <optional>
#include <string>
#include <vector>

#include "circles/corpus.hpp"
#include "circles/endpoint.hpp"
#include "circles/retrieval.hpp"

namespace circles {

enum class PromptMode { none, icl, circles, icl_plus_attr };

std::string to_string(PromptMode mode);

/// Demonstrations from one counterfactual retrieval, shown under a header
/// naming the intervened attribute and its caption.
struct CausalBlock {
  std::string attribute;
  std::string caption;
  RetrievalSet set;
};

struct DemonstrationContext {
  PromptMode mode = PromptMode::none;
  RetrievalSet corr_block;
  std::vector<CausalBlock> causal_blocks;  // attribute-importance order
  std::optional<std::vector<std::string>> options;
  // Within-block order: most similar first unless set.
  bool ascending = false;

  std::size_t demonstration_count() const;
};

/// Ordered text / image-reference segments making up one user turn.
struct PromptBundle {
  std::vector<ContentPart> parts;
  std::string task_type;

  // Images rendered as "<image:REF>"; pure function of the parts.
  std::string text() const;
  // Single user message carrying the parts.
  std::vector<ChatMessage> messages() const;
};

std::string task_type_name(TaskKind kind);

inline constexpr const char* kRestateQuestion = "Here is the original question again.";
inline constexpr const char* kAnswerInstruction = "Please provide your response by directly outputting the answer.";
inline constexpr const char* kOptionsSentence = "You need to choose one of the following options: ";

/// Renders the inference prompt for `ctx.mode`. Demonstrations are looked
/// up in `demos`; classification uses its question template and labels and
/// requires `ctx.options`.
PromptBundle assemble(const DemonstrationContext& ctx, const Example& query, const Corpus& demos);

/// The ICL prompt plus a one-line list of extracted attributes; no
/// counterfactual blocks. An empty list renders exactly like mode icl.
PromptBundle assemble_attr_only(const DemonstrationContext& ctx, const Example& query, const Corpus& demos,
                                const std::vector<std::string>& attributes);

/// User turn asking the VLM for the top `num_attributes` attributes.
PromptBundle attribute_extraction_prompt(const Example& query, std::size_t num_attributes);

/// Counterfactual-caption request: system prompt, query image and the
/// manipulation text for `attribute`.
std::vector<ChatMessage> caption_prompt(const Example& query, const std::string& attribute,
                                        const std::string& system_prompt);

extern const char* const kDefaultCaptionSystemPrompt;

/// Number of demonstrations in a rendered prompt text.
std::size_t count_demonstrations(const std::string& prompt_text);

}  // namespace circles
