#include "circles/prompting.hpp"

#include <algorithm>

#include "circles/common.hpp"

namespace circles {

const char* const kDefaultCaptionSystemPrompt =
    "You are an image caption editor. Look at the reference image and think about its content "
    "step by step: the main subject, its attributes and the scene. Then apply the manipulation "
    "text to that description, changing only what the manipulation asks for and keeping every "
    "other attribute unchanged. Reply with the edited caption on the final line.";

std::string to_string(PromptMode mode) {
  switch (mode) {
    case PromptMode::none: return "none";
    case PromptMode::icl: return "icl";
    case PromptMode::circles: return "circles";
    case PromptMode::icl_plus_attr: return "icl_plus_attr";
  }
  return "unknown";
}

std::string task_type_name(TaskKind kind) {
  return kind == TaskKind::classification ? "Image Classification" : "Visual Question Answering";
}

std::size_t DemonstrationContext::demonstration_count() const {
  std::size_t n = corr_block.size();
  for (const auto& b : causal_blocks) n += b.set.size();
  return n;
}

std::string PromptBundle::text() const {
  std::string out;
  for (const auto& p : parts) {
    if (p.type == ContentPart::Type::text)
      out += p.value;
    else
      out += "<image:" + p.value + ">";
  }
  return out;
}

std::vector<ChatMessage> PromptBundle::messages() const { return {ChatMessage{"user", parts}}; }

namespace {

// Accumulates parts, merging adjacent text.
class Builder {
 public:
  Builder& text(const std::string& s) {
    if (s.empty()) return *this;
    if (!parts_.empty() && parts_.back().type == ContentPart::Type::text)
      parts_.back().value += s;
    else
      parts_.push_back(ContentPart::text(s));
    return *this;
  }
  Builder& image(const std::string& ref) {
    parts_.push_back(ContentPart::image(ref));
    return *this;
  }
  std::vector<ContentPart> take() { return std::move(parts_); }

 private:
  std::vector<ContentPart> parts_;
};

std::string join(const std::vector<std::string>& items, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

void add_demonstrations(Builder& b, const RetrievalSet& set, const Corpus& demos, bool ascending) {
  std::vector<const ScoredCandidate*> order;
  for (const auto& e : set.entries) order.push_back(&e);
  if (ascending) std::reverse(order.begin(), order.end());
  for (const auto* e : order) {
    const Example* ex = demos.find(e->example_id);
    if (!ex) throw PreconditionError("retrieved id '" + e->example_id + "' is missing from the corpus");
    const std::string& q = demos.task_kind() == TaskKind::classification && demos.question_template()
                               ? *demos.question_template()
                               : ex->question;
    b.image(ex->image_ref).text("\nQuestion: " + q + "\nAnswer: " + ex->label() + "\n\n");
  }
}

void add_header(Builder& b, const DemonstrationContext& ctx, const Example& query, TaskKind kind) {
  std::string first = "Your task is to perform " + task_type_name(kind) + ".";
  if (kind == TaskKind::classification) {
    if (!ctx.options || ctx.options->empty())
      throw PreconditionError("classification prompts require answer options");
    first += " ";
    first += kOptionsSentence + join(*ctx.options, ", ");
  }
  b.text(first + "\n\n").image(query.image_ref).text("\nQuestion: " + query.question + "\n\n");
}

void add_footer(Builder& b, const Example& query) {
  b.text(std::string(kRestateQuestion) + "\n")
      .image(query.image_ref)
      .text("\nQuestion: " + query.question + "\n\n" + kAnswerInstruction);
}

void add_icl_section(Builder& b, const DemonstrationContext& ctx, const Corpus& demos) {
  b.text("Here are " + std::to_string(ctx.corr_block.size()) +
         " in-context examples to help you answer the question:\n\n");
  add_demonstrations(b, ctx.corr_block, demos, ctx.ascending);
}

PromptBundle render(const DemonstrationContext& ctx, const Example& query, const Corpus& demos,
                    const std::vector<std::string>* attributes) {
  const TaskKind kind = demos.task_kind();
  Builder b;
  add_header(b, ctx, query, kind);

  switch (ctx.mode) {
    case PromptMode::none:
      if (!ctx.corr_block.empty() || !ctx.causal_blocks.empty())
        throw PreconditionError("mode none takes no demonstrations");
      b.text(kAnswerInstruction);
      return {b.take(), task_type_name(kind)};
    case PromptMode::icl:
    case PromptMode::icl_plus_attr:
      add_icl_section(b, ctx, demos);
      break;
    case PromptMode::circles:
      // With no correlational demonstrations (CIR-only) the counting header
      // would read "Here are 0 ..." so it is left out.
      if (!ctx.corr_block.empty() || ctx.causal_blocks.empty()) add_icl_section(b, ctx, demos);
      for (const auto& block : ctx.causal_blocks) {
        b.text("Examples retrieved based on the target image description after changing " + block.attribute +
               " (caption: " + block.caption + "):\n\n");
        add_demonstrations(b, block.set, demos, ctx.ascending);
      }
      break;
  }
  if (attributes && !attributes->empty())
    b.text("Key attributes for answering the question: " + join(*attributes, ", ") + "\n\n");
  add_footer(b, query);
  return {b.take(), task_type_name(kind)};
}

}  // namespace

PromptBundle assemble(const DemonstrationContext& ctx, const Example& query, const Corpus& demos) {
  if (ctx.mode == PromptMode::icl_plus_attr)
    throw PreconditionError("use assemble_attr_only for mode icl_plus_attr");
  return render(ctx, query, demos, nullptr);
}

PromptBundle assemble_attr_only(const DemonstrationContext& ctx, const Example& query, const Corpus& demos,
                                const std::vector<std::string>& attributes) {
  if (!ctx.causal_blocks.empty()) throw PreconditionError("attribute-only prompts take no causal blocks");
  DemonstrationContext icl = ctx;
  icl.mode = PromptMode::icl_plus_attr;
  return render(icl, query, demos, &attributes);
}

PromptBundle attribute_extraction_prompt(const Example& query, std::size_t num_attributes) {
  Builder b;
  b.text(
       "Identify the key attributes of the following image that are most relevant to answering the "
       "question.\n\n")
      .image(query.image_ref)
      .text("\nQuestion: " + query.question + "\n\nPlease list the top " + std::to_string(num_attributes) +
            " key attributes as short phrases in a section named '### Attributes', one per line, ordered "
            "from most to least important.");
  return {b.take(), ""};
}

std::vector<ChatMessage> caption_prompt(const Example& query, const std::string& attribute,
                                        const std::string& system_prompt) {
  Builder b;
  b.image(query.image_ref)
      .text("\n\nManipulation Text: Change the attribute " + attribute +
            " to a different plausible value. Ensure the modified caption is concise and contains no more "
            "than 77 tokens.");
  return {ChatMessage{"system", {ContentPart::text(system_prompt)}}, ChatMessage{"user", b.take()}};
}

std::size_t count_demonstrations(const std::string& prompt_text) {
  std::size_t n = 0;
  for (std::size_t pos = prompt_text.find("\nAnswer: "); pos != std::string::npos;
       pos = prompt_text.find("\nAnswer: ", pos + 1))
    ++n;
  return n;
}

}  // namespace circles
