#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "circles/endpoint.hpp"
#include "circles/prompting.hpp"

namespace circles {

struct GenerationConfig {
  double temperature = 0.0;
  std::size_t max_tokens = 512;
  std::size_t num_generations = 1;
  std::string model;
};

struct InferenceResult {
  std::string answer;
  std::string raw_text;
  Usage usage;
  std::vector<std::string> votes;  // one per generation when num_generations > 1
  bool tie = false;
  bool truncated = false;
};

/// Trimmed response; the last non-empty line when the model rambles.
std::string extract_answer(const std::string& raw);

/// Majority answer; ties go to the answer seen first. Votes are compared
/// after normalize_answer. Returns {index of the winning vote, tie flag}.
std::pair<std::size_t, bool> majority_vote(const std::vector<std::string>& votes);

/// One call per generation; with more than one generation the answer is the
/// self-consistency majority.
InferenceResult generate(ChatEndpoint& vlm, const PromptBundle& bundle, const GenerationConfig& cfg);

/// Sends arbitrary messages with the generation settings (no voting).
ChatResponse call(ChatEndpoint& vlm, std::vector<ChatMessage> messages, const GenerationConfig& cfg);

struct UsageReport {
  std::size_t queries = 0;
  double mean_prompt_tokens = 0.0;
  double mean_completion_tokens = 0.0;
  double mean_total_tokens = 0.0;
  double mean_calls = 0.0;
  Usage total;
};

UsageReport account_tokens(const std::vector<Usage>& per_query);
UsageReport account_tokens(const std::vector<InferenceResult>& results);

}  // namespace circles
