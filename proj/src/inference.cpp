#include "circles/inference.hpp"

#include <map>

#include "circles/common.hpp"
#include "circles/metrics.hpp"

namespace circles {

std::string extract_answer(const std::string& raw) {
  const auto lines = split_lines(raw);
  for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
    auto t = trim(*it);
    if (!t.empty()) return t;
  }
  return {};
}

std::pair<std::size_t, bool> majority_vote(const std::vector<std::string>& votes) {
  if (votes.empty()) throw PreconditionError("majority_vote: no votes");
  std::map<std::string, std::pair<std::size_t, std::size_t>> tally;  // key -> {count, first index}
  for (std::size_t i = 0; i < votes.size(); ++i) {
    auto [it, fresh] = tally.try_emplace(normalize_answer(votes[i]), 0, i);
    ++it->second.first;
  }
  std::size_t best_count = 0, best_first = votes.size(), at_best = 0;
  for (const auto& [key, cf] : tally) {
    const auto [count, first] = cf;
    if (count > best_count || (count == best_count && first < best_first)) {
      best_count = count;
      best_first = first;
    }
  }
  for (const auto& [key, cf] : tally)
    if (cf.first == best_count) ++at_best;
  return {best_first, at_best > 1};
}

ChatResponse call(ChatEndpoint& vlm, std::vector<ChatMessage> messages, const GenerationConfig& cfg) {
  ChatRequest req;
  req.model = cfg.model;
  req.messages = std::move(messages);
  req.temperature = cfg.temperature;
  req.max_tokens = cfg.max_tokens;
  return vlm.complete(req);
}

InferenceResult generate(ChatEndpoint& vlm, const PromptBundle& bundle, const GenerationConfig& cfg) {
  if (cfg.num_generations == 0) throw PreconditionError("num_generations must be positive");
  InferenceResult result;
  std::vector<std::string> raws;
  for (std::size_t g = 0; g < cfg.num_generations; ++g) {
    ChatResponse resp = call(vlm, bundle.messages(), cfg);
    result.usage += resp.usage;
    if (resp.finish_reason == "length" || resp.usage.completion_tokens >= cfg.max_tokens) result.truncated = true;
    result.votes.push_back(extract_answer(resp.text));
    raws.push_back(std::move(resp.text));
  }
  auto [winner, tie] = majority_vote(result.votes);
  result.answer = result.votes[winner];
  result.raw_text = raws[winner];
  result.tie = tie;
  if (cfg.num_generations == 1) result.votes.clear();
  return result;
}

UsageReport account_tokens(const std::vector<Usage>& per_query) {
  UsageReport r;
  r.queries = per_query.size();
  for (const auto& u : per_query) r.total += u;
  if (r.queries == 0) return r;
  const double n = static_cast<double>(r.queries);
  r.mean_prompt_tokens = static_cast<double>(r.total.prompt_tokens) / n;
  r.mean_completion_tokens = static_cast<double>(r.total.completion_tokens) / n;
  r.mean_total_tokens = static_cast<double>(r.total.total()) / n;
  r.mean_calls = static_cast<double>(r.total.calls) / n;
  return r;
}

UsageReport account_tokens(const std::vector<InferenceResult>& results) {
  std::vector<Usage> usage;
  usage.reserve(results.size());
  for (const auto& r : results) usage.push_back(r.usage);
  return account_tokens(usage);
}

}  // namespace circles
