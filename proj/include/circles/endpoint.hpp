#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <string>
#include <vector>

#include "circles/common.hpp"
#include "circles/embedding.hpp"
#include "json.hpp"

namespace circles {

// ---------------------------------------------------------------------------
// Chat-completions wire types

struct ContentPart {
  enum class Type { text, image };
  Type type = Type::text;
  std::string value;  // text, or image reference

  static ContentPart text(std::string s) { return {Type::text, std::move(s)}; }
  static ContentPart image(std::string ref) { return {Type::image, std::move(ref)}; }
  bool operator==(const ContentPart&) const = default;
};

struct ChatMessage {
  std::string role;
  std::vector<ContentPart> content;
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  std::size_t max_tokens = 512;
};

struct Usage {
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  std::uint64_t calls = 0;

  std::uint64_t total() const { return prompt_tokens + completion_tokens; }
  Usage& operator+=(const Usage& o) {
    prompt_tokens += o.prompt_tokens;
    completion_tokens += o.completion_tokens;
    calls += o.calls;
    return *this;
  }
  bool operator==(const Usage&) const = default;
};

struct ChatResponse {
  std::string text;
  Usage usage;  // calls == 1 for a single endpoint response
  std::string finish_reason = "stop";
};

/// The generating VLM. Implementations must be thread-safe.
class ChatEndpoint {
 public:
  virtual ~ChatEndpoint() = default;
  virtual ChatResponse complete(const ChatRequest& request) = 0;
  virtual std::string identifier() const = 0;
};

nlohmann::json to_json(const ChatRequest& req);
ChatRequest chat_request_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ChatResponse& resp, const std::string& model);
ChatResponse chat_response_from_json(const nlohmann::json& j);

// Embeddings wire schema: {input: "text" | {"image_url": ref}, model} ->
// {embedding: [...], usage: {tokens}}. The client also understands the
// {data: [{embedding}], usage: {prompt_tokens}} shape.
nlohmann::json embed_request_to_json(const EmbedInput& input, const std::string& model);
EmbedInput embed_request_from_json(const nlohmann::json& j);
nlohmann::json embed_response_to_json(const EmbedResult& res);
EmbedResult embed_response_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// HTTP clients

/// Transient failure worth retrying (transport error, 429, 5xx).
class TransientEndpointError : public EndpointError {
 public:
  using EndpointError::EndpointError;
};

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds base_delay{200};
  double multiplier = 2.0;
};

/// Calls fn up to policy.attempts times, sleeping with exponential backoff
/// between attempts that fail with TransientEndpointError. The final failure
/// is rethrown as EndpointError.
template <typename Fn>
auto with_retries(const RetryPolicy& policy, Fn&& fn) -> decltype(fn()) {
  auto delay = policy.base_delay;
  for (int attempt = 1;; ++attempt) {
    try {
      return fn();
    } catch (const TransientEndpointError& e) {
      if (attempt >= policy.attempts)
        throw EndpointError(std::string(e.what()) + " (after " + std::to_string(attempt) + " attempts)");
    }
    std::this_thread::sleep_for(delay);
    delay = std::chrono::milliseconds(static_cast<std::int64_t>(static_cast<double>(delay.count()) * policy.multiplier));
  }
}

struct EndpointConfig {
  std::string url;  // e.g. http://localhost:8000/v1
  std::string model;
  std::string api_key;  // never serialized into manifests
  RetryPolicy retry;
  std::chrono::seconds timeout{120};

  // CIRCLES_{prefix}_URL, CIRCLES_{prefix}_MODEL, CIRCLES_{prefix}_API_KEY
  // (falling back to CIRCLES_API_KEY). prefix is CHAT or EMBED.
  static EndpointConfig from_env(const std::string& prefix);
};

class HttpChatClient : public ChatEndpoint {
 public:
  explicit HttpChatClient(EndpointConfig cfg);
  ChatResponse complete(const ChatRequest& request) override;
  std::string identifier() const override;
  // Appends {request, response} JSON lines; auth headers are never logged.
  void set_exchange_log(const std::filesystem::path& path);

 private:
  EndpointConfig cfg_;
  std::optional<std::filesystem::path> log_path_;
  std::mutex log_mu_;
};

class HttpEmbedder : public Embedder {
 public:
  explicit HttpEmbedder(EndpointConfig cfg);
  EmbedResult embed(const EmbedInput& input) override;
  std::string identifier() const override;

 private:
  EndpointConfig cfg_;
};

/// POSTs JSON to `url` + `path`, mapping HTTP/transport errors onto
/// TransientEndpointError or EndpointError. No retries.
nlohmann::json post_json(const EndpointConfig& cfg, const std::string& path, const nlohmann::json& body);

}  // namespace circles
