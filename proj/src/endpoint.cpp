#include "httplib.h"

#include "circles/endpoint.hpp"

#include <cstdlib>
#include <fstream>

namespace circles {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Wire conversion

json to_json(const ChatRequest& req) {
  json messages = json::array();
  for (const auto& m : req.messages) {
    json parts = json::array();
    for (const auto& p : m.content) {
      if (p.type == ContentPart::Type::text)
        parts.push_back({{"type", "text"}, {"text", p.value}});
      else
        parts.push_back({{"type", "image_url"}, {"image_url", {{"url", p.value}}}});
    }
    messages.push_back({{"role", m.role}, {"content", std::move(parts)}});
  }
  return {{"model", req.model},
          {"messages", std::move(messages)},
          {"temperature", req.temperature},
          {"max_tokens", req.max_tokens}};
}

ChatRequest chat_request_from_json(const json& j) {
  if (!j.is_object() || !j.contains("messages") || !j["messages"].is_array())
    throw PreconditionError("chat request must be an object with a 'messages' array");
  ChatRequest req;
  req.model = j.value("model", "");
  req.temperature = j.value("temperature", 0.0);
  req.max_tokens = j.value("max_tokens", std::size_t{512});
  for (const auto& m : j["messages"]) {
    if (!m.is_object() || !m.contains("content")) throw PreconditionError("chat message without content");
    ChatMessage msg;
    msg.role = m.value("role", "user");
    const auto& c = m["content"];
    if (c.is_string()) {
      msg.content.push_back(ContentPart::text(c.get<std::string>()));
    } else if (c.is_array()) {
      for (const auto& p : c) {
        const auto type = p.value("type", "");
        if (type == "text") {
          msg.content.push_back(ContentPart::text(p.at("text").get<std::string>()));
        } else if (type == "image_url") {
          const auto& iu = p.at("image_url");
          msg.content.push_back(ContentPart::image(iu.is_string() ? iu.get<std::string>()
                                                                  : iu.at("url").get<std::string>()));
        } else {
          throw PreconditionError("unsupported content part type '" + type + "'");
        }
      }
    } else {
      throw PreconditionError("message content must be a string or an array");
    }
    req.messages.push_back(std::move(msg));
  }
  return req;
}

json to_json(const ChatResponse& resp, const std::string& model) {
  return {{"object", "chat.completion"},
          {"model", model},
          {"choices",
           json::array({{{"index", 0},
                         {"message", {{"role", "assistant"}, {"content", resp.text}}},
                         {"finish_reason", resp.finish_reason}}})},
          {"usage",
           {{"prompt_tokens", resp.usage.prompt_tokens},
            {"completion_tokens", resp.usage.completion_tokens},
            {"total_tokens", resp.usage.total()}}}};
}

ChatResponse chat_response_from_json(const json& j) {
  if (!j.is_object() || !j.contains("choices") || !j["choices"].is_array() || j["choices"].empty())
    throw EndpointError("chat response has no choices");
  const auto& choice = j["choices"][0];
  ChatResponse resp;
  const auto& content = choice.at("message").at("content");
  if (content.is_string()) {
    resp.text = content.get<std::string>();
  } else if (content.is_array()) {
    for (const auto& p : content)
      if (p.value("type", "") == "text") resp.text += p.value("text", "");
  }
  resp.finish_reason = choice.value("finish_reason", "stop");
  if (auto u = j.find("usage"); u != j.end() && u->is_object()) {
    resp.usage.prompt_tokens = u->value("prompt_tokens", std::uint64_t{0});
    resp.usage.completion_tokens = u->value("completion_tokens", std::uint64_t{0});
  }
  resp.usage.calls = 1;
  return resp;
}

json embed_request_to_json(const EmbedInput& input, const std::string& model) {
  json in = input.type == EmbedInput::Type::text ? json(input.content) : json{{"image_url", input.content}};
  return {{"model", model}, {"input", std::move(in)}};
}

EmbedInput embed_request_from_json(const json& j) {
  if (!j.is_object() || !j.contains("input")) throw PreconditionError("embedding request needs 'input'");
  const auto& in = j["input"];
  if (in.is_string()) return EmbedInput::text(in.get<std::string>());
  if (in.is_object() && in.contains("image_url") && in["image_url"].is_string())
    return EmbedInput::image(in["image_url"].get<std::string>());
  throw PreconditionError("embedding 'input' must be a string or {\"image_url\": ref}");
}

json embed_response_to_json(const EmbedResult& res) {
  return {{"embedding", res.vector}, {"usage", {{"tokens", res.tokens}}}};
}

EmbedResult embed_response_from_json(const json& j) {
  EmbedResult res;
  const json* vec = nullptr;
  if (j.contains("embedding"))
    vec = &j["embedding"];
  else if (j.contains("data") && j["data"].is_array() && !j["data"].empty())
    vec = &j["data"][0].at("embedding");
  if (!vec || !vec->is_array()) throw EndpointError("embedding response has no vector");
  res.vector = vec->get<std::vector<float>>();
  if (auto u = j.find("usage"); u != j.end() && u->is_object())
    res.tokens = u->contains("tokens") ? u->value("tokens", std::uint64_t{0}) : u->value("prompt_tokens", std::uint64_t{0});
  return res;
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

std::string env_or(const char* name, const std::string& fallback = {}) {
  const char* v = std::getenv(name);
  return v ? std::string(v) : fallback;
}

// "http://host:port/v1" -> {"http://host:port", "/v1"}
std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  const auto host_start = scheme == std::string::npos ? 0 : scheme + 3;
  const auto slash = url.find('/', host_start);
  if (slash == std::string::npos) return {url, ""};
  std::string prefix = url.substr(slash);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, slash), prefix};
}

}  // namespace

EndpointConfig EndpointConfig::from_env(const std::string& prefix) {
  EndpointConfig cfg;
  cfg.url = env_or(("CIRCLES_" + prefix + "_URL").c_str());
  cfg.model = env_or(("CIRCLES_" + prefix + "_MODEL").c_str());
  cfg.api_key = env_or(("CIRCLES_" + prefix + "_API_KEY").c_str(), env_or("CIRCLES_API_KEY"));
  return cfg;
}

json post_json(const EndpointConfig& cfg, const std::string& path, const json& body) {
  if (cfg.url.empty()) throw EndpointError("endpoint URL not configured");
  auto [base, prefix] = split_url(cfg.url);
  httplib::Client cli(base);
  cli.set_connection_timeout(cfg.timeout);
  cli.set_read_timeout(cfg.timeout);
  cli.set_write_timeout(cfg.timeout);
  httplib::Headers headers;
  if (!cfg.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg.api_key);

  auto res = cli.Post(prefix + path, headers, body.dump(), "application/json");
  if (!res) throw TransientEndpointError("transport error: " + httplib::to_string(res.error()));
  if (res->status == 429 || res->status >= 500)
    throw TransientEndpointError("HTTP " + std::to_string(res->status) + " from " + cfg.url + path);
  if (res->status < 200 || res->status >= 300)
    throw EndpointError("HTTP " + std::to_string(res->status) + " from " + cfg.url + path + ": " +
                        res->body.substr(0, 200));
  try {
    return json::parse(res->body);
  } catch (const json::parse_error&) {
    throw EndpointError("malformed JSON from " + cfg.url + path);
  }
}

HttpChatClient::HttpChatClient(EndpointConfig cfg) : cfg_(std::move(cfg)) {}

ChatResponse HttpChatClient::complete(const ChatRequest& request) {
  ChatRequest req = request;
  if (req.model.empty()) req.model = cfg_.model;
  const json body = to_json(req);
  const json reply = with_retries(cfg_.retry, [&] { return post_json(cfg_, "/chat/completions", body); });
  if (log_path_) {
    std::lock_guard<std::mutex> lock(log_mu_);
    std::ofstream out(*log_path_, std::ios::app);
    out << json{{"request", body}, {"response", reply}}.dump() << '\n';
  }
  return chat_response_from_json(reply);
}

std::string HttpChatClient::identifier() const { return cfg_.url + "#" + cfg_.model; }

void HttpChatClient::set_exchange_log(const std::filesystem::path& path) { log_path_ = path; }

HttpEmbedder::HttpEmbedder(EndpointConfig cfg) : cfg_(std::move(cfg)) {}

EmbedResult HttpEmbedder::embed(const EmbedInput& input) {
  const json body = embed_request_to_json(input, cfg_.model);
  const json reply = with_retries(cfg_.retry, [&] { return post_json(cfg_, "/embeddings", body); });
  return embed_response_from_json(reply);
}

std::string HttpEmbedder::identifier() const { return cfg_.url + "#" + cfg_.model; }

}  // namespace circles
