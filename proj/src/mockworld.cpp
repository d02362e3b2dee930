#include "circles/mockworld.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <sstream>
#include <thread>

#include "circles/common.hpp"
#include "httplib.h"

namespace circles::mock {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Schema

std::size_t MockSchema::dim() const {
  std::size_t d = hash_dim;
  for (const auto& [name, values] : attributes) d += values.size();
  return d;
}

int MockSchema::attribute_index(const std::string& name) const {
  for (std::size_t i = 0; i < attributes.size(); ++i)
    if (attributes[i].first == name) return static_cast<int>(i);
  return -1;
}

int MockSchema::value_index(std::size_t attr, const std::string& value) const {
  const auto& values = attributes.at(attr).second;
  auto it = std::find(values.begin(), values.end(), value);
  return it == values.end() ? -1 : static_cast<int>(it - values.begin());
}

std::string MockSchema::label_for(const std::string& decisive_value) const {
  const int a = attribute_index(decisive);
  if (a < 0) throw PreconditionError("decisive attribute '" + decisive + "' not in schema");
  const int v = value_index(static_cast<std::size_t>(a), decisive_value);
  if (v < 0) throw PreconditionError("unknown value '" + decisive_value + "' for '" + decisive + "'");
  return "class" + std::to_string(v);
}

json MockSchema::to_json() const {
  json attrs = json::array();
  for (const auto& [name, values] : attributes) attrs.push_back({{"name", name}, {"values", values}});
  return {{"attributes", attrs}, {"decisive", decisive}, {"hash_dim", hash_dim}};
}

MockSchema MockSchema::from_json(const json& j) {
  MockSchema s;
  for (const auto& a : j.at("attributes"))
    s.attributes.emplace_back(a.at("name").get<std::string>(), a.at("values").get<std::vector<std::string>>());
  s.decisive = j.at("decisive").get<std::string>();
  s.hash_dim = j.value("hash_dim", std::size_t{16});
  return s;
}

Assignment parse_description(const std::string& text) {
  std::string body = trim(text);
  if (body.rfind(kImagePrefix, 0) == 0) body = body.substr(std::string(kImagePrefix).size());
  Assignment out;
  std::stringstream ss(body);
  for (std::string seg; std::getline(ss, seg, ';');) {
    auto eq = seg.find('=');
    if (eq == std::string::npos) continue;
    auto k = trim(seg.substr(0, eq));
    auto v = trim(seg.substr(eq + 1));
    if (k.empty() || v.empty()) continue;
    out.emplace_back(std::move(k), std::move(v));
  }
  return out;
}

std::string render_description(const Assignment& a) {
  std::string out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (i) out += "; ";
    out += a[i].first + "=" + a[i].second;
  }
  return out;
}

// ---------------------------------------------------------------------------
// World

json WorldConfig::to_json() const {
  return {{"num_items", num_items},
          {"num_queries", num_queries},
          {"num_attributes", num_attributes},
          {"num_values", num_values},
          {"confounder_strength", confounder_strength},
          {"num_confounders", num_confounders},
          {"seed", seed}};
}

WorldConfig WorldConfig::from_json(const json& j) {
  WorldConfig c;
  c.num_items = j.value("num_items", c.num_items);
  c.num_queries = j.value("num_queries", c.num_queries);
  c.num_attributes = j.value("num_attributes", c.num_attributes);
  c.num_values = j.value("num_values", c.num_values);
  c.confounder_strength = j.value("confounder_strength", c.confounder_strength);
  c.num_confounders = j.value("num_confounders", c.num_confounders);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

std::string padded(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s-%05zu", prefix, i);
  return buf;
}

}  // namespace

World generate_world(const WorldConfig& cfg) {
  if (cfg.num_attributes < 2) throw PreconditionError("world needs at least 2 attributes");
  if (cfg.num_values < 2) throw PreconditionError("world needs at least 2 values per attribute");
  if (cfg.num_confounders >= cfg.num_attributes)
    throw PreconditionError("num_confounders must be below num_attributes");
  if (!(cfg.confounder_strength >= 0.0 && cfg.confounder_strength <= 1.0))
    throw PreconditionError("confounder_strength must lie in [0, 1]");
  if (cfg.num_items == 0) throw PreconditionError("num_items must be positive");

  World w;
  w.config = cfg;
  for (std::size_t a = 0; a < cfg.num_attributes; ++a) {
    std::vector<std::string> values;
    for (std::size_t v = 0; v < cfg.num_values; ++v) values.push_back("val" + std::to_string(v));
    w.schema.attributes.emplace_back("attr" + std::to_string(a), std::move(values));
  }
  w.schema.decisive = "attr0";

  Rng rng(cfg.seed);
  const std::size_t V = cfg.num_values;
  auto draw = [&](bool query, std::size_t i) {
    SyntheticItem item;
    item.id = padded(query ? "query" : "train", i);
    item.values.resize(cfg.num_attributes);
    for (auto& v : item.values) v = static_cast<std::size_t>(rng.bounded(V));
    const std::size_t d = item.values[0];
    for (std::size_t c = 1; c <= cfg.num_confounders; ++c)
      if (rng.uniform() < cfg.confounder_strength) item.values[c] = query ? (d + 1) % V : d;
    item.label = "class" + std::to_string(d);
    return item;
  };
  for (std::size_t i = 0; i < cfg.num_items; ++i) w.train.push_back(draw(false, i));
  for (std::size_t i = 0; i < cfg.num_queries; ++i) w.queries.push_back(draw(true, i));
  return w;
}

Example World::to_example(const SyntheticItem& item) const {
  Assignment a;
  for (std::size_t i = 0; i < item.values.size(); ++i)
    a.emplace_back(schema.attributes[i].first, schema.attributes[i].second[item.values[i]]);
  Example ex;
  ex.id = item.id;
  ex.image_ref = kImagePrefix + render_description(a);
  ex.question = kWorldQuestion;
  ex.answer = item.label;
  ex.class_label = item.label;
  ex.options = labels();
  return ex;
}

std::vector<std::string> World::labels() const {
  std::vector<std::string> out;
  for (std::size_t v = 0; v < config.num_values; ++v) out.push_back("class" + std::to_string(v));
  return out;
}

Corpus World::train_corpus() const {
  std::vector<Example> ex;
  ex.reserve(train.size());
  for (const auto& item : train) ex.push_back(to_example(item));
  return Corpus(std::move(ex), TaskKind::classification, std::string(kWorldQuestion));
}

Corpus World::query_corpus() const {
  std::vector<Example> ex;
  ex.reserve(queries.size());
  for (const auto& item : queries) ex.push_back(to_example(item));
  return Corpus(std::move(ex), TaskKind::classification, std::string(kWorldQuestion));
}

// ---------------------------------------------------------------------------
// Embedder

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<std::string> words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::uint64_t count_words(const std::string& text) {
  std::istringstream in(text);
  std::uint64_t n = 0;
  for (std::string t; in >> t;) ++n;
  return n;
}

}  // namespace

std::vector<float> mock_embed(const std::string& text, const MockSchema& schema) {
  if (trim(text).empty()) throw PreconditionError("cannot embed empty text");
  std::vector<float> v(schema.dim(), 0.0f);
  std::vector<std::size_t> offset(schema.attributes.size(), 0);
  for (std::size_t a = 1; a < schema.attributes.size(); ++a)
    offset[a] = offset[a - 1] + schema.attributes[a - 1].second.size();

  bool known = false;
  for (const auto& [k, val] : parse_description(text)) {
    const int a = schema.attribute_index(k);
    if (a < 0) continue;
    const int idx = schema.value_index(static_cast<std::size_t>(a), val);
    if (idx < 0) continue;
    v[offset[a] + static_cast<std::size_t>(idx)] = 1.0f;
    known = true;
  }
  if (!known) {
    if (schema.hash_dim == 0) throw PreconditionError("text has no known attribute and hashing is disabled");
    const std::size_t base = schema.dim() - schema.hash_dim;
    for (const auto& w : words(text)) v[base + fnv1a(w) % schema.hash_dim] += 1.0f;
  }
  if (l2_norm(v) == 0.0) throw PreconditionError("text '" + text + "' embeds to the zero vector");
  return normalize(v);
}

EmbedResult MockEmbedder::embed(const EmbedInput& input) {
  EmbedResult r;
  r.vector = mock_embed(input.content, schema_);
  r.tokens = input.type == EmbedInput::Type::image ? 1 : count_words(input.content);
  return r;
}

// ---------------------------------------------------------------------------
// VLM

namespace {

std::string all_text(const ChatRequest& req) {
  std::string out;
  for (const auto& m : req.messages)
    for (const auto& p : m.content)
      if (p.type == ContentPart::Type::text) out += p.value;
  return out;
}

const ChatMessage& user_message(const ChatRequest& req) {
  for (auto it = req.messages.rbegin(); it != req.messages.rend(); ++it)
    if (it->role == "user") return *it;
  throw PreconditionError("request has no user message");
}

std::string first_image(const ChatRequest& req) {
  for (const auto& p : user_message(req).content)
    if (p.type == ContentPart::Type::image) return p.value;
  throw PreconditionError("request has no image");
}

// Text between `start` and `end` markers, or empty.
std::string between(const std::string& text, const std::string& start, const std::string& end) {
  auto b = text.find(start);
  if (b == std::string::npos) return {};
  b += start.size();
  auto e = text.find(end, b);
  return text.substr(b, e == std::string::npos ? std::string::npos : e - b);
}

}  // namespace

RequestKind classify_request(const ChatRequest& req) {
  const auto text = all_text(req);
  if (text.find("### Attributes") != std::string::npos) return RequestKind::attributes;
  if (text.find("Manipulation Text:") != std::string::npos) return RequestKind::caption;
  return RequestKind::answer;
}

std::string MockVlm::attributes_reply(const ChatRequest& req) const {
  const auto text = all_text(req);
  std::size_t n = schema_.attributes.size();
  if (auto num = between(text, "list the top ", " "); !num.empty()) {
    try {
      n = static_cast<std::size_t>(std::stoul(num));
    } catch (const std::exception&) {
    }
  }
  std::vector<std::string> present, order;
  bool has_decisive = false;
  for (const auto& [k, v] : parse_description(first_image(req))) {
    if (schema_.attribute_index(k) < 0) continue;
    if (k == schema_.decisive)
      has_decisive = true;
    else
      present.push_back(k);
  }
  order = present;
  if (has_decisive)
    order.insert(order.begin() + static_cast<std::ptrdiff_t>(std::min(cfg_.decisive_rank, order.size())),
                 schema_.decisive);
  if (order.size() > n) order.resize(n);
  std::string out = "### Attributes";
  for (const auto& a : order) out += "\n" + a;
  return out;
}

std::string MockVlm::caption_reply(const ChatRequest& req) const {
  const std::string attribute = between(all_text(req), "Change the attribute ", " to a different");
  Assignment a = parse_description(first_image(req));
  const int ai = schema_.attribute_index(attribute);
  for (auto& [k, v] : a) {
    if (k != attribute || ai < 0) continue;
    const auto& values = schema_.attributes[static_cast<std::size_t>(ai)].second;
    const int vi = schema_.value_index(static_cast<std::size_t>(ai), v);
    v = values[vi < 0 ? 0 : (static_cast<std::size_t>(vi) + 1) % values.size()];
  }
  return render_description(a);
}

std::string MockVlm::answer_reply(const ChatRequest& req) const {
  const auto& parts = user_message(req).content;
  std::string query_image;
  struct Demo {
    std::string image, label;
  };
  std::vector<Demo> demos;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].type != ContentPart::Type::image) continue;
    if (query_image.empty()) {
      query_image = parts[i].value;
      continue;
    }
    if (i + 1 >= parts.size() || parts[i + 1].type != ContentPart::Type::text) continue;
    const std::string& t = parts[i + 1].value;
    if (t.rfind("\nQuestion: ", 0) != 0) continue;
    auto pos = t.find("\nAnswer: ");
    if (pos == std::string::npos) continue;
    pos += 9;
    demos.push_back({parts[i].value, t.substr(pos, t.find('\n', pos) - pos)});
  }
  if (query_image.empty()) throw PreconditionError("answer request has no query image");
  if (cfg_.fail_images.count(query_image)) throw EndpointError("injected failure for " + query_image);
  if (demos.empty()) return "unknown";

  auto decisive_of = [&](const std::string& ref) -> std::optional<std::string> {
    for (const auto& [k, v] : parse_description(ref))
      if (k == schema_.decisive) return v;
    return std::nullopt;
  };
  if (const auto qd = decisive_of(query_image))
    for (const auto& d : demos)
      if (decisive_of(d.image) == qd) return d.label;

  std::map<std::string, std::size_t> votes;
  for (const auto& d : demos) ++votes[d.label];
  std::string best;
  std::size_t best_n = 0;
  for (const auto& [label, n] : votes)
    if (n > best_n) {
      best = label;
      best_n = n;
    }
  return best;
}

ChatResponse MockVlm::complete(const ChatRequest& request) {
  const RequestKind kind = classify_request(request);
  ChatResponse resp;
  switch (kind) {
    case RequestKind::attributes: resp.text = attributes_reply(request); break;
    case RequestKind::caption: resp.text = caption_reply(request); break;
    case RequestKind::answer: resp.text = answer_reply(request); break;
  }
  resp.usage.calls = 1;
  if (cfg_.fixed_usage) {
    auto it = cfg_.fixed_usage->find(kind);
    if (it != cfg_.fixed_usage->end()) {
      resp.usage.prompt_tokens = it->second.prompt;
      resp.usage.completion_tokens = it->second.completion;
    }
  } else {
    for (const auto& m : request.messages)
      for (const auto& p : m.content)
        resp.usage.prompt_tokens += p.type == ContentPart::Type::text ? count_words(p.value) : cfg_.image_tokens;
    resp.usage.completion_tokens = count_words(resp.text);
  }
  return resp;
}

// ---------------------------------------------------------------------------
// HTTP server

struct MockServer::Impl {
  Impl(MockSchema schema, MockVlmConfig cfg) : embedder(schema), vlm(std::move(schema), std::move(cfg)) {}

  MockEmbedder embedder;
  MockVlm vlm;
  httplib::Server server;
  std::thread thread;
  std::string host;
  int port = 0;
};

namespace {

void send_error(httplib::Response& res, int status, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", {{"message", message}}}}.dump(), "application/json");
}

}  // namespace

MockServer::MockServer(MockSchema schema, MockVlmConfig cfg)
    : impl_(std::make_unique<Impl>(std::move(schema), std::move(cfg))) {
  auto chat = [this](const httplib::Request& req, httplib::Response& res) {
    try {
      const auto body = json::parse(req.body);
      const auto request = chat_request_from_json(body);
      const auto reply = impl_->vlm.complete(request);
      res.set_content(to_json(reply, request.model).dump(), "application/json");
    } catch (const json::exception& e) {
      send_error(res, 400, e.what());
    } catch (const PreconditionError& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  };
  auto embed = [this](const httplib::Request& req, httplib::Response& res) {
    try {
      const auto input = embed_request_from_json(json::parse(req.body));
      res.set_content(embed_response_to_json(impl_->embedder.embed(input)).dump(), "application/json");
    } catch (const json::exception& e) {
      send_error(res, 400, e.what());
    } catch (const PreconditionError& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  };
  for (const char* prefix : {"", "/v1"}) {
    impl_->server.Post(std::string(prefix) + "/chat/completions", chat);
    impl_->server.Post(std::string(prefix) + "/embeddings", embed);
  }
}

MockServer::~MockServer() { stop(); }

int MockServer::start(const std::string& host, int port) {
  if (impl_->thread.joinable()) throw PreconditionError("mock server already running");
  impl_->host = host;
  if (port == 0) {
    impl_->port = impl_->server.bind_to_any_port(host);
  } else {
    if (!impl_->server.bind_to_port(host, port)) impl_->port = -1;
    else impl_->port = port;
  }
  if (impl_->port <= 0) throw EndpointError("mock server could not bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return impl_->port;
}

void MockServer::serve_forever(const std::string& host, int port) {
  impl_->host = host;
  impl_->port = port;
  if (!impl_->server.listen(host, port)) throw EndpointError("mock server could not listen on " + host + ":" + std::to_string(port));
}

void MockServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

std::string MockServer::base_url() const {
  return "http://" + impl_->host + ":" + std::to_string(impl_->port) + "/v1";
}

}  // namespace circles::mock
