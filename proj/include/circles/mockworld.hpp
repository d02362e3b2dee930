#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "circles/corpus.hpp"
#include "circles/embedding.hpp"
#include "circles/endpoint.hpp"

namespace circles::mock {

/// Ordered attribute universe. Value order defines the cyclic successor
/// used by counterfactual captions.
struct MockSchema {
  std::vector<std::pair<std::string, std::vector<std::string>>> attributes;
  std::string decisive;  // attribute whose value determines the label
  std::size_t hash_dim = 16;

  std::size_t dim() const;
  // -1 when unknown.
  int attribute_index(const std::string& name) const;
  int value_index(std::size_t attr, const std::string& value) const;
  std::string label_for(const std::string& decisive_value) const;

  nlohmann::json to_json() const;
  static MockSchema from_json(const nlohmann::json& j);
};

using Assignment = std::vector<std::pair<std::string, std::string>>;

inline constexpr const char* kImagePrefix = "mock:";
inline constexpr const char* kWorldQuestion = "What is the category of the item in this image?";

/// "attr0=val1; attr1=val3" (optionally prefixed with "mock:"). Segments
/// without '=' are ignored.
Assignment parse_description(const std::string& text);
std::string render_description(const Assignment& a);

struct WorldConfig {
  std::size_t num_items = 256;
  std::size_t num_queries = 50;
  std::size_t num_attributes = 4;  // A
  std::size_t num_values = 4;      // V
  double confounder_strength = 0.0;
  std::size_t num_confounders = 1;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static WorldConfig from_json(const nlohmann::json& j);
};

struct SyntheticItem {
  std::string id;
  std::vector<std::size_t> values;  // per attribute, index into the value set
  std::string label;
};

/// attr0 is decisive and labels are "class<k>" for attr0 = val<k>.
/// attr1..attr<num_confounders> are confounders: in the train split each
/// copies the decisive value with probability `confounder_strength`, in the
/// query split each takes the next value after it with that probability.
/// Everything else is uniform.
struct World {
  WorldConfig config;
  MockSchema schema;
  std::vector<SyntheticItem> train;
  std::vector<SyntheticItem> queries;

  Example to_example(const SyntheticItem& item) const;
  Corpus train_corpus() const;
  Corpus query_corpus() const;
  std::vector<std::string> labels() const;
};

World generate_world(const WorldConfig& cfg);

/// Concatenated one-hot blocks (one per schema attribute) followed by a
/// hashed bag-of-words block, L2-normalized. Structured descriptions only
/// touch the one-hot blocks; unknown attributes contribute nothing. Text
/// with no known pair is hashed into the last block.
std::vector<float> mock_embed(const std::string& text, const MockSchema& schema);

class MockEmbedder : public Embedder {
 public:
  explicit MockEmbedder(MockSchema schema) : schema_(std::move(schema)) {}
  EmbedResult embed(const EmbedInput& input) override;
  std::string identifier() const override { return "mock-embedder"; }
  const MockSchema& schema() const { return schema_; }

 private:
  MockSchema schema_;
};

enum class RequestKind { attributes, caption, answer };

RequestKind classify_request(const ChatRequest& req);

struct MockVlmConfig {
  // Position of the decisive attribute in extraction responses.
  std::size_t decisive_rank = 1;
  std::size_t image_tokens = 64;
  // When set, every response of a kind reports these sizes instead of
  // counted words.
  struct FixedSizes {
    std::uint64_t prompt = 0;
    std::uint64_t completion = 0;
  };
  std::optional<std::map<RequestKind, FixedSizes>> fixed_usage;
  // Answer requests whose query image is listed here fail.
  std::set<std::string> fail_images;
};

/// Deterministic rule-based VLM. Attribute requests return the schema
/// attributes present in the image with the decisive one at
/// `decisive_rank`; caption requests advance the named attribute to its
/// next value; answer requests return the label of the first demonstration
/// sharing the query's decisive value, else the majority demonstration
/// label (lexicographic ties), else "unknown".
class MockVlm : public ChatEndpoint {
 public:
  MockVlm(MockSchema schema, MockVlmConfig cfg = {}) : schema_(std::move(schema)), cfg_(std::move(cfg)) {}
  ChatResponse complete(const ChatRequest& request) override;
  std::string identifier() const override { return "mock-vlm"; }

 private:
  std::string attributes_reply(const ChatRequest& req) const;
  std::string caption_reply(const ChatRequest& req) const;
  std::string answer_reply(const ChatRequest& req) const;

  MockSchema schema_;
  MockVlmConfig cfg_;
};

/// Serves the mock embedder and VLM over the chat/embeddings wire schema.
class MockServer {
 public:
  MockServer(MockSchema schema, MockVlmConfig cfg = {});
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  // Port 0 binds any free port. Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  // Blocks until stop() is called from another thread.
  void serve_forever(const std::string& host, int port);
  void stop();
  std::string base_url() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace circles::mock
