#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "circles/causal.hpp"
#include "circles/corpus.hpp"
#include "circles/inference.hpp"
#include "circles/mockworld.hpp"
#include "circles/retrieval.hpp"
#include "json.hpp"

namespace circles {

enum class Method { none, random, rices, muier, mmices, circles, circles_no_txt, icl_plus_attr, cir_only };

std::string to_string(Method m);
Method method_from_string(const std::string& s);
const std::vector<std::string>& method_names();

// Whether the method calls the VLM for attributes and captions.
bool uses_causal_branch(Method m);

/// Every validation problem, one per entry.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct EndpointSpec {
  std::string url;
  std::string model;
};

struct MockSpec {
  mock::WorldConfig world;
  mock::MockVlmConfig vlm;
};

struct RunConfig {
  Method method = Method::rices;
  TaskKind task = TaskKind::classification;

  std::size_t budget = kDefaultBudget;
  std::size_t k_corr = 16;
  std::size_t num_attributes = 1;
  std::optional<std::size_t> per_attribute_k;  // derived from the budget when unset

  ScorerVariant scorer = ScorerVariant::img_img;
  std::size_t mmices_pool = kDefaultMmicesPool;
  AttributeSource attribute_source = AttributeSource::vlm;

  GenerationConfig generation;
  std::uint64_t seed = 0;
  bool exclude_self = true;
  bool ascending = false;
  std::size_t repeats = 1;
  std::size_t concurrency = 8;
  std::optional<std::size_t> max_failures;

  std::string corpus_path;
  std::string queries_path;
  std::string cache_path;
  std::string output_dir = "out";
  std::optional<std::string> question_template;

  EndpointSpec chat;
  EndpointSpec embed;
  std::optional<MockSpec> mock;

  std::vector<double> scarcity_levels{0.0, 0.25, 0.5, 0.75};
  std::vector<Method> sweep_methods{Method::rices, Method::circles};
  std::vector<std::size_t> grid_attributes{1, 2, 3};
  std::vector<std::size_t> grid_cir{4, 8, 16};

  // Budget for this run; cir_only forces k_corr = 0.
  BudgetConfig budget_config() const;

  nlohmann::json to_json() const;
  // Throws ConfigError listing every problem found.
  static RunConfig from_json(const nlohmann::json& j);
  // Problems with the current values; empty when valid.
  std::vector<std::string> problems() const;
  void validate() const;

  /// sha256 over the canonical JSON minus output_dir and concurrency.
  std::string fingerprint() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace circles
