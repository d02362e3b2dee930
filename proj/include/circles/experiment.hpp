#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "circles/causal.hpp"
#include "circles/config.hpp"
#include "circles/corpus.hpp"
#include "circles/embedding.hpp"
#include "circles/endpoint.hpp"
#include "circles/inference.hpp"
#include "circles/prompting.hpp"
#include "json.hpp"

namespace circles {

/// Everything a run needs besides its configuration.
struct Environment {
  std::shared_ptr<ChatEndpoint> vlm;
  std::shared_ptr<Embedder> embedder;
  std::shared_ptr<const Corpus> demos;
  std::shared_ptr<const Corpus> queries;
  EmbeddingStore store;        // demonstration corpus
  EmbeddingStore query_store;  // query images and questions
  std::shared_ptr<TextEmbeddingCache> text_cache;
  std::vector<BuildFailure> embed_failures;
  std::optional<mock::World> world;
};

/// In-process mock stack when cfg.mock is set, HTTP endpoints otherwise.
Environment make_environment(const RunConfig& cfg);

/// Demonstration and query stores built with `embedder` (no cache files).
Environment make_environment(std::shared_ptr<ChatEndpoint> vlm, std::shared_ptr<Embedder> embedder, Corpus demos,
                             Corpus queries, std::size_t concurrency = 8);

/// Per-query attribute lists and counterfactual captions, shared across
/// sweep levels and grid cells. Thread-safe.
class CausalMemo {
 public:
  struct Extraction {
    std::optional<AttributeSet> attributes;  // empty when extraction failed
    Usage usage;
    std::string raw;
    std::string error;
  };

  Extraction extraction(const std::string& query_id, std::size_t n, const std::function<Extraction()>& compute);
  CaptionResult caption(const std::string& query_id, const std::string& attribute,
                        const std::function<CaptionResult()>& compute);

  std::size_t extraction_calls() const;
  std::size_t caption_calls() const;

 private:
  mutable std::mutex mu_;
  std::map<std::pair<std::string, std::size_t>, Extraction> extractions_;
  std::map<std::pair<std::string, std::string>, CaptionResult> captions_;
  std::size_t extraction_calls_ = 0;
  std::size_t caption_calls_ = 0;
};

/// The demonstrations chosen for one query plus the causal-branch trace.
struct Selection {
  DemonstrationContext ctx;
  std::vector<std::string> attributes;
  std::vector<CaptionResult> captions;
  Usage usage;  // attribute and caption calls
  std::string attribute_error;
  std::size_t expected_demonstrations = 0;
};

struct SelectOptions {
  CausalMemo* memo = nullptr;
  // Number of attributes requested from the VLM; 0 means cfg.num_attributes.
  std::size_t extraction_attributes = 0;
};

Selection select_demonstrations(const RunConfig& cfg, Environment& env, const Corpus& demos,
                                const EmbeddingStore& store, const Example& query, const SelectOptions& opts = {});

PromptBundle render_prompt(const RunConfig& cfg, const Selection& sel, const Example& query, const Corpus& demos);

// ---------------------------------------------------------------------------
// Reports

struct QueryRow {
  std::string id;
  bool ok = false;
  std::string prediction;
  std::string gold;
  int em = 0;
  double f1 = 0.0;
  Usage usage;
  std::size_t demonstrations = 0;
  std::size_t expected_demonstrations = 0;
  bool tie = false;
  bool truncated = false;
  std::vector<std::string> votes;
  std::string error;
};

struct Aggregates {
  std::size_t queries = 0;   // successful rows
  std::size_t failures = 0;  // failed rows
  double em_mean = 0.0;
  double f1_mean = 0.0;
  double accuracy = 0.0;
  double weighted_f1 = 0.0;
  UsageReport usage;
};

struct MetricReport {
  std::string fingerprint;
  std::string method;
  TaskKind task = TaskKind::classification;
  double level = 0.0;  // fraction of the corpus removed
  std::vector<std::string> label_set;
  std::vector<QueryRow> rows;  // ascending id
  Aggregates aggregates;
};

/// Recomputed from successful rows only.
Aggregates compute_aggregates(const std::vector<QueryRow>& rows, TaskKind task,
                              const std::vector<std::string>& label_set);

/// Mean of accuracy (classification) or EM (open VQA) over reports, x100.
double summary_average(const std::vector<MetricReport>& reports);

nlohmann::json to_json(const QueryRow& row);
QueryRow query_row_from_json(const nlohmann::json& j);

std::string report_jsonl(const MetricReport& report);
MetricReport parse_report_jsonl(const std::string& text);
MetricReport read_report(const std::filesystem::path& path);

inline constexpr const char* kAggregatesHeader =
    "method,level,queries,failures,em,f1,accuracy,weighted_f1,mean_prompt_tokens,mean_completion_tokens,"
    "mean_total_tokens,mean_calls";
std::string aggregates_csv_line(const MetricReport& report);
std::string aggregates_csv(const std::vector<MetricReport>& reports);

// ---------------------------------------------------------------------------
// Drivers

struct RunOptions {
  std::optional<std::filesystem::path> output_dir;
  CausalMemo* memo = nullptr;  // a private memo is used when null
  std::size_t extraction_attributes = 0;
  double level = 0.0;
};

/// Evaluates cfg.method over every query. Per-query failures become rows
/// with an error and are excluded from the aggregates. With an output
/// directory, rows already present in a matching report.jsonl are reused and
/// report.jsonl, aggregates.csv, run_log.jsonl and manifest.json are written.
MetricReport run_experiment(const RunConfig& cfg, Environment& env, const RunOptions& opts = {});

/// Same, over an explicit demonstration corpus and store.
MetricReport run_on(const RunConfig& cfg, Environment& env, const Corpus& demos, const EmbeddingStore& store,
                    const RunOptions& opts = {});

/// One report per (level, method) in cfg.scarcity_levels x cfg.sweep_methods.
/// Each level keeps 1 - level of the corpus; attributes and captions are
/// computed once per query and reused at every level.
std::vector<MetricReport> scarcity_sweep(const RunConfig& cfg, Environment& env,
                                         const std::optional<std::filesystem::path>& output_dir = std::nullopt);

struct GridResult {
  std::vector<std::size_t> attributes;
  std::vector<std::size_t> cir;
  std::vector<std::vector<MetricReport>> cells;  // [attributes][cir]
};

/// (#attributes, #CIR) sweep with k_corr fixed; writes grid.csv.
GridResult budget_grid(const RunConfig& cfg, Environment& env,
                       const std::optional<std::filesystem::path>& output_dir = std::nullopt);
std::string grid_csv(const GridResult& grid);

/// cfg.repeats runs with seeds seed, seed+1, ...; writes repeats.csv.
std::vector<MetricReport> run_repeats(const RunConfig& cfg, Environment& env,
                                      const std::optional<std::filesystem::path>& output_dir = std::nullopt);

nlohmann::json manifest(const RunConfig& cfg, const Environment& env);

/// Writes `content` atomically (temp file + rename).
void write_text(const std::filesystem::path& path, const std::string& content);
std::string read_text(const std::filesystem::path& path);

}  // namespace circles
