#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace circles {

enum class TaskKind { classification, open_vqa };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

/// One demonstration-corpus or query entry: (image, question, answer) plus
/// optional dataset annotations. Unknown JSONL fields ride along in `extra`.
struct Example {
  std::string id;
  std::string image_ref;
  std::string question;
  std::string answer;
  std::optional<std::map<std::string, std::string>> attributes;
  std::optional<std::string> class_label;
  std::optional<std::vector<std::string>> options;
  nlohmann::json extra = nlohmann::json::object();

  // Label used for demonstrations and scoring: class_label when present.
  const std::string& label() const { return class_label ? *class_label : answer; }
};

class CorpusError : public std::runtime_error {
 public:
  CorpusError(std::size_t line, const std::string& what)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Immutable after construction; ids are unique.
class Corpus {
 public:
  Corpus(std::vector<Example> examples, TaskKind kind,
         std::optional<std::string> question_template = std::nullopt);

  const std::vector<Example>& examples() const { return examples_; }
  std::size_t size() const { return examples_.size(); }
  bool empty() const { return examples_.empty(); }
  TaskKind task_kind() const { return kind_; }
  const std::optional<std::string>& question_template() const { return template_; }

  const Example* find(const std::string& id) const;
  const Example& at(const std::string& id) const;
  std::vector<std::string> ids() const;
  // Sorted, distinct labels across the corpus.
  std::vector<std::string> label_set() const;

 private:
  std::vector<Example> examples_;
  TaskKind kind_;
  std::optional<std::string> template_;
  std::unordered_map<std::string, std::size_t> index_;
};

nlohmann::json example_to_json(const Example& ex);
// `line` is only used for error messages.
Example example_from_json(const nlohmann::json& j, std::size_t line = 0);

/// Reads a JSONL corpus, checking every invariant. For classification the
/// question template defaults to the shared question when all examples agree.
Corpus load_corpus(const std::filesystem::path& path, TaskKind kind,
                   std::optional<std::string> question_template = std::nullopt);
Corpus parse_corpus(const std::string& jsonl, TaskKind kind,
                    std::optional<std::string> question_template = std::nullopt);

/// Canonical JSONL: one compact object per line, keys sorted.
std::string serialize_corpus(const Corpus& corpus);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);

/// Keeps round(keep_fraction * N) examples chosen uniformly at random,
/// preserving original relative order.
Corpus subsample_corpus(const Corpus& corpus, double keep_fraction, std::uint64_t seed);

}  // namespace circles
