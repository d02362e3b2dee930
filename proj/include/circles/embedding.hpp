#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "circles/corpus.hpp"

namespace circles {

enum class EmbeddingKind : std::uint8_t { image = 0, question = 1, caption = 2 };

std::string to_string(EmbeddingKind kind);

/// L2-normalize. Throws PreconditionError on a zero or non-finite vector.
std::vector<float> normalize(std::span<const float> v);
double l2_norm(std::span<const float> v);
double dot(std::span<const float> a, std::span<const float> b);

struct EmbeddingRecord {
  std::string id;
  EmbeddingKind kind = EmbeddingKind::image;
  std::vector<float> vector;
};

class MissingEmbedding : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unit-norm vectors keyed by (id, kind), all sharing one dimensionality.
/// Rows of each kind are stored contiguously in insertion order.
class EmbeddingStore {
 public:
  static constexpr double kNormTolerance = 1e-5;

  EmbeddingStore() = default;
  explicit EmbeddingStore(std::size_t dim) : dim_(dim) {}

  // 0 until the first vector fixes it.
  std::size_t dim() const { return dim_; }

  // Rejects non-unit vectors, dimension mismatches and duplicate keys.
  void add(const std::string& id, EmbeddingKind kind, std::span<const float> unit_vec);

  bool contains(const std::string& id, EmbeddingKind kind) const;
  std::optional<std::span<const float>> lookup(const std::string& id, EmbeddingKind kind) const;
  // Throws MissingEmbedding.
  std::span<const float> at(const std::string& id, EmbeddingKind kind) const;

  std::size_t count(EmbeddingKind kind) const { return table(kind).ids.size(); }
  std::size_t size() const;
  bool empty() const { return size() == 0; }
  const std::vector<std::string>& ids(EmbeddingKind kind) const { return table(kind).ids; }
  std::span<const float> row(EmbeddingKind kind, std::size_t i) const;

  // Restriction to `ids` (in that order) across every kind; ids without a
  // record of some kind are simply absent from that kind.
  EmbeddingStore subset(const std::vector<std::string>& ids) const;

  // Canonical order: kind, then ascending id.
  std::vector<EmbeddingRecord> records() const;

 private:
  struct Table {
    std::vector<std::string> ids;
    std::vector<float> data;
    std::unordered_map<std::string, std::size_t> index;
  };
  const Table& table(EmbeddingKind kind) const { return tables_[static_cast<std::size_t>(kind)]; }
  Table& table(EmbeddingKind kind) { return tables_[static_cast<std::size_t>(kind)]; }

  std::size_t dim_ = 0;
  std::array<Table, 3> tables_;
};

// Binary cache layout (little-endian):
//   "CIRC" | version u16 | dim u32 | count u64 |
//   count x ([kind u8][id_len u16][id bytes][dim x f32]) | crc32 u32
// The CRC covers every preceding byte. Caption records are never written.
inline constexpr std::uint16_t kCacheVersion = 1;

std::vector<std::uint8_t> serialize_cache(const EmbeddingStore& store);
EmbeddingStore deserialize_cache(std::span<const std::uint8_t> bytes);
void write_cache(const EmbeddingStore& store, const std::filesystem::path& path);
EmbeddingStore read_cache(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Embedder endpoints

struct EmbedInput {
  enum class Type { text, image };
  Type type = Type::text;
  std::string content;  // text, or an image reference

  static EmbedInput text(std::string s) { return {Type::text, std::move(s)}; }
  static EmbedInput image(std::string ref) { return {Type::image, std::move(ref)}; }
};

struct EmbedResult {
  std::vector<float> vector;  // raw, not necessarily normalized
  std::uint64_t tokens = 0;
};

/// The frozen image/text encoder. Implementations must be thread-safe.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual EmbedResult embed(const EmbedInput& input) = 0;
  virtual std::string identifier() const = 0;
};

/// Content-hash memo for per-query text embeddings (counterfactual captions
/// and query questions). Thread-safe; never persisted.
class TextEmbeddingCache {
 public:
  TextEmbeddingCache(Embedder& embedder, std::size_t dim) : embedder_(embedder), dim_(dim) {}

  // Normalized embedding of `text`; repeated texts are served from memory.
  std::vector<float> embed(const std::string& text);

  std::size_t hits() const;
  std::size_t misses() const;

 private:
  Embedder& embedder_;
  std::size_t dim_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::vector<float>> memo_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

/// Embeds and normalizes one text; checks dimensionality when `dim` != 0.
std::vector<float> embed_text(Embedder& embedder, const std::string& text, std::size_t dim = 0);

struct BuildFailure {
  std::string id;
  EmbeddingKind kind;
  std::string cause;
};

struct BuildReport {
  EmbeddingStore store;
  std::vector<BuildFailure> failures;
  std::size_t embedded = 0;  // new records this run
  std::size_t reused = 0;    // records already present in the cache file
};

struct BuildOptions {
  std::size_t concurrency = 8;
};

/// Image and question embeddings for every example, persisted to `cache_path`
/// when given. Existing cache entries are reused, so an interrupted build can
/// be rerun to completion. Per-id failures are collected, not thrown.
BuildReport build_cache(const Corpus& corpus, Embedder& embedder,
                        const std::optional<std::filesystem::path>& cache_path,
                        const BuildOptions& options = {});

}  // namespace circles
