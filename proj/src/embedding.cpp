#include "circles/embedding.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "circles/common.hpp"

namespace circles {

std::string to_string(EmbeddingKind kind) {
  switch (kind) {
    case EmbeddingKind::image: return "image";
    case EmbeddingKind::question: return "question";
    case EmbeddingKind::caption: return "caption";
  }
  return "unknown";
}

double l2_norm(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

std::vector<float> normalize(std::span<const float> v) {
  const double n = l2_norm(v);
  if (!(n > 0.0) || !std::isfinite(n)) throw PreconditionError("cannot normalize a zero or non-finite vector");
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(static_cast<double>(v[i]) / n);
  return out;
}

// --------------------------------------------------------------------------
// EmbeddingStore

void EmbeddingStore::add(const std::string& id, EmbeddingKind kind, std::span<const float> unit_vec) {
  if (unit_vec.empty()) throw PreconditionError("empty embedding for '" + id + "'");
  if (dim_ == 0) dim_ = unit_vec.size();
  if (unit_vec.size() != dim_)
    throw PreconditionError("dimension mismatch for '" + id + "': got " + std::to_string(unit_vec.size()) +
                            ", store has " + std::to_string(dim_));
  if (std::abs(l2_norm(unit_vec) - 1.0) > kNormTolerance)
    throw PreconditionError("embedding for '" + id + "' is not unit-norm");
  auto& t = table(kind);
  if (!t.index.emplace(id, t.ids.size()).second)
    throw PreconditionError("duplicate " + to_string(kind) + " embedding for '" + id + "'");
  t.ids.push_back(id);
  t.data.insert(t.data.end(), unit_vec.begin(), unit_vec.end());
}

bool EmbeddingStore::contains(const std::string& id, EmbeddingKind kind) const {
  return table(kind).index.count(id) != 0;
}

std::optional<std::span<const float>> EmbeddingStore::lookup(const std::string& id, EmbeddingKind kind) const {
  const auto& t = table(kind);
  auto it = t.index.find(id);
  if (it == t.index.end()) return std::nullopt;
  return std::span<const float>(t.data.data() + it->second * dim_, dim_);
}

std::span<const float> EmbeddingStore::at(const std::string& id, EmbeddingKind kind) const {
  if (auto v = lookup(id, kind)) return *v;
  throw MissingEmbedding("no " + to_string(kind) + " embedding for '" + id + "'");
}

std::size_t EmbeddingStore::size() const {
  std::size_t n = 0;
  for (const auto& t : tables_) n += t.ids.size();
  return n;
}

std::span<const float> EmbeddingStore::row(EmbeddingKind kind, std::size_t i) const {
  const auto& t = table(kind);
  return std::span<const float>(t.data.data() + i * dim_, dim_);
}

EmbeddingStore EmbeddingStore::subset(const std::vector<std::string>& ids) const {
  EmbeddingStore out(dim_);
  for (std::size_t k = 0; k < tables_.size(); ++k) {
    const auto kind = static_cast<EmbeddingKind>(k);
    for (const auto& id : ids)
      if (auto v = lookup(id, kind)) out.add(id, kind, *v);
  }
  return out;
}

std::vector<EmbeddingRecord> EmbeddingStore::records() const {
  std::vector<EmbeddingRecord> out;
  out.reserve(size());
  for (std::size_t k = 0; k < tables_.size(); ++k) {
    const auto kind = static_cast<EmbeddingKind>(k);
    std::vector<std::string> ids = tables_[k].ids;
    std::sort(ids.begin(), ids.end());
    for (const auto& id : ids) {
      auto v = at(id, kind);
      out.push_back({id, kind, std::vector<float>(v.begin(), v.end())});
    }
  }
  return out;
}

// --------------------------------------------------------------------------
// Binary cache

namespace {

constexpr std::array<std::uint8_t, 4> kMagic = {'C', 'I', 'R', 'C'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CacheError("truncated cache");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_cache(const EmbeddingStore& store) {
  std::vector<EmbeddingRecord> recs = store.records();
  std::erase_if(recs, [](const EmbeddingRecord& r) { return r.kind == EmbeddingKind::caption; });

  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_le<std::uint16_t>(out, kCacheVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.dim()));
  put_le<std::uint64_t>(out, recs.size());
  for (const auto& r : recs) {
    if (r.id.size() > 0xFFFF) throw CacheError("id too long for cache: " + r.id.substr(0, 32) + "...");
    out.push_back(static_cast<std::uint8_t>(r.kind));
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(r.id.size()));
    out.insert(out.end(), r.id.begin(), r.id.end());
    for (float f : r.vector) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  put_le<std::uint32_t>(out, crc32(out));
  return out;
}

EmbeddingStore deserialize_cache(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin()))
    throw CacheError("bad magic");
  if (bytes.size() < 4 + 2 + 4 + 8 + 4) throw CacheError("truncated cache");
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  if (tail.get<std::uint32_t>() != crc32(body)) throw CacheError("checksum mismatch");

  Reader in(body);
  in.get_string(4);
  const auto version = in.get<std::uint16_t>();
  if (version != kCacheVersion) throw CacheError("unsupported cache version " + std::to_string(version));
  const auto dim = in.get<std::uint32_t>();
  const auto count = in.get<std::uint64_t>();
  if (count > 0 && dim == 0) throw CacheError("zero dimension with non-empty cache");

  EmbeddingStore store(dim);
  std::vector<float> vec(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto kind = in.get<std::uint8_t>();
    if (kind > static_cast<std::uint8_t>(EmbeddingKind::question)) throw CacheError("bad record kind");
    const auto len = in.get<std::uint16_t>();
    std::string id = in.get_string(len);
    for (auto& f : vec) f = std::bit_cast<float>(in.get<std::uint32_t>());
    try {
      store.add(id, static_cast<EmbeddingKind>(kind), vec);
    } catch (const PreconditionError& e) {
      throw CacheError(std::string("invalid record: ") + e.what());
    }
  }
  if (in.pos() != body.size()) throw CacheError("trailing bytes in cache");
  return store;
}

void write_cache(const EmbeddingStore& store, const std::filesystem::path& path) {
  const auto bytes = serialize_cache(store);
  // Write-then-rename so a crash never leaves a half-written cache behind.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CacheError("cannot write cache " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CacheError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

EmbeddingStore read_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CacheError("cannot open cache " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_cache(bytes);
}

// --------------------------------------------------------------------------
// Embedding helpers

std::vector<float> embed_text(Embedder& embedder, const std::string& text, std::size_t dim) {
  if (text.empty()) throw PreconditionError("embed_text: text must be non-empty");
  auto res = embedder.embed(EmbedInput::text(text));
  if (dim != 0 && res.vector.size() != dim)
    throw PreconditionError("embedder returned dimension " + std::to_string(res.vector.size()) + ", expected " +
                            std::to_string(dim));
  return normalize(res.vector);
}

std::vector<float> TextEmbeddingCache::embed(const std::string& text) {
  if (text.empty()) throw PreconditionError("embed_text: text must be non-empty");
  const std::string key = sha256_hex(text);
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (auto it = memo_.find(key); it != memo_.end()) {
      ++hits_;
      return it->second;
    }
  }
  auto vec = embed_text(embedder_, text, dim_);
  std::lock_guard<std::mutex> lock(mu_);
  // Another thread may have raced us; keep the first value so every caller
  // sees identical bytes.
  auto [it, inserted] = memo_.emplace(key, std::move(vec));
  if (inserted) ++misses_; else ++hits_;
  return it->second;
}

std::size_t TextEmbeddingCache::hits() const {
  std::lock_guard<std::mutex> lock(mu_);
  return hits_;
}

std::size_t TextEmbeddingCache::misses() const {
  std::lock_guard<std::mutex> lock(mu_);
  return misses_;
}

BuildReport build_cache(const Corpus& corpus, Embedder& embedder,
                        const std::optional<std::filesystem::path>& cache_path, const BuildOptions& options) {
  BuildReport report;
  if (cache_path && std::filesystem::exists(*cache_path)) report.store = read_cache(*cache_path);

  struct Job {
    const Example* ex;
    EmbeddingKind kind;
  };
  std::vector<Job> jobs;
  for (const auto& ex : corpus.examples()) {
    for (auto kind : {EmbeddingKind::image, EmbeddingKind::question}) {
      if (report.store.contains(ex.id, kind))
        ++report.reused;
      else
        jobs.push_back({&ex, kind});
    }
  }

  std::mutex mu;
  std::vector<std::optional<BuildFailure>> failures(jobs.size());
  parallel_for(jobs.size(), options.concurrency, [&](std::size_t i) {
    const auto& job = jobs[i];
    std::vector<float> vec;
    try {
      auto input = job.kind == EmbeddingKind::image ? EmbedInput::image(job.ex->image_ref)
                                                    : EmbedInput::text(job.ex->question);
      vec = normalize(embedder.embed(input).vector);
    } catch (const std::exception& e) {
      failures[i] = BuildFailure{job.ex->id, job.kind, e.what()};
      return;
    }
    std::lock_guard<std::mutex> lock(mu);
    if (report.store.dim() != 0 && vec.size() != report.store.dim())
      throw CacheError("embedding dimension changed mid-build: got " + std::to_string(vec.size()) +
                       ", expected " + std::to_string(report.store.dim()));
    report.store.add(job.ex->id, job.kind, vec);
    ++report.embedded;
  });
  for (auto& f : failures)
    if (f) report.failures.push_back(std::move(*f));

  if (cache_path) write_cache(report.store, *cache_path);
  return report;
}

}  // namespace circles
