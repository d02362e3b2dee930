#include <zlib.h>

#include <cstring>

#include "circles/embedding.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace circles;

namespace {

EmbeddingStore random_store(std::size_t n, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  EmbeddingStore s;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = "id" + std::to_string(n - i);
    s.add(id, EmbeddingKind::image, testutil::random_unit(gen, dim));
    s.add(id, EmbeddingKind::question, testutil::random_unit(gen, dim));
  }
  return s;
}

Corpus tiny_corpus(std::size_t n) {
  std::vector<Example> ex;
  for (std::size_t i = 0; i < n; ++i)
    ex.push_back({"x" + std::to_string(i), "img" + std::to_string(i), "q" + std::to_string(i), "a", {}, {}, {}, {}});
  return Corpus(std::move(ex), TaskKind::open_vqa);
}

void fill_table(testutil::TableEmbedder& e, std::size_t n) {
  std::mt19937_64 gen(11);
  for (std::size_t i = 0; i < n; ++i) {
    e.table["img" + std::to_string(i)] = testutil::random_unit(gen, 8);
    e.table["q" + std::to_string(i)] = testutil::random_unit(gen, 8);
  }
}

}  // namespace

TEST_CASE("normalize and dot") {
  std::vector<float> v{3.0f, 4.0f};
  auto u = normalize(v);
  CHECK(u[0] == doctest::Approx(0.6));
  CHECK(u[1] == doctest::Approx(0.8));
  CHECK(l2_norm(u) == doctest::Approx(1.0));
  CHECK(dot(u, u) == doctest::Approx(1.0));
  std::vector<float> z{0.0f, 0.0f};
  CHECK_THROWS_AS(normalize(z), PreconditionError);
  std::vector<float> bad{1.0f, std::nanf("")};
  CHECK_THROWS_AS(normalize(bad), PreconditionError);
}

TEST_CASE("store invariants") {
  EmbeddingStore s;
  CHECK(s.dim() == 0);
  auto a = testutil::unit({1, 2, 2});
  s.add("a", EmbeddingKind::image, a);
  CHECK(s.dim() == 3);
  CHECK_THROWS_AS(s.add("a", EmbeddingKind::image, a), PreconditionError);
  s.add("a", EmbeddingKind::question, a);
  std::vector<float> not_unit{1.0f, 1.0f, 0.0f};
  CHECK_THROWS_AS(s.add("b", EmbeddingKind::image, not_unit), PreconditionError);
  auto short_vec = testutil::unit({1, 0});
  CHECK_THROWS_AS(s.add("b", EmbeddingKind::image, short_vec), PreconditionError);
  CHECK_THROWS_AS(s.at("b", EmbeddingKind::image), MissingEmbedding);
  CHECK(!s.lookup("a", EmbeddingKind::caption));
  CHECK(s.size() == 2);
  CHECK(s.count(EmbeddingKind::image) == 1);
  auto sub = s.subset({"a", "zz"});
  CHECK(sub.size() == 2);
}

TEST_CASE("cache bytes match the documented layout") {
  EmbeddingStore s;
  std::vector<float> v{1.0f, 0.0f};
  s.add("a", EmbeddingKind::image, v);
  // Hand-assembled expectation.
  std::vector<std::uint8_t> want = {'C', 'I', 'R', 'C', 1, 0, 2, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0,
                                    0,   1,   0,   'a', 0, 0, 0x80, 0x3f, 0, 0, 0, 0};
  const uLong crc = ::crc32(0L, want.data(), static_cast<uInt>(want.size()));
  for (int i = 0; i < 4; ++i) want.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
  CHECK(serialize_cache(s) == want);
}

TEST_CASE("cache round trip is byte-identical") {
  auto s = random_store(300, 24, 3);
  std::vector<float> c(24, 0.0f);
  c[0] = 1.0f;
  s.add("cap", EmbeddingKind::caption, c);
  auto bytes = serialize_cache(s);
  auto back = deserialize_cache(bytes);
  CHECK(back.count(EmbeddingKind::caption) == 0);
  CHECK(back.size() == 600);
  CHECK(serialize_cache(back) == bytes);
  for (const auto& id : s.ids(EmbeddingKind::image)) {
    auto x = s.at(id, EmbeddingKind::image), y = back.at(id, EmbeddingKind::image);
    CHECK(std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) == 0);
  }

  auto dir = testutil::temp_dir("cache");
  write_cache(s, dir / "e.bin");
  CHECK(serialize_cache(read_cache(dir / "e.bin")) == bytes);
  std::filesystem::remove_all(dir);
}

TEST_CASE("corrupt caches are rejected") {
  auto bytes = serialize_cache(random_store(5, 4, 1));
  auto expect_error = [](std::vector<std::uint8_t> b, const std::string& needle) {
    try {
      deserialize_cache(b);
      FAIL("no error for " << needle);
    } catch (const CacheError& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  auto b = bytes;
  b[0] = 'X';
  expect_error(b, "bad magic");
  b = bytes;
  b[30] ^= 0x01;
  expect_error(b, "checksum");
  b = bytes;
  b.resize(b.size() - 9);
  expect_error(b, "checksum");
  expect_error({'C', 'I', 'R', 'C', 1}, "truncated");

  // A wrong version with a valid checksum.
  b = bytes;
  b[4] = 9;
  b.resize(b.size() - 4);
  const uLong crc = ::crc32(0L, b.data(), static_cast<uInt>(b.size()));
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
  expect_error(b, "version");
  CHECK_THROWS_AS(read_cache("/nonexistent/cache.bin"), CacheError);
}

TEST_CASE("build_cache embeds, persists and resumes") {
  auto corpus = tiny_corpus(20);
  testutil::TableEmbedder emb;
  fill_table(emb, 20);
  emb.fail_on = {"img3", "q7"};
  auto dir = testutil::temp_dir("build");
  auto path = dir / "c.bin";

  auto first = build_cache(corpus, emb, path, {4});
  CHECK(first.embedded == 38);
  CHECK(first.failures.size() == 2);
  CHECK(first.store.size() == 38);
  CHECK(std::filesystem::exists(path));

  // Rerun: only the two missing records are requested.
  emb.fail_on.clear();
  emb.calls = 0;
  auto second = build_cache(corpus, emb, path, {4});
  CHECK(emb.calls.load() == 2);
  CHECK(second.reused == 38);
  CHECK(second.embedded == 2);
  CHECK(second.failures.empty());
  CHECK(second.store.size() == 40);

  auto third = build_cache(corpus, emb, path, {2});
  CHECK(third.embedded == 0);
  CHECK(serialize_cache(third.store) == serialize_cache(second.store));
  std::filesystem::remove_all(dir);
}

TEST_CASE("text embedding cache memoizes by content") {
  testutil::TableEmbedder emb;
  fill_table(emb, 3);
  TextEmbeddingCache cache(emb, 8);
  auto a = cache.embed("q1");
  auto b = cache.embed("q1");
  cache.embed("q2");
  CHECK(a == b);
  CHECK(cache.hits() == 1);
  CHECK(cache.misses() == 2);
  CHECK(emb.calls.load() == 2);
  CHECK_THROWS_AS(cache.embed(""), PreconditionError);
  TextEmbeddingCache wrong_dim(emb, 5);
  CHECK_THROWS_AS(wrong_dim.embed("q0"), PreconditionError);
}
