#include <algorithm>
#include <atomic>
#include <numeric>
#include <set>

#include "circles/common.hpp"
#include "doctest.h"

using namespace circles;

TEST_CASE("sha256 matches published test vectors") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("crc32 check value") {
  const std::string s = "123456789";
  std::vector<std::uint8_t> b(s.begin(), s.end());
  CHECK(crc32(b) == 0xCBF43926u);
}

TEST_CASE("rng is reproducible and bounded") {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    auto x = a.bounded(1000), y = b.bounded(1000), z = c.bounded(1000);
    CHECK(x == y);
    CHECK(x < 1000);
    differs |= x != z;
  }
  CHECK(differs);
  Rng r(1);
  for (int i = 0; i < 50; ++i) CHECK(r.bounded(1) == 0);
  for (int i = 0; i < 1000; ++i) {
    double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("shuffle yields a permutation") {
  std::vector<int> v(100);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  Rng(9).shuffle(w);
  CHECK(w != v);
  std::sort(w.begin(), w.end());
  CHECK(w == v);
}

TEST_CASE("trim and split_lines") {
  CHECK(trim("  a b \t\r\n") == "a b");
  CHECK(trim(" \n ").empty());
  CHECK(split_lines("a\nb") == std::vector<std::string>{"a", "b"});
  CHECK(split_lines("a\n\nb\n") == std::vector<std::string>{"a", "", "b", ""});
}

TEST_CASE("parallel_for visits every index once") {
  std::vector<std::atomic<int>> hits(257);
  parallel_for(hits.size(), 8, [&](std::size_t i) { ++hits[i]; });
  for (auto& h : hits) CHECK(h.load() == 1);
  parallel_for(0, 4, [](std::size_t) { FAIL("no calls expected"); });
}

TEST_CASE("parallel_for rethrows the lowest failing index") {
  std::atomic<int> ran{0};
  try {
    parallel_for(50, 6, [&](std::size_t i) {
      ++ran;
      if (i == 7 || i == 31) throw std::runtime_error("boom " + std::to_string(i));
    });
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()) == "boom 7");
  }
  CHECK(ran.load() == 50);
}
