#include <set>

#include "circles/mockworld.hpp"
#include "circles/prompting.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace circles;
using namespace circles::mock;

namespace {

WorldConfig small(std::size_t items, double strength, std::uint64_t seed = 0) {
  WorldConfig c;
  c.num_items = items;
  c.num_queries = 40;
  c.confounder_strength = strength;
  c.seed = seed;
  return c;
}

ChatRequest answer_request(const std::string& query_image, const std::vector<std::pair<std::string, std::string>>& demos) {
  DemonstrationContext ctx;
  ctx.mode = PromptMode::icl;
  ctx.options = std::vector<std::string>{"class0", "class1", "class2", "class3"};
  std::vector<Example> ex;
  for (std::size_t i = 0; i < demos.size(); ++i) {
    ex.push_back({"d" + std::to_string(i), demos[i].first, kWorldQuestion, demos[i].second, {}, {}, {}, {}});
    ctx.corr_block.entries.push_back({"d" + std::to_string(i), 1.0 - 0.01 * static_cast<double>(i), {}});
  }
  Corpus corpus(std::move(ex), TaskKind::classification, std::string(kWorldQuestion));
  Example q{"q", query_image, kWorldQuestion, "class0", {}, {}, {}, {}};
  ChatRequest req;
  req.messages = assemble(ctx, q, corpus).messages();
  return req;
}

}  // namespace

TEST_CASE("world layout") {
  auto w = generate_world(small(100, 0.0, 3));
  CHECK(w.train.size() == 100);
  CHECK(w.queries.size() == 40);
  CHECK(w.schema.attributes.size() == 4);
  CHECK(w.schema.decisive == "attr0");
  CHECK(w.train[0].id == "train-00000");
  CHECK(w.queries[39].id == "query-00039");
  CHECK(w.labels() == std::vector<std::string>{"class0", "class1", "class2", "class3"});
  for (const auto& it : w.train) CHECK(it.label == "class" + std::to_string(it.values[0]));
  auto ex = w.to_example(w.train[5]);
  CHECK(ex.image_ref.rfind("mock:attr0=val", 0) == 0);
  CHECK(ex.question == kWorldQuestion);
  CHECK(*ex.class_label == w.train[5].label);
  CHECK(w.train_corpus().question_template() == std::string(kWorldQuestion));
  CHECK(serialize_corpus(generate_world(small(100, 0.0, 3)).train_corpus()) == serialize_corpus(w.train_corpus()));
  CHECK(serialize_corpus(generate_world(small(100, 0.0, 4)).train_corpus()) != serialize_corpus(w.train_corpus()));
}

TEST_CASE("strength 0 leaves attributes independent") {
  // Pearson chi-square on the 4x4 contingency table of (attr0, attr1).
  auto w = generate_world(small(1000, 0.0, 11));
  double table[4][4] = {};
  for (const auto& it : w.train) table[it.values[0]][it.values[1]] += 1;
  double rows[4] = {}, cols[4] = {};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      rows[i] += table[i][j];
      cols[j] += table[i][j];
    }
  double chi = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      const double e = rows[i] * cols[j] / 1000.0;
      chi += (table[i][j] - e) * (table[i][j] - e) / e;
    }
  CHECK(chi < 27.88);  // df 9, p = 0.001
  // Marginals are roughly uniform.
  for (double r : rows) CHECK(std::abs(r - 250) < 60);
}

TEST_CASE("strength 1 plants a flipped shortcut") {
  WorldConfig c = small(200, 1.0, 5);
  c.num_confounders = 2;
  auto w = generate_world(c);
  for (const auto& it : w.train) {
    CHECK(it.values[1] == it.values[0]);
    CHECK(it.values[2] == it.values[0]);
  }
  for (const auto& it : w.queries) {
    CHECK(it.values[1] == (it.values[0] + 1) % 4);
    CHECK(it.values[2] == (it.values[0] + 1) % 4);
  }
  // Partial strength: agreement rate near 0.5 + 0.5/4.
  auto half = generate_world(small(4000, 0.5, 6));
  double agree = 0;
  for (const auto& it : half.train) agree += it.values[1] == it.values[0];
  CHECK(agree / 4000 == doctest::Approx(0.625).epsilon(0.05));
}

TEST_CASE("world config validation") {
  WorldConfig c;
  c.num_attributes = 1;
  CHECK_THROWS_AS(generate_world(c), PreconditionError);
  c = {};
  c.num_values = 1;
  CHECK_THROWS_AS(generate_world(c), PreconditionError);
  c = {};
  c.num_confounders = 4;
  CHECK_THROWS_AS(generate_world(c), PreconditionError);
  c = {};
  c.confounder_strength = 1.5;
  CHECK_THROWS_AS(generate_world(c), PreconditionError);
  c = {};
  c.num_items = 0;
  CHECK_THROWS_AS(generate_world(c), PreconditionError);
  c = {};
  c.seed = 99;
  CHECK(WorldConfig::from_json(c.to_json()).to_json() == c.to_json());
  auto w = generate_world(c);
  CHECK(MockSchema::from_json(w.schema.to_json()).to_json() == w.schema.to_json());
}

TEST_CASE("descriptions parse and render") {
  auto a = parse_description("mock:attr0=val1; attr1=val3;junk; attr2 = val0 ");
  REQUIRE(a.size() == 3);
  CHECK(a[0] == std::pair<std::string, std::string>{"attr0", "val1"});
  CHECK(a[2] == std::pair<std::string, std::string>{"attr2", "val0"});
  CHECK(render_description(a) == "attr0=val1; attr1=val3; attr2=val0");
}

TEST_CASE("mock embeddings") {
  auto w = generate_world(small(10, 0.0));
  const auto& s = w.schema;
  CHECK(s.dim() == 4 * 4 + 16);
  auto x = mock_embed("mock:attr0=val1; attr1=val2; attr2=val0; attr3=val3", s);
  auto y = mock_embed("attr0=val1; attr1=val2; attr2=val0; attr3=val3", s);
  auto z = mock_embed("attr0=val1; attr1=val0; attr2=val0; attr3=val3", s);
  CHECK(l2_norm(x) == doctest::Approx(1.0));
  CHECK(x == y);
  CHECK(dot(x, z) == doctest::Approx(0.75));
  auto q = mock_embed(kWorldQuestion, s);
  CHECK(dot(q, x) == doctest::Approx(0.0));
  CHECK(dot(q, mock_embed(kWorldQuestion, s)) == doctest::Approx(1.0));
  CHECK_THROWS_AS(mock_embed("  ", s), PreconditionError);
  MockEmbedder e(s);
  CHECK(e.embed(EmbedInput::image("mock:attr0=val0")).tokens == 1);
}

TEST_CASE("mock VLM extraction and captions") {
  auto w = generate_world(small(10, 0.0));
  MockVlm vlm(w.schema);
  Example q{"q", "mock:attr0=val2; attr1=val1; attr2=val3; attr3=val0", kWorldQuestion, "class2", {}, {}, {}, {}};

  ChatRequest req;
  req.messages = attribute_extraction_prompt(q, 3).messages();
  CHECK(classify_request(req) == RequestKind::attributes);
  auto r = vlm.complete(req);
  CHECK(r.text == "### Attributes\nattr1\nattr0\nattr2");
  CHECK(r.usage.calls == 1);
  CHECK(r.usage.completion_tokens == 5);

  MockVlm first(w.schema, {0, 64, {}, {}});
  CHECK(first.complete(req).text == "### Attributes\nattr0\nattr1\nattr2");

  ChatRequest cap;
  cap.messages = caption_prompt(q, "attr2", kDefaultCaptionSystemPrompt);
  CHECK(classify_request(cap) == RequestKind::caption);
  CHECK(vlm.complete(cap).text == "attr0=val2; attr1=val1; attr2=val0; attr3=val0");
  cap.messages = caption_prompt(q, "attr0", kDefaultCaptionSystemPrompt);
  CHECK(vlm.complete(cap).text == "attr0=val3; attr1=val1; attr2=val3; attr3=val0");
}

TEST_CASE("mock VLM answers from demonstrations") {
  auto w = generate_world(small(10, 0.0));
  MockVlmConfig cfg;
  cfg.fail_images = {"mock:attr0=val3"};
  MockVlm vlm(w.schema, cfg);
  auto ask = [&](const std::string& qimg, const std::vector<std::pair<std::string, std::string>>& demos) {
    auto req = answer_request(qimg, demos);
    CHECK(classify_request(req) == RequestKind::answer);
    return vlm.complete(req).text;
  };
  // First demo sharing the decisive value wins, even if labelled oddly.
  CHECK(ask("mock:attr0=val1; attr1=val0",
            {{"mock:attr0=val0; attr1=val0", "class0"}, {"mock:attr0=val1", "classX"}, {"mock:attr0=val1", "class1"}}) ==
        "classX");
  // Otherwise the majority, lexicographic on ties.
  CHECK(ask("mock:attr0=val2", {{"mock:attr0=val0", "class1"}, {"mock:attr0=val1", "class0"}}) == "class0");
  CHECK(ask("mock:attr0=val2", {{"mock:attr0=val0", "class1"}, {"mock:attr0=val1", "class1"},
                                {"mock:attr0=val3", "class0"}}) == "class1");
  CHECK(ask("mock:attr0=val2", {}) == "unknown");
  CHECK_THROWS_AS(ask("mock:attr0=val3", {{"mock:attr0=val3", "class3"}}), EndpointError);
}

TEST_CASE("usage accounting modes") {
  auto w = generate_world(small(10, 0.0));
  auto req = answer_request("mock:attr0=val1", {{"mock:attr0=val1", "class1"}});
  MockVlm counted(w.schema);
  auto c = counted.complete(req);
  // Three images at 64 tokens plus the words of the text parts.
  std::uint64_t words = 0;
  for (const auto& p : req.messages[0].content)
    if (p.type == ContentPart::Type::text) {
      std::istringstream in(p.value);
      for (std::string t; in >> t;) ++words;
    }
  CHECK(c.usage.prompt_tokens == words + 3 * 64);
  CHECK(c.usage.completion_tokens == 1);

  MockVlmConfig fixed;
  fixed.fixed_usage = std::map<RequestKind, MockVlmConfig::FixedSizes>{{RequestKind::answer, {1000, 7}}};
  MockVlm f(w.schema, fixed);
  CHECK(f.complete(req).usage == Usage{1000, 7, 1});
}
