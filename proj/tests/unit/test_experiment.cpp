#include <set>

#include "circles/experiment.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace circles;
using nlohmann::json;

namespace {

// Counts requests per kind before delegating.
class CountingVlm : public ChatEndpoint {
 public:
  explicit CountingVlm(std::shared_ptr<ChatEndpoint> inner) : inner_(std::move(inner)) {}
  ChatResponse complete(const ChatRequest& req) override {
    ++counts[static_cast<int>(mock::classify_request(req))];
    return inner_->complete(req);
  }
  std::string identifier() const override { return inner_->identifier(); }
  std::atomic<int> counts[3] = {0, 0, 0};
  int answers() const { return counts[2].load(); }
  int extractions() const { return counts[0].load(); }
  int captions() const { return counts[1].load(); }

 private:
  std::shared_ptr<ChatEndpoint> inner_;
};

RunConfig mock_config(Method m, std::size_t items = 128, std::size_t queries = 20) {
  RunConfig cfg;
  cfg.method = m;
  MockSpec spec;
  spec.world.num_items = items;
  spec.world.num_queries = queries;
  spec.world.seed = 1;
  cfg.mock = spec;
  cfg.concurrency = 4;
  return cfg;
}

struct Setup {
  RunConfig cfg;
  Environment env;
  std::shared_ptr<CountingVlm> vlm;
};

Setup setup(Method m, std::size_t items = 128, std::size_t queries = 20, mock::MockVlmConfig vcfg = {}) {
  Setup s;
  s.cfg = mock_config(m, items, queries);
  s.cfg.mock->vlm = vcfg;
  auto world = mock::generate_world(s.cfg.mock->world);
  s.vlm = std::make_shared<CountingVlm>(std::make_shared<mock::MockVlm>(world.schema, vcfg));
  s.env = make_environment(s.vlm, std::make_shared<mock::MockEmbedder>(world.schema), world.train_corpus(),
                           world.query_corpus());
  s.env.world = world;
  return s;
}

}  // namespace

TEST_CASE("method names") {
  for (const auto& n : method_names()) CHECK(to_string(method_from_string(n)) == n);
  CHECK(method_names().size() == 9);
  try {
    method_from_string("best");
    FAIL("expected error");
  } catch (const PreconditionError& e) {
    CHECK(std::string(e.what()).find("rices") != std::string::npos);
  }
  CHECK(uses_causal_branch(Method::circles));
  CHECK(!uses_causal_branch(Method::mmices));
}

TEST_CASE("config validation lists every problem") {
  json j = {{"method", "bogus"},
            {"budget", {{"total", 8}, {"k_corr", 12}, {"num_attributes", 0}}},
            {"generation", {{"max_tokens", "many"}}},
            {"scarcity", {{"levels", {0.0, 1.0}}}},
            {"colour", "blue"}};
  try {
    RunConfig::from_json(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const auto& p = e.problems();
    auto has = [&](const std::string& needle) {
      return std::any_of(p.begin(), p.end(), [&](const std::string& s) { return s.find(needle) != std::string::npos; });
    };
    CHECK(has("colour: unknown key"));
    CHECK(has("method: unknown method 'bogus'"));
    CHECK(has("budget.k_corr"));
    CHECK(has("budget.num_attributes"));
    CHECK(has("generation.max_tokens: wrong type"));
    CHECK(has("scarcity.levels"));
    CHECK(has("paths.corpus"));
    CHECK(p.size() >= 7);
  }
}

TEST_CASE("config round trip and fingerprint") {
  RunConfig c = mock_config(Method::circles);
  c.per_attribute_k = 16;
  c.max_failures = 3;
  c.mock->vlm.fixed_usage = std::map<mock::RequestKind, mock::MockVlmConfig::FixedSizes>{{mock::RequestKind::answer, {5, 1}}};
  auto back = RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.fingerprint() == c.fingerprint());

  RunConfig d = c;
  d.output_dir = "elsewhere";
  d.concurrency = 1;
  CHECK(d.fingerprint() == c.fingerprint());
  d.method = Method::rices;
  CHECK(d.fingerprint() != c.fingerprint());
  RunConfig e = c;
  e.seed = 1;
  CHECK(e.fingerprint() != c.fingerprint());

  CHECK(c.budget_config().k_corr == 16);
  c.method = Method::cir_only;
  CHECK(c.budget_config().k_corr == 0);
  CHECK(c.budget_config().k_causal == 32);
  c.method = Method::circles;

  auto dir = testutil::temp_dir("cfg");
  std::ofstream(dir / "c.json") << c.to_json().dump(2);
  CHECK(load_run_config(dir / "c.json").fingerprint() == c.fingerprint());
  std::ofstream(dir / "bad.json") << "{ nope";
  CHECK_THROWS_AS(load_run_config(dir / "bad.json"), ConfigError);
  CHECK_THROWS_AS(load_run_config(dir / "missing.json"), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("selection fills the budget for every method") {
  for (const auto& name : method_names()) {
    auto s = setup(method_from_string(name));
    CAPTURE(name);
    CausalMemo memo;
    for (const auto& q : s.env.queries->examples()) {
      auto sel = select_demonstrations(s.cfg, s.env, *s.env.demos, s.env.store, q, {&memo, 0});
      const std::size_t want = name == "none" ? 0 : 32;
      CHECK(sel.expected_demonstrations == want);
      CHECK(sel.ctx.demonstration_count() == want);
      auto text = render_prompt(s.cfg, sel, q, *s.env.demos).text();
      CHECK(count_demonstrations(text) == want);
      std::set<std::string> ids;
      for (const auto& id : sel.ctx.corr_block.ids()) ids.insert(id);
      for (const auto& b : sel.ctx.causal_blocks)
        for (const auto& id : b.set.ids()) ids.insert(id);
      CHECK(ids.size() == want);
    }
  }
}

TEST_CASE("causal selection trace") {
  auto s = setup(Method::circles);
  s.cfg.num_attributes = 2;
  s.cfg.k_corr = 8;
  const auto& q = s.env.queries->examples()[0];
  auto sel = select_demonstrations(s.cfg, s.env, *s.env.demos, s.env.store, q);
  CHECK(sel.attributes.size() == 2);
  CHECK(sel.attributes[1] == "attr0");  // decisive attribute ranked second
  CHECK(sel.captions.size() == 2);
  CHECK(sel.ctx.corr_block.size() == 8);
  REQUIRE(sel.ctx.causal_blocks.size() == 2);
  CHECK(sel.ctx.causal_blocks[0].set.size() + sel.ctx.causal_blocks[1].set.size() == 24);
  CHECK(sel.usage.calls == 3);
  // The caption for attr0 moves the decisive value forward by one.
  const auto& cap = sel.captions[1].intervention.caption;
  auto qa = mock::parse_description(q.image_ref);
  auto ca = mock::parse_description(cap);
  CHECK(ca[0].second != qa[0].second);
  CHECK(ca[1].second == qa[1].second);
}

TEST_CASE("extraction failure degrades to correlational retrieval") {
  // Every reply lacks the attribute section.
  auto world = mock::generate_world(mock_config(Method::circles).mock->world);
  auto vlm = std::make_shared<testutil::ScriptedVlm>(std::vector<std::string>{"no idea"});
  auto env = make_environment(vlm, std::make_shared<mock::MockEmbedder>(world.schema), world.train_corpus(),
                              world.query_corpus());
  RunConfig cfg = mock_config(Method::circles);
  const auto& q = env.queries->examples()[0];
  auto sel = select_demonstrations(cfg, env, *env.demos, env.store, q);
  CHECK(!sel.attribute_error.empty());
  CHECK(sel.ctx.causal_blocks.empty());
  CHECK(sel.ctx.corr_block.size() == 32);
  CHECK(sel.usage.calls == 2);
}

TEST_CASE("run writes artifacts and resumes without new answer calls") {
  auto s = setup(Method::circles, 128, 12);
  auto dir = testutil::temp_dir("run");
  auto rep = run_experiment(s.cfg, s.env, {dir});
  CHECK(rep.rows.size() == 12);
  CHECK(rep.aggregates.failures == 0);
  for (std::size_t i = 1; i < rep.rows.size(); ++i) CHECK(rep.rows[i - 1].id < rep.rows[i].id);
  for (const char* f : {"report.jsonl", "aggregates.csv", "run_log.jsonl", "manifest.json"})
    CHECK(std::filesystem::exists(dir / f));
  CHECK(s.vlm->answers() == 12);
  CHECK(s.vlm->extractions() == 12);

  const auto first = testutil::slurp(dir / "report.jsonl");
  const auto first_log = testutil::slurp(dir / "run_log.jsonl");
  auto again = run_experiment(s.cfg, s.env, {dir});
  CHECK(s.vlm->answers() == 12);
  CHECK(testutil::slurp(dir / "report.jsonl") == first);
  CHECK(testutil::slurp(dir / "run_log.jsonl") == first_log);
  CHECK(aggregates_csv({again}) == aggregates_csv({rep}));

  // A different configuration does not reuse rows.
  RunConfig other = s.cfg;
  other.seed = 5;
  run_experiment(other, s.env, {dir});
  CHECK(s.vlm->answers() == 24);

  auto log_line = json::parse(first_log.substr(0, first_log.find('\n')));
  CHECK(log_line.contains("causal_pool"));
  CHECK(log_line["attributes"].size() == 1);
  auto m = json::parse(testutil::slurp(dir / "manifest.json"));
  CHECK(m["endpoints"]["chat"] == "mock-vlm");
  CHECK(m["corpus_size"] == 128);
  std::filesystem::remove_all(dir);
}

TEST_CASE("failed queries are reported and excluded") {
  auto world = mock::generate_world(mock_config(Method::rices, 128, 50).mock->world);
  mock::MockVlmConfig vcfg;
  // Two query images that no other query shares.
  std::map<std::string, int> uses;
  for (const auto& q : world.queries) ++uses[world.to_example(q).image_ref];
  for (const auto& q : world.queries) {
    const auto ref = world.to_example(q).image_ref;
    if (uses[ref] == 1 && vcfg.fail_images.size() < 2) vcfg.fail_images.insert(ref);
  }
  REQUIRE(vcfg.fail_images.size() == 2);
  auto s = setup(Method::rices, 128, 50, vcfg);
  auto dir = testutil::temp_dir("fail");
  auto rep = run_experiment(s.cfg, s.env, {dir});
  CHECK(rep.aggregates.failures == 2);
  CHECK(rep.aggregates.queries == 48);
  std::size_t failed = 0;
  for (const auto& r : rep.rows)
    if (!r.ok) {
      ++failed;
      CHECK(r.error.find("injected failure") != std::string::npos);
    }
  CHECK(failed == 2);
  auto text = testutil::slurp(dir / "report.jsonl");
  CHECK(text.find("\"prediction\":null") != std::string::npos);

  // Failed rows are retried on resume; the others are reused.
  const int before = s.vlm->answers();
  run_experiment(s.cfg, s.env, {dir});
  CHECK(s.vlm->answers() == before + 2);
  std::filesystem::remove_all(dir);
}

TEST_CASE("report recomputation is byte-identical") {
  auto s = setup(Method::muier, 96, 15);
  auto dir = testutil::temp_dir("report");
  auto rep = run_experiment(s.cfg, s.env, {dir});
  const auto text = testutil::slurp(dir / "report.jsonl");
  auto parsed = parse_report_jsonl(text);
  CHECK(report_jsonl(parsed) == text);
  CHECK(aggregates_csv({parsed}) == testutil::slurp(dir / "aggregates.csv"));
  CHECK(aggregates_csv({read_report(dir / "report.jsonl")}) == aggregates_csv({rep}));
  CHECK_THROWS_AS(parse_report_jsonl("{\"kind\":\"row\"}\n"), std::exception);
  CHECK_THROWS_AS(parse_report_jsonl(""), CorpusError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("aggregates by hand") {
  std::vector<QueryRow> rows(4);
  rows[0] = {"a", true, "class0", "class0", 1, 1.0, {100, 1, 1}, 2, 2, false, false, {}, ""};
  rows[1] = {"b", true, "class1", "class0", 0, 0.0, {300, 1, 1}, 2, 2, false, false, {}, ""};
  rows[2] = {"c", true, "class1", "class1", 1, 1.0, {200, 1, 1}, 2, 2, false, false, {}, ""};
  rows[3] = {"d", false, "", "class1", 0, 0.0, {}, 0, 2, false, false, {}, "down"};
  auto a = compute_aggregates(rows, TaskKind::classification, {"class0", "class1"});
  CHECK(a.queries == 3);
  CHECK(a.failures == 1);
  CHECK(a.accuracy == doctest::Approx(2.0 / 3.0));
  // Per class F1: class0 p=1 r=.5 -> 2/3 (support 2); class1 p=.5 r=1 -> 2/3 (support 1).
  CHECK(a.weighted_f1 == doctest::Approx(2.0 / 3.0));
  CHECK(a.usage.mean_prompt_tokens == doctest::Approx(200));

  MetricReport r1, r2;
  r1.aggregates.accuracy = 0.5;
  r2.task = TaskKind::open_vqa;
  r2.aggregates.em_mean = 0.25;
  r2.aggregates.accuracy = 0.9;
  CHECK(summary_average({r1, r2}) == doctest::Approx(37.5));
  r1.method = "rices";
  r1.level = 0.25;
  r1.aggregates = a;
  CHECK(aggregates_csv_line(r1) ==
        "rices,0.2500,3,1,66.6667,66.6667,66.6667,66.6667,200.0000,1.0000,201.0000,1.0000");
}

TEST_CASE("scarcity sweep reuses attributes across levels") {
  auto s = setup(Method::circles, 128, 10);
  s.cfg.scarcity_levels = {0.0, 0.5};
  auto dir = testutil::temp_dir("sweep");
  auto reps = scarcity_sweep(s.cfg, s.env, dir);
  REQUIRE(reps.size() == 4);
  CHECK(reps[0].method == "rices");
  CHECK(reps[3].method == "circles");
  CHECK(reps[3].level == 0.5);
  CHECK(s.vlm->extractions() == 10);
  CHECK(s.vlm->captions() == 10);
  CHECK(s.vlm->answers() == 40);
  CHECK(std::filesystem::exists(dir / "level_0.5000" / "circles" / "report.jsonl"));
  auto csv = testutil::slurp(dir / "sweep.csv");
  CHECK(csv.rfind(kAggregatesHeader, 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  auto m = json::parse(testutil::slurp(dir / "level_0.5000" / "rices" / "manifest.json"));
  CHECK(m["demonstration_corpus_size"] == 64);
  std::filesystem::remove_all(dir);
}

TEST_CASE("budget grid") {
  auto s = setup(Method::circles, 128, 6);
  s.cfg.grid_attributes = {1, 3};
  s.cfg.grid_cir = {4, 8};
  auto dir = testutil::temp_dir("grid");
  auto g = budget_grid(s.cfg, s.env, dir);
  REQUIRE(g.cells.size() == 2);
  REQUIRE(g.cells[0].size() == 2);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (const auto& r : g.cells[i][j].rows) {
        CHECK(r.demonstrations == 16 + g.cir[j]);
        CHECK(r.expected_demonstrations == 16 + g.cir[j]);
      }
  // One extraction per query, shared by every cell.
  CHECK(s.vlm->extractions() == 6);
  auto csv = testutil::slurp(dir / "grid.csv");
  CHECK(csv.rfind("attributes,cir_4,cir_8\n1,", 0) == 0);
  CHECK(std::filesystem::exists(dir / "attrs_3_cir_8" / "report.jsonl"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("repeats vary the seed") {
  auto s = setup(Method::random, 64, 8);
  s.cfg.repeats = 3;
  auto dir = testutil::temp_dir("rep");
  auto reps = run_repeats(s.cfg, s.env, dir);
  CHECK(reps.size() == 3);
  CHECK(reps[0].fingerprint != reps[1].fingerprint);
  auto csv = testutil::slurp(dir / "repeats.csv");
  CHECK(csv.find("\nmean,,") != std::string::npos);
  CHECK(csv.find("\nstd,,") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("manifest never carries credentials") {
  ::setenv("CIRCLES_CHAT_API_KEY", "sk-top-secret", 1);
  RunConfig cfg;
  cfg.corpus_path = "c.jsonl";
  cfg.queries_path = "q.jsonl";
  cfg.chat = {"http://127.0.0.1:9/v1", "vlm"};
  Environment env;
  env.vlm = std::make_shared<HttpChatClient>(EndpointConfig::from_env("CHAT"));
  auto text = manifest(cfg, env).dump();
  CHECK(text.find("sk-top-secret") == std::string::npos);
  CHECK(text.find("http://127.0.0.1:9/v1") != std::string::npos);
  ::unsetenv("CIRCLES_CHAT_API_KEY");
}
