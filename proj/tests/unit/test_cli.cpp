#include <sstream>

#include "circles/cli.hpp"
#include "circles/experiment.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace circles;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST_CASE("invalid method names the valid ones") {
  auto r = cli({"run", "--mock", "--method", "best"});
  CHECK(r.code == 1);
  const auto all = r.out + r.err;
  CHECK(all.find("circles") != std::string::npos);
  CHECK(all.find("mmices") != std::string::npos);
}

TEST_CASE("version and missing subcommand") {
  auto v = cli({"--version"});
  CHECK(v.code == 0);
  CHECK(v.out.find("0.1.0") != std::string::npos);
  CHECK(cli({}).code == 1);
}

TEST_CASE("config problems are all listed") {
  auto dir = testutil::temp_dir("cli-cfg");
  std::ofstream(dir / "c.json") << R"({"budget":{"total":4,"k_corr":9},"repeats":0,"extra":1})";
  auto r = cli({"run", "--config", (dir / "c.json").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("budget.k_corr") != std::string::npos);
  CHECK(r.err.find("repeats") != std::string::npos);
  CHECK(r.err.find("extra: unknown key") != std::string::npos);
  CHECK(r.err.find("paths.corpus") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("flags override the config file") {
  auto dir = testutil::temp_dir("cli-prec");
  json cfg = {{"method", "random"},
              {"mock", {{"world", {{"num_items", 64}, {"num_queries", 4}}}}},
              {"paths", {{"output_dir", (dir / "from_file").string()}}}};
  std::ofstream(dir / "c.json") << cfg.dump();
  auto r = cli({"run", "--config", (dir / "c.json").string(), "--method", "rices", "--out", (dir / "o").string()});
  CHECK(r.code == 0);
  CHECK(r.out.rfind(kAggregatesHeader, 0) == 0);
  CHECK(r.out.find("\nrices,0.0000,4,0,") != std::string::npos);
  CHECK(std::filesystem::exists(dir / "o" / "report.jsonl"));
  CHECK(!std::filesystem::exists(dir / "from_file"));
  auto m = json::parse(testutil::slurp(dir / "o" / "manifest.json"));
  CHECK(m["config"]["method"] == "rices");
  CHECK(m["config"]["mock"]["world"]["num_items"] == 64);
  std::filesystem::remove_all(dir);
}

TEST_CASE("mock-world, render, retrieve and report") {
  auto dir = testutil::temp_dir("cli-world");
  auto w = cli({"mock-world", "--dir", (dir / "world").string(), "--world-items", "40", "--world-queries", "3"});
  CHECK(w.code == 0);
  auto train = load_corpus(dir / "world" / "train.jsonl", TaskKind::classification);
  CHECK(train.size() == 40);
  CHECK(std::filesystem::exists(dir / "world" / "schema.json"));

  auto rd = cli({"render", "--mock", "--world-items", "40", "--world-queries", "3", "--method", "circles",
                 "--query", "query-00001", "--budget", "6", "--k-corr", "3"});
  CHECK(rd.code == 0);
  CHECK(rd.out.find("Here are 3 in-context examples") != std::string::npos);
  CHECK(rd.out.find("after changing attr1") != std::string::npos);
  CHECK(count_demonstrations(rd.out) == 6);

  auto rt = cli({"retrieve", "--mock", "--world-items", "40", "--world-queries", "3", "--method", "circles",
                 "--emit", (dir / "r.jsonl").string()});
  CHECK(rt.code == 0);
  auto lines = split_lines(testutil::slurp(dir / "r.jsonl"));
  CHECK(json::parse(lines[0])["blocks"].size() == 2);
  CHECK(cli({"render", "--mock", "--query", "nope"}).code == 1);

  auto run = cli({"run", "--mock", "--world-items", "40", "--world-queries", "3", "--method", "mmices", "--out",
                  (dir / "run").string()});
  CHECK(run.code == 0);
  const auto csv = testutil::slurp(dir / "run" / "aggregates.csv");
  std::filesystem::remove(dir / "run" / "aggregates.csv");
  auto rep = cli({"report", (dir / "run" / "report.jsonl").string()});
  CHECK(rep.code == 0);
  CHECK(testutil::slurp(dir / "run" / "aggregates.csv") == csv);
  CHECK(rep.out == csv);
  std::filesystem::remove_all(dir);
}

TEST_CASE("failure tally above the limit exits with 2") {
  auto dir = testutil::temp_dir("cli-fail");
  // Every answer fails because the mock lists every query image.
  auto world = mock::generate_world([] {
    mock::WorldConfig c;
    c.num_items = 30;
    c.num_queries = 4;
    return c;
  }());
  json fail = json::array();
  for (const auto& q : world.queries) fail.push_back(world.to_example(q).image_ref);
  json cfg = {{"method", "rices"},
              {"max_failures", 1},
              {"mock", {{"world", world.config.to_json()}, {"vlm", {{"fail_images", fail}}}}},
              {"paths", {{"output_dir", (dir / "o").string()}}}};
  std::ofstream(dir / "c.json") << cfg.dump();
  auto r = cli({"run", "--config", (dir / "c.json").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("exceeds --max-failures 1") != std::string::npos);
  CHECK(cli({"run", "--config", (dir / "c.json").string(), "--max-failures", "10"}).code == 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("sweep and grid subcommands") {
  auto dir = testutil::temp_dir("cli-sweep");
  auto s = cli({"sweep-scarcity", "--mock", "--world-items", "64", "--world-queries", "3", "--levels", "0,0.5",
                "--methods", "rices,circles", "--out", (dir / "s").string()});
  CHECK(s.code == 0);
  CHECK(std::count(s.out.begin(), s.out.end(), '\n') == 5);
  CHECK(std::filesystem::exists(dir / "s" / "sweep.csv"));
  auto g = cli({"grid-budget", "--mock", "--world-items", "64", "--world-queries", "3", "--grid-attributes", "1,2",
                "--grid-cir", "4", "--out", (dir / "g").string()});
  CHECK(g.code == 0);
  CHECK(g.out.rfind("attributes,cir_4\n1,", 0) == 0);
  CHECK(cli({"sweep-scarcity", "--mock", "--methods", "nope"}).code == 1);
  std::filesystem::remove_all(dir);
}
