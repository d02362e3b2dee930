#include "circles/cli.hpp"

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "circles/common.hpp"
#include "circles/config.hpp"
#include "circles/experiment.hpp"
#include "circles/mockworld.hpp"

namespace circles {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Flags shared by every subcommand that builds a RunConfig. Only flags the
// user actually passed override the config file.
struct RunFlags {
  std::string config;
  std::string method, task, scorer, attribute_source, corpus, queries, cache, out, question_template;
  std::string chat_url, chat_model, embed_url, embed_model;
  std::size_t budget = 0, k_corr = 0, num_attributes = 0, per_attribute_k = 0, mmices_pool = 0;
  std::size_t max_tokens = 0, num_generations = 0, repeats = 0, concurrency = 0, max_failures = 0;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  bool no_exclude_self = false, ascending = false, mock = false;
  std::size_t world_items = 0, world_queries = 0, world_attributes = 0, world_values = 0, world_confounders = 0;
  std::size_t decisive_rank = 0;
  double world_strength = 0.0;
  std::uint64_t world_seed = 0;
  std::vector<double> levels;
  std::vector<std::string> sweep_methods;
  std::vector<std::size_t> grid_attrs, grid_cir;

  std::vector<CLI::Option*> opts;
};

CLI::Option* find(CLI::App* app, const std::string& name) { return app->get_option_no_throw(name); }

bool given(CLI::App* app, const std::string& name) {
  auto* o = find(app, name);
  return o && o->count() > 0;
}

void add_run_flags(CLI::App* app, RunFlags& f) {
  app->add_option("--config", f.config, "JSON run configuration; flags override its keys")->check(CLI::ExistingFile);
  app->add_option("--method", f.method, "Demonstration selection method")->check(CLI::IsMember(method_names()));
  app->add_option("--task", f.task, "classification or open_vqa")->check(CLI::IsMember({"classification", "open_vqa"}));
  app->add_option("--scorer", f.scorer, "Correlational similarity")
      ->check(CLI::IsMember({"img_img", "img_img+img_txt", "img_img+txt_txt"}));
  app->add_option("--attribute-source", f.attribute_source, "vlm or dataset")->check(CLI::IsMember({"vlm", "dataset"}));
  app->add_option("--budget", f.budget, "Total demonstrations per prompt");
  app->add_option("--k-corr", f.k_corr, "Correlational demonstrations");
  app->add_option("--num-attributes", f.num_attributes, "Attributes intervened on");
  app->add_option("--per-attribute-k", f.per_attribute_k, "Counterfactual retrievals per attribute");
  app->add_option("--mmices-pool", f.mmices_pool, "MMICES first-stage pool size");
  app->add_option("--temperature", f.temperature);
  app->add_option("--max-tokens", f.max_tokens);
  app->add_option("--num-generations", f.num_generations, "Self-consistency samples");
  app->add_option("--seed", f.seed);
  app->add_flag("--no-exclude-self", f.no_exclude_self, "Allow the query itself as a demonstration");
  app->add_flag("--ascending", f.ascending, "Least similar demonstration first within a block");
  app->add_option("--repeats", f.repeats);
  app->add_option("--concurrency", f.concurrency);
  app->add_option("--max-failures", f.max_failures, "Exit with code 2 above this many failed queries");
  app->add_option("--corpus", f.corpus, "Demonstration corpus (JSONL)");
  app->add_option("--queries", f.queries, "Query set (JSONL)");
  app->add_option("--cache", f.cache, "Embedding cache file");
  app->add_option("--out", f.out, "Output directory");
  app->add_option("--template", f.question_template, "Classification question template");
  app->add_option("--chat-url", f.chat_url);
  app->add_option("--chat-model", f.chat_model);
  app->add_option("--embed-url", f.embed_url);
  app->add_option("--embed-model", f.embed_model);
  app->add_flag("--mock", f.mock, "Use the in-process mock world, embedder and VLM");
  app->add_option("--world-items", f.world_items);
  app->add_option("--world-queries", f.world_queries);
  app->add_option("--world-attributes", f.world_attributes);
  app->add_option("--world-values", f.world_values);
  app->add_option("--world-strength", f.world_strength, "Confounder strength in [0, 1]");
  app->add_option("--world-confounders", f.world_confounders);
  app->add_option("--world-seed", f.world_seed);
  app->add_option("--decisive-rank", f.decisive_rank, "Position of the decisive attribute in mock extraction");
}

RunConfig build_config(CLI::App* app, const RunFlags& f) {
  json j = json::object();
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError({f.config + ": " + e.what()});
    }
  }
  auto set = [&](const std::string& flag, auto&& apply) {
    if (given(app, flag)) apply();
  };
  auto sub = [&](const char* key) -> json& {
    if (!j.contains(key) || !j[key].is_object()) j[key] = json::object();
    return j[key];
  };
  set("--method", [&] { j["method"] = f.method; });
  set("--task", [&] { j["task"] = f.task; });
  set("--scorer", [&] { j["scorer"] = f.scorer; });
  set("--attribute-source", [&] { j["attribute_source"] = f.attribute_source; });
  set("--budget", [&] { sub("budget")["total"] = f.budget; });
  set("--k-corr", [&] { sub("budget")["k_corr"] = f.k_corr; });
  set("--num-attributes", [&] { sub("budget")["num_attributes"] = f.num_attributes; });
  set("--per-attribute-k", [&] { sub("budget")["per_attribute_k"] = f.per_attribute_k; });
  set("--mmices-pool", [&] { j["mmices_pool"] = f.mmices_pool; });
  set("--temperature", [&] { sub("generation")["temperature"] = f.temperature; });
  set("--max-tokens", [&] { sub("generation")["max_tokens"] = f.max_tokens; });
  set("--num-generations", [&] { sub("generation")["num_generations"] = f.num_generations; });
  set("--seed", [&] { j["seed"] = f.seed; });
  if (f.no_exclude_self) j["exclude_self"] = false;
  if (f.ascending) j["ascending"] = true;
  set("--repeats", [&] { j["repeats"] = f.repeats; });
  set("--concurrency", [&] { j["concurrency"] = f.concurrency; });
  set("--max-failures", [&] { j["max_failures"] = f.max_failures; });
  set("--corpus", [&] { sub("paths")["corpus"] = f.corpus; });
  set("--queries", [&] { sub("paths")["queries"] = f.queries; });
  set("--cache", [&] { sub("paths")["cache"] = f.cache; });
  set("--out", [&] { sub("paths")["output_dir"] = f.out; });
  set("--template", [&] { j["question_template"] = f.question_template; });
  auto endpoint = [&](const char* which) -> json& {
    auto& e = sub("endpoints");
    if (!e.contains(which) || !e[which].is_object()) e[which] = json::object();
    return e[which];
  };
  set("--chat-url", [&] { endpoint("chat")["url"] = f.chat_url; });
  set("--chat-model", [&] { endpoint("chat")["model"] = f.chat_model; });
  set("--embed-url", [&] { endpoint("embed")["url"] = f.embed_url; });
  set("--embed-model", [&] { endpoint("embed")["model"] = f.embed_model; });

  const bool world_flag = given(app, "--world-items") || given(app, "--world-queries") ||
                          given(app, "--world-attributes") || given(app, "--world-values") ||
                          given(app, "--world-strength") || given(app, "--world-confounders") ||
                          given(app, "--world-seed") || given(app, "--decisive-rank");
  if (f.mock || world_flag) {
    auto& m = sub("mock");
    if (!m.contains("world") || !m["world"].is_object()) m["world"] = json::object();
    if (!m.contains("vlm") || !m["vlm"].is_object()) m["vlm"] = json::object();
    auto& w = m["world"];
    set("--world-items", [&] { w["num_items"] = f.world_items; });
    set("--world-queries", [&] { w["num_queries"] = f.world_queries; });
    set("--world-attributes", [&] { w["num_attributes"] = f.world_attributes; });
    set("--world-values", [&] { w["num_values"] = f.world_values; });
    set("--world-strength", [&] { w["confounder_strength"] = f.world_strength; });
    set("--world-confounders", [&] { w["num_confounders"] = f.world_confounders; });
    set("--world-seed", [&] { w["seed"] = f.world_seed; });
    set("--decisive-rank", [&] { m["vlm"]["decisive_rank"] = f.decisive_rank; });
  }
  set("--levels", [&] { sub("scarcity")["levels"] = f.levels; });
  set("--methods", [&] { sub("scarcity")["methods"] = f.sweep_methods; });
  set("--grid-attributes", [&] { sub("grid")["attributes"] = f.grid_attrs; });
  set("--grid-cir", [&] { sub("grid")["cir"] = f.grid_cir; });
  return RunConfig::from_json(j);
}

int exit_for(const RunConfig& cfg, const std::vector<MetricReport>& reports, std::ostream& err) {
  std::size_t failures = 0;
  for (const auto& r : reports) failures += r.aggregates.failures;
  if (cfg.max_failures && failures > *cfg.max_failures) {
    err << "failure tally " << failures << " exceeds --max-failures " << *cfg.max_failures << "\n";
    return 2;
  }
  return 0;
}

void write_or_print(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-")
    out << text;
  else
    write_text(path, text);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Retrieval-augmented visual in-context learning with counterfactual demonstrations", "circles"};
  app.require_subcommand(1);
  app.set_version_flag("--version", CIRCLES_VERSION);

  RunFlags f;
  std::string emit_path;
  std::string query_id;

  auto* embed = app.add_subcommand("embed", "Build the embedding cache for a corpus");
  add_run_flags(embed, f);

  auto* retrieve = app.add_subcommand("retrieve", "Emit the retrieved demonstrations per query (JSONL)");
  add_run_flags(retrieve, f);
  retrieve->add_option("--emit", emit_path, "Output file (default stdout)");
  retrieve->add_option("--query", query_id, "Only this query id");

  auto* render = app.add_subcommand("render", "Emit the rendered prompt per query");
  add_run_flags(render, f);
  render->add_option("--emit", emit_path, "Output file (default stdout)");
  render->add_option("--query", query_id, "Only this query id; prints plain text");

  auto* run = app.add_subcommand("run", "Evaluate one method over the query set");
  add_run_flags(run, f);

  auto* sweep = app.add_subcommand("sweep-scarcity", "Evaluate methods over shrinking demonstration corpora");
  add_run_flags(sweep, f);
  sweep->add_option("--levels", f.levels, "Removed fractions, e.g. 0,0.25,0.5,0.75")->delimiter(',');
  sweep->add_option("--methods", f.sweep_methods, "Methods to compare")
      ->delimiter(',')
      ->check(CLI::IsMember(method_names()));

  auto* grid = app.add_subcommand("grid-budget", "Sweep (#attributes, #CIR) with #IR fixed");
  add_run_flags(grid, f);
  grid->add_option("--grid-attributes", f.grid_attrs)->delimiter(',');
  grid->add_option("--grid-cir", f.grid_cir)->delimiter(',');

  std::string host = "127.0.0.1";
  int port = 8089;
  auto* serve = app.add_subcommand("mock-serve", "Serve the mock embedder and VLM over HTTP");
  add_run_flags(serve, f);
  serve->add_option("--host", host);
  serve->add_option("--port", port);

  std::string world_dir;
  auto* world_cmd = app.add_subcommand("mock-world", "Write the mock world corpora as JSONL");
  add_run_flags(world_cmd, f);
  world_cmd->add_option("--dir", world_dir, "Output directory")->required();

  std::string report_path, csv_path;
  auto* report = app.add_subcommand("report", "Recompute aggregates.csv from report.jsonl rows");
  report->add_option("report", report_path, "report.jsonl")->required()->check(CLI::ExistingFile);
  report->add_option("--csv", csv_path, "Output CSV (default: aggregates.csv next to the report)");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : 1;
  }

  try {
    if (report->parsed()) {
      const auto rep = read_report(report_path);
      const std::string path = csv_path.empty() ? (fs::path(report_path).parent_path() / "aggregates.csv").string()
                                                : csv_path;
      const std::string text = aggregates_csv({rep});
      write_text(path, text);
      out << text;
      return 0;
    }

    CLI::App* active = nullptr;
    for (auto* sc : {embed, retrieve, render, run, sweep, grid, serve, world_cmd})
      if (sc->parsed()) active = sc;
    RunConfig cfg = build_config(active, f);

    if (serve->parsed()) {
      if (!cfg.mock) cfg.mock = MockSpec{};
      auto world = mock::generate_world(cfg.mock->world);
      mock::MockServer server(world.schema, cfg.mock->vlm);
      out << "serving mock endpoints on http://" << host << ":" << port << "/v1" << std::endl;
      server.serve_forever(host, port);
      return 0;
    }
    if (world_cmd->parsed()) {
      if (!cfg.mock) cfg.mock = MockSpec{};
      auto world = mock::generate_world(cfg.mock->world);
      write_text(fs::path(world_dir) / "train.jsonl", serialize_corpus(world.train_corpus()));
      write_text(fs::path(world_dir) / "queries.jsonl", serialize_corpus(world.query_corpus()));
      write_text(fs::path(world_dir) / "schema.json", world.schema.to_json().dump(2) + "\n");
      out << "wrote " << world.train.size() << " train and " << world.queries.size() << " query items to "
          << world_dir << "\n";
      return 0;
    }

    Environment env = make_environment(cfg);
    for (const auto& fail : env.embed_failures)
      err << "embedding failed for " << fail.id << " (" << to_string(fail.kind) << "): " << fail.cause << "\n";

    if (embed->parsed()) {
      out << "embedded " << env.store.count(EmbeddingKind::image) << " images and "
          << env.store.count(EmbeddingKind::question) << " questions (dim " << env.store.dim() << ")";
      if (!cfg.cache_path.empty()) out << " into " << cfg.cache_path;
      out << "\n";
      return env.embed_failures.empty() ? 0 : 1;
    }

    if (retrieve->parsed() || render->parsed()) {
      CausalMemo memo;
      std::string text;
      for (const auto& q : env.queries->examples()) {
        if (!query_id.empty() && q.id != query_id) continue;
        const Selection sel = select_demonstrations(cfg, env, *env.demos, env.store, q, {&memo, 0});
        if (retrieve->parsed()) {
          json blocks = json::array();
          if (!sel.ctx.corr_block.empty()) blocks.push_back(to_json(sel.ctx.corr_block));
          for (const auto& b : sel.ctx.causal_blocks) {
            json jb = to_json(b.set);
            jb["caption"] = b.caption;
            blocks.push_back(std::move(jb));
          }
          text += json{{"id", q.id}, {"method", to_string(cfg.method)}, {"attributes", sel.attributes}, {"blocks", blocks}}
                      .dump() +
                  "\n";
        } else {
          const auto prompt = render_prompt(cfg, sel, q, *env.demos).text();
          if (!query_id.empty())
            text += prompt + "\n";
          else
            text += json{{"id", q.id}, {"prompt", prompt}}.dump() + "\n";
        }
      }
      if (!query_id.empty() && text.empty()) throw PreconditionError("no query with id '" + query_id + "'");
      write_or_print(emit_path, text, out);
      return 0;
    }

    const fs::path dir = cfg.output_dir;
    if (run->parsed()) {
      std::vector<MetricReport> reports;
      if (cfg.repeats > 1)
        reports = run_repeats(cfg, env, dir);
      else
        reports.push_back(run_experiment(cfg, env, {dir}));
      out << aggregates_csv(reports);
      return exit_for(cfg, reports, err);
    }
    if (sweep->parsed()) {
      const auto reports = scarcity_sweep(cfg, env, dir);
      out << aggregates_csv(reports);
      return exit_for(cfg, reports, err);
    }
    if (grid->parsed()) {
      const auto g = budget_grid(cfg, env, dir);
      out << grid_csv(g);
      std::vector<MetricReport> all;
      for (const auto& row : g.cells) all.insert(all.end(), row.begin(), row.end());
      return exit_for(cfg, all, err);
    }
  } catch (const ConfigError& e) {
    err << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace circles
