#include "circles/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "circles/common.hpp"
#include "circles/metrics.hpp"

#ifndef CIRCLES_VERSION
#define CIRCLES_VERSION "0.0.0"
#endif

namespace circles {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Environment

Environment make_environment(std::shared_ptr<ChatEndpoint> vlm, std::shared_ptr<Embedder> embedder, Corpus demos,
                             Corpus queries, std::size_t concurrency) {
  Environment env;
  env.vlm = std::move(vlm);
  env.embedder = std::move(embedder);
  auto d = build_cache(demos, *env.embedder, std::nullopt, {concurrency});
  auto q = build_cache(queries, *env.embedder, std::nullopt, {concurrency});
  env.store = std::move(d.store);
  env.query_store = std::move(q.store);
  env.embed_failures = std::move(d.failures);
  env.embed_failures.insert(env.embed_failures.end(), q.failures.begin(), q.failures.end());
  env.demos = std::make_shared<const Corpus>(std::move(demos));
  env.queries = std::make_shared<const Corpus>(std::move(queries));
  env.text_cache = std::make_shared<TextEmbeddingCache>(*env.embedder, env.store.dim());
  return env;
}

namespace {

EndpointConfig endpoint_from(const EndpointSpec& spec, const std::string& prefix) {
  EndpointConfig cfg = EndpointConfig::from_env(prefix);
  if (!spec.url.empty()) cfg.url = spec.url;
  if (!spec.model.empty()) cfg.model = spec.model;
  return cfg;
}

}  // namespace

Environment make_environment(const RunConfig& cfg) {
  cfg.validate();
  if (cfg.mock) {
    auto world = mock::generate_world(cfg.mock->world);
    auto embedder = std::make_shared<mock::MockEmbedder>(world.schema);
    auto vlm = std::make_shared<mock::MockVlm>(world.schema, cfg.mock->vlm);
    Environment env = make_environment(vlm, embedder, world.train_corpus(), world.query_corpus(), cfg.concurrency);
    env.world = std::move(world);
    return env;
  }

  Environment env;
  auto chat = std::make_shared<HttpChatClient>(endpoint_from(cfg.chat, "CHAT"));
  if (const char* log = std::getenv("CIRCLES_EXCHANGE_LOG"); log && *log) chat->set_exchange_log(log);
  env.vlm = chat;
  env.embedder = std::make_shared<HttpEmbedder>(endpoint_from(cfg.embed, "EMBED"));
  auto demos = load_corpus(cfg.corpus_path, cfg.task, cfg.question_template);
  auto queries = load_corpus(cfg.queries_path, cfg.task, cfg.question_template);
  std::optional<fs::path> demo_cache, query_cache;
  if (!cfg.cache_path.empty()) {
    demo_cache = cfg.cache_path;
    query_cache = cfg.cache_path + ".queries";
  }
  auto d = build_cache(demos, *env.embedder, demo_cache, {cfg.concurrency});
  auto q = build_cache(queries, *env.embedder, query_cache, {cfg.concurrency});
  env.store = std::move(d.store);
  env.query_store = std::move(q.store);
  env.embed_failures = std::move(d.failures);
  env.embed_failures.insert(env.embed_failures.end(), q.failures.begin(), q.failures.end());
  env.demos = std::make_shared<const Corpus>(std::move(demos));
  env.queries = std::make_shared<const Corpus>(std::move(queries));
  env.text_cache = std::make_shared<TextEmbeddingCache>(*env.embedder, env.store.dim());
  return env;
}

// ---------------------------------------------------------------------------
// Memo

CausalMemo::Extraction CausalMemo::extraction(const std::string& query_id, std::size_t n,
                                              const std::function<Extraction()>& compute) {
  const auto key = std::make_pair(query_id, n);
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (auto it = extractions_.find(key); it != extractions_.end()) return it->second;
  }
  Extraction e = compute();
  std::lock_guard<std::mutex> lock(mu_);
  auto [it, fresh] = extractions_.emplace(key, std::move(e));
  if (fresh) ++extraction_calls_;
  return it->second;
}

CaptionResult CausalMemo::caption(const std::string& query_id, const std::string& attribute,
                                  const std::function<CaptionResult()>& compute) {
  const auto key = std::make_pair(query_id, attribute);
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (auto it = captions_.find(key); it != captions_.end()) return it->second;
  }
  CaptionResult c = compute();
  std::lock_guard<std::mutex> lock(mu_);
  auto [it, fresh] = captions_.emplace(key, std::move(c));
  if (fresh) ++caption_calls_;
  return it->second;
}

std::size_t CausalMemo::extraction_calls() const {
  std::lock_guard<std::mutex> lock(mu_);
  return extraction_calls_;
}

std::size_t CausalMemo::caption_calls() const {
  std::lock_guard<std::mutex> lock(mu_);
  return caption_calls_;
}

// ---------------------------------------------------------------------------
// Selection

namespace {

std::uint64_t query_seed(std::uint64_t seed, const std::string& id) {
  return std::stoull(sha256_hex(std::to_string(seed) + ":" + id).substr(0, 16), nullptr, 16);
}

RetrievalSet correlational(const RunConfig& cfg, const QueryVectors& qv, const EmbeddingStore& store, std::size_t k,
                           const RetrievalOptions& ro, std::size_t available) {
  if (k == 0 || available == 0) return {};
  return scorer_variant(qv, store, k, cfg.scorer, ro);
}

}  // namespace

Selection select_demonstrations(const RunConfig& cfg, Environment& env, const Corpus& demos,
                                const EmbeddingStore& store, const Example& query, const SelectOptions& opts) {
  Selection sel;
  RetrievalOptions ro;
  if (cfg.exclude_self) ro.exclude.insert(query.id);

  QueryVectors qv;
  qv.image = env.query_store.at(query.id, EmbeddingKind::image);
  if (auto q = env.query_store.lookup(query.id, EmbeddingKind::question)) qv.question = *q;

  std::size_t available = 0;
  for (const auto& id : store.ids(EmbeddingKind::image))
    if (!ro.exclude.count(id)) ++available;

  auto& ctx = sel.ctx;
  ctx.ascending = cfg.ascending;
  if (demos.task_kind() == TaskKind::classification)
    ctx.options = query.options ? *query.options : env.demos->label_set();

  const std::size_t total = cfg.budget;
  const std::size_t full = std::min(total, available);
  switch (cfg.method) {
    case Method::none:
      ctx.mode = PromptMode::none;
      return sel;
    case Method::random:
      ctx.mode = PromptMode::icl;
      ctx.corr_block = random_select(store.ids(EmbeddingKind::image), full, query_seed(cfg.seed, query.id), ro);
      sel.expected_demonstrations = full;
      return sel;
    case Method::rices:
      ctx.mode = PromptMode::icl;
      ctx.corr_block = correlational(cfg, qv, store, total, ro, available);
      sel.expected_demonstrations = full;
      return sel;
    case Method::muier:
      ctx.mode = PromptMode::icl;
      if (full) ctx.corr_block = muier(qv, store, total, ro);
      sel.expected_demonstrations = full;
      return sel;
    case Method::mmices:
      ctx.mode = PromptMode::icl;
      if (full) ctx.corr_block = mmices(qv, store, total, std::max(cfg.mmices_pool, total), ro);
      sel.expected_demonstrations = full;
      return sel;
    default:
      break;
  }

  // Causal branch.
  const BudgetConfig budget = cfg.budget_config();
  const std::size_t n_request = std::max(opts.extraction_attributes, budget.num_attributes);
  CausalMemo local;
  CausalMemo& memo = opts.memo ? *opts.memo : local;
  GenerationConfig aux = cfg.generation;
  aux.num_generations = 1;

  std::vector<std::string> attributes;
  if (cfg.attribute_source == AttributeSource::dataset) {
    const auto ranked = rank_dataset_attributes(frequency_table(*env.demos), query.label(),
                                                present_attributes(query), budget.num_attributes);
    attributes = ranked.attributes;
    if (attributes.empty()) sel.attribute_error = "no annotated attribute for query '" + query.id + "'";
  } else {
    auto ex = memo.extraction(query.id, n_request, [&]() -> CausalMemo::Extraction {
      try {
        auto r = extract_attributes(*env.vlm, query, n_request, aux);
        return {std::move(r.attributes), r.usage, std::move(r.raw), {}};
      } catch (const AttributeExtractionFailed& e) {
        return {std::nullopt, e.usage(), {}, e.what()};
      }
    });
    sel.usage += ex.usage;
    if (ex.attributes) attributes = ex.attributes->attributes;
    sel.attribute_error = ex.error;
  }
  if (attributes.size() > budget.num_attributes) attributes.resize(budget.num_attributes);
  sel.attributes = attributes;

  auto degrade = [&] {
    ctx.mode = cfg.method == Method::icl_plus_attr ? PromptMode::icl_plus_attr : PromptMode::circles;
    ctx.corr_block = correlational(cfg, qv, store, total, ro, available);
    sel.expected_demonstrations = full;
    return sel;
  };
  if (cfg.method == Method::icl_plus_attr || attributes.empty()) return degrade();

  std::vector<AttributeIntervention> interventions;
  for (const auto& attr : attributes) {
    try {
      auto cap = memo.caption(query.id, attr, [&] {
        return generate_cf_caption(*env.vlm, query, attr, *env.text_cache, aux);
      });
      sel.usage += cap.usage;
      interventions.push_back(cap.intervention);
      sel.captions.push_back(std::move(cap));
    } catch (const CaptionGenerationFailed& e) {
      if (!sel.attribute_error.empty()) sel.attribute_error += "; ";
      sel.attribute_error += e.what();
    }
  }
  if (interventions.empty()) {
    sel.attributes.clear();
    return degrade();
  }

  BudgetConfig b = budget;
  b.num_attributes = interventions.size();
  if (b.per_attribute_k * b.num_attributes < b.k_causal || !cfg.per_attribute_k)
    b.per_attribute_k = std::max<std::size_t>(1, (b.k_causal + b.num_attributes - 1) / b.num_attributes);

  ctx.mode = PromptMode::circles;
  ctx.corr_block = correlational(cfg, qv, store, b.k_corr, ro, available);
  RetrievalOptions causal_ro = ro;
  for (const auto& e : ctx.corr_block.entries) causal_ro.exclude.insert(e.example_id);
  if (b.k_causal > 0 && available > ctx.corr_block.size())
    ctx.causal_blocks = build_causal_pool(interventions, qv, store, b, cfg.method != Method::circles_no_txt, causal_ro);
  sel.expected_demonstrations = full;
  return sel;
}

PromptBundle render_prompt(const RunConfig& cfg, const Selection& sel, const Example& query, const Corpus& demos) {
  (void)cfg;
  if (sel.ctx.mode == PromptMode::icl_plus_attr) return assemble_attr_only(sel.ctx, query, demos, sel.attributes);
  return assemble(sel.ctx, query, demos);
}

// ---------------------------------------------------------------------------
// Reports

Aggregates compute_aggregates(const std::vector<QueryRow>& rows, TaskKind task,
                              const std::vector<std::string>& label_set) {
  Aggregates a;
  std::vector<std::string> preds, golds;
  std::vector<Usage> usage;
  double em = 0.0, f1 = 0.0;
  for (const auto& r : rows) {
    if (!r.ok) {
      ++a.failures;
      continue;
    }
    ++a.queries;
    em += r.em;
    f1 += r.f1;
    preds.push_back(r.prediction);
    golds.push_back(r.gold);
    usage.push_back(r.usage);
  }
  if (a.queries) {
    a.em_mean = em / static_cast<double>(a.queries);
    a.f1_mean = f1 / static_cast<double>(a.queries);
  }
  if (task == TaskKind::classification) {
    const auto m = classification_metrics(preds, golds, label_set);
    a.accuracy = m.accuracy;
    a.weighted_f1 = m.weighted_f1;
  } else {
    a.accuracy = a.em_mean;
  }
  a.usage = account_tokens(usage);
  return a;
}

double summary_average(const std::vector<MetricReport>& reports) {
  if (reports.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& r : reports)
    sum += r.task == TaskKind::classification ? r.aggregates.accuracy : r.aggregates.em_mean;
  return 100.0 * sum / static_cast<double>(reports.size());
}

json to_json(const QueryRow& row) {
  json j;
  j["kind"] = "row";
  j["id"] = row.id;
  j["ok"] = row.ok;
  j["gold"] = row.gold;
  if (row.ok) {
    j["prediction"] = row.prediction;
    j["em"] = row.em;
    j["f1"] = row.f1;
    j["error"] = nullptr;
  } else {
    j["prediction"] = nullptr;
    j["em"] = nullptr;
    j["f1"] = nullptr;
    j["error"] = row.error;
  }
  j["usage"] = {{"prompt_tokens", row.usage.prompt_tokens},
                {"completion_tokens", row.usage.completion_tokens},
                {"calls", row.usage.calls}};
  j["demonstrations"] = row.demonstrations;
  j["expected_demonstrations"] = row.expected_demonstrations;
  j["tie"] = row.tie;
  j["truncated"] = row.truncated;
  j["votes"] = row.votes;
  return j;
}

QueryRow query_row_from_json(const json& j) {
  QueryRow r;
  r.id = j.at("id").get<std::string>();
  r.ok = j.at("ok").get<bool>();
  r.gold = j.value("gold", "");
  if (r.ok) {
    r.prediction = j.at("prediction").get<std::string>();
    r.em = j.at("em").get<int>();
    r.f1 = j.at("f1").get<double>();
  } else {
    r.error = j.value("error", "");
  }
  const auto& u = j.at("usage");
  r.usage = {u.at("prompt_tokens").get<std::uint64_t>(), u.at("completion_tokens").get<std::uint64_t>(),
             u.at("calls").get<std::uint64_t>()};
  r.demonstrations = j.value("demonstrations", std::size_t{0});
  r.expected_demonstrations = j.value("expected_demonstrations", std::size_t{0});
  r.tie = j.value("tie", false);
  r.truncated = j.value("truncated", false);
  r.votes = j.value("votes", std::vector<std::string>{});
  return r;
}

std::string report_jsonl(const MetricReport& report) {
  json header = {{"kind", "header"},
                 {"fingerprint", report.fingerprint},
                 {"method", report.method},
                 {"task", to_string(report.task)},
                 {"level", report.level},
                 {"label_set", report.label_set},
                 {"normalization", "lowercase, punctuation and articles removed, whitespace collapsed"}};
  std::string out = header.dump() + "\n";
  for (const auto& r : report.rows) out += to_json(r).dump() + "\n";
  return out;
}

MetricReport parse_report_jsonl(const std::string& text) {
  MetricReport rep;
  bool have_header = false;
  std::size_t line_no = 0;
  for (const auto& line : split_lines(text)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw CorpusError(line_no, std::string("malformed report line: ") + e.what());
    }
    const auto kind = j.value("kind", "");
    if (kind == "header") {
      rep.fingerprint = j.at("fingerprint").get<std::string>();
      rep.method = j.at("method").get<std::string>();
      rep.task = task_kind_from_string(j.at("task").get<std::string>());
      rep.level = j.value("level", 0.0);
      rep.label_set = j.value("label_set", std::vector<std::string>{});
      have_header = true;
    } else if (kind == "row") {
      rep.rows.push_back(query_row_from_json(j));
    } else {
      throw CorpusError(line_no, "unknown report line kind '" + kind + "'");
    }
  }
  if (!have_header) throw CorpusError(0, "report has no header line");
  rep.aggregates = compute_aggregates(rep.rows, rep.task, rep.label_set);
  return rep;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << content;
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

MetricReport read_report(const fs::path& path) { return parse_report_jsonl(read_text(path)); }

namespace {

std::string fmt4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

std::string aggregates_csv_line(const MetricReport& r) {
  const auto& a = r.aggregates;
  return r.method + "," + fmt4(r.level) + "," + std::to_string(a.queries) + "," + std::to_string(a.failures) + "," +
         fmt4(100.0 * a.em_mean) + "," + fmt4(100.0 * a.f1_mean) + "," + fmt4(100.0 * a.accuracy) + "," +
         fmt4(100.0 * a.weighted_f1) + "," + fmt4(a.usage.mean_prompt_tokens) + "," +
         fmt4(a.usage.mean_completion_tokens) + "," + fmt4(a.usage.mean_total_tokens) + "," +
         fmt4(a.usage.mean_calls);
}

std::string aggregates_csv(const std::vector<MetricReport>& reports) {
  std::string out = std::string(kAggregatesHeader) + "\n";
  for (const auto& r : reports) out += aggregates_csv_line(r) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Drivers

json manifest(const RunConfig& cfg, const Environment& env) {
  json m;
  m["fingerprint"] = cfg.fingerprint();
  m["config"] = cfg.to_json();
  m["version"] = CIRCLES_VERSION;
  m["endpoints"] = {{"chat", env.vlm ? env.vlm->identifier() : ""},
                    {"embed", env.embedder ? env.embedder->identifier() : ""}};
  m["corpus_size"] = env.demos ? env.demos->size() : 0;
  m["queries"] = env.queries ? env.queries->size() : 0;
  m["embedding_dim"] = env.store.dim();
  m["embed_failures"] = env.embed_failures.size();
  return m;
}

namespace {

struct Outcome {
  QueryRow row;
  json log;
};

json selection_log(const Selection& sel) {
  json blocks = json::array();
  if (!sel.ctx.corr_block.empty()) blocks.push_back(to_json(sel.ctx.corr_block));
  for (const auto& b : sel.ctx.causal_blocks) {
    json jb = to_json(b.set);
    jb["attribute"] = b.attribute;
    jb["caption"] = b.caption;
    blocks.push_back(std::move(jb));
  }
  json interventions = json::array();
  for (const auto& c : sel.captions)
    interventions.push_back({{"attribute", c.intervention.attribute}, {"caption", c.intervention.caption}, {"raw", c.raw}});
  json pool = json::array();
  for (const auto& b : sel.ctx.causal_blocks)
    for (const auto& e : b.set.entries) pool.push_back(e.example_id);
  return {{"attributes", sel.attributes},
          {"attribute_error", sel.attribute_error},
          {"interventions", std::move(interventions)},
          {"blocks", std::move(blocks)},
          {"causal_pool", std::move(pool)}};
}

Outcome run_query(const RunConfig& cfg, Environment& env, const Corpus& demos, const EmbeddingStore& store,
                  const Example& query, const SelectOptions& so) {
  Outcome o;
  o.row.id = query.id;
  o.row.gold = query.label();
  o.log = {{"id", query.id}, {"method", to_string(cfg.method)}};
  try {
    const Selection sel = select_demonstrations(cfg, env, demos, store, query, so);
    o.log.update(selection_log(sel));
    const PromptBundle bundle = render_prompt(cfg, sel, query, demos);
    const InferenceResult res = generate(*env.vlm, bundle, cfg.generation);
    o.row.ok = true;
    o.row.prediction = res.answer;
    o.row.em = exact_match(res.answer, o.row.gold);
    o.row.f1 = word_f1(res.answer, o.row.gold);
    o.row.usage = sel.usage;
    o.row.usage += res.usage;
    o.row.demonstrations = count_demonstrations(bundle.text());
    o.row.expected_demonstrations = sel.expected_demonstrations;
    o.row.tie = res.tie;
    o.row.truncated = res.truncated;
    o.row.votes = res.votes;
    o.log["answer"] = res.answer;
    o.log["raw"] = res.raw_text;
    o.log["error"] = nullptr;
  } catch (const std::exception& e) {
    o.row.ok = false;
    o.row.error = e.what();
    o.log["error"] = e.what();
  }
  return o;
}

std::unordered_map<std::string, std::string> read_log_lines(const fs::path& path) {
  std::unordered_map<std::string, std::string> out;
  if (!fs::exists(path)) return out;
  for (const auto& line : split_lines(read_text(path))) {
    if (trim(line).empty()) continue;
    try {
      out[json::parse(line).at("id").get<std::string>()] = line;
    } catch (const json::exception&) {
    }
  }
  return out;
}

}  // namespace

MetricReport run_on(const RunConfig& cfg, Environment& env, const Corpus& demos, const EmbeddingStore& store,
                    const RunOptions& opts) {
  MetricReport rep;
  rep.fingerprint = cfg.fingerprint();
  rep.method = to_string(cfg.method);
  rep.task = demos.task_kind();
  rep.level = opts.level;
  if (rep.task == TaskKind::classification) rep.label_set = env.demos->label_set();

  // Resume from a previous report with the same fingerprint.
  std::unordered_map<std::string, QueryRow> done;
  std::unordered_map<std::string, std::string> old_logs;
  if (opts.output_dir && fs::exists(*opts.output_dir / "report.jsonl")) {
    try {
      auto prev = read_report(*opts.output_dir / "report.jsonl");
      if (prev.fingerprint == rep.fingerprint && prev.method == rep.method && prev.level == rep.level) {
        for (auto& r : prev.rows)
          if (r.ok) done.emplace(r.id, std::move(r));
        old_logs = read_log_lines(*opts.output_dir / "run_log.jsonl");
      }
    } catch (const std::exception&) {
      done.clear();
    }
  }

  CausalMemo local;
  SelectOptions so{opts.memo ? opts.memo : &local, opts.extraction_attributes};
  const auto& queries = env.queries->examples();
  std::vector<const Example*> pending;
  for (const auto& q : queries)
    if (!done.count(q.id)) pending.push_back(&q);

  std::vector<Outcome> outcomes(pending.size());
  parallel_for(pending.size(), cfg.concurrency,
               [&](std::size_t i) { outcomes[i] = run_query(cfg, env, demos, store, *pending[i], so); });

  std::vector<std::pair<QueryRow, std::string>> merged;
  for (auto& [id, row] : done) {
    auto it = old_logs.find(id);
    merged.emplace_back(row, it == old_logs.end() ? json{{"id", id}}.dump() : it->second);
  }
  for (auto& o : outcomes) merged.emplace_back(std::move(o.row), o.log.dump());
  std::sort(merged.begin(), merged.end(), [](const auto& a, const auto& b) { return a.first.id < b.first.id; });

  std::string log_text;
  for (auto& [row, log] : merged) {
    rep.rows.push_back(row);
    log_text += log + "\n";
  }
  rep.aggregates = compute_aggregates(rep.rows, rep.task, rep.label_set);

  if (opts.output_dir) {
    fs::create_directories(*opts.output_dir);
    write_text(*opts.output_dir / "report.jsonl", report_jsonl(rep));
    write_text(*opts.output_dir / "aggregates.csv", aggregates_csv({rep}));
    write_text(*opts.output_dir / "run_log.jsonl", log_text);
    json m = manifest(cfg, env);
    m["level"] = opts.level;
    m["demonstration_corpus_size"] = demos.size();
    write_text(*opts.output_dir / "manifest.json", m.dump(2) + "\n");
  }
  return rep;
}

MetricReport run_experiment(const RunConfig& cfg, Environment& env, const RunOptions& opts) {
  return run_on(cfg, env, *env.demos, env.store, opts);
}

std::vector<MetricReport> scarcity_sweep(const RunConfig& cfg, Environment& env,
                                         const std::optional<fs::path>& output_dir) {
  CausalMemo memo;
  std::vector<MetricReport> reports;
  for (double level : cfg.scarcity_levels) {
    const Corpus sub = subsample_corpus(*env.demos, 1.0 - level, cfg.seed);
    const EmbeddingStore store = env.store.subset(sub.ids());
    for (Method m : cfg.sweep_methods) {
      RunConfig c = cfg;
      c.method = m;
      RunOptions opts;
      opts.memo = &memo;
      opts.level = level;
      if (output_dir) opts.output_dir = *output_dir / ("level_" + fmt4(level)) / to_string(m);
      reports.push_back(run_on(c, env, sub, store, opts));
    }
  }
  if (output_dir) write_text(*output_dir / "sweep.csv", aggregates_csv(reports));
  return reports;
}

std::string grid_csv(const GridResult& grid) {
  std::string out = "attributes";
  for (auto k : grid.cir) out += ",cir_" + std::to_string(k);
  out += "\n";
  for (std::size_t i = 0; i < grid.attributes.size(); ++i) {
    out += std::to_string(grid.attributes[i]);
    for (const auto& cell : grid.cells[i]) {
      const auto& a = cell.aggregates;
      out += "," + fmt4(100.0 * (cell.task == TaskKind::classification ? a.accuracy : a.em_mean));
    }
    out += "\n";
  }
  return out;
}

GridResult budget_grid(const RunConfig& cfg, Environment& env, const std::optional<fs::path>& output_dir) {
  GridResult grid;
  grid.attributes = cfg.grid_attributes;
  grid.cir = cfg.grid_cir;
  const std::size_t n_request = *std::max_element(grid.attributes.begin(), grid.attributes.end());
  const std::size_t k_corr = cfg.method == Method::cir_only ? 0 : cfg.k_corr;
  CausalMemo memo;
  for (auto na : grid.attributes) {
    std::vector<MetricReport> row;
    for (auto kc : grid.cir) {
      RunConfig c = cfg;
      c.num_attributes = na;
      c.budget = k_corr + kc;
      c.k_corr = k_corr;
      c.per_attribute_k.reset();
      c.validate();
      RunOptions opts;
      opts.memo = &memo;
      opts.extraction_attributes = n_request;
      if (output_dir)
        opts.output_dir = *output_dir / ("attrs_" + std::to_string(na) + "_cir_" + std::to_string(kc));
      row.push_back(run_experiment(c, env, opts));
    }
    grid.cells.push_back(std::move(row));
  }
  if (output_dir) write_text(*output_dir / "grid.csv", grid_csv(grid));
  return grid;
}

std::vector<MetricReport> run_repeats(const RunConfig& cfg, Environment& env, const std::optional<fs::path>& output_dir) {
  std::vector<MetricReport> reports;
  CausalMemo memo;
  std::vector<double> values;
  std::string csv = "repeat,seed,metric\n";
  for (std::size_t r = 0; r < cfg.repeats; ++r) {
    RunConfig c = cfg;
    c.seed = cfg.seed + r;
    RunOptions opts;
    opts.memo = &memo;
    if (output_dir) opts.output_dir = *output_dir / ("repeat_" + std::to_string(r));
    reports.push_back(run_experiment(c, env, opts));
    const auto& a = reports.back().aggregates;
    values.push_back(100.0 * (reports.back().task == TaskKind::classification ? a.accuracy : a.em_mean));
    csv += std::to_string(r) + "," + std::to_string(c.seed) + "," + fmt4(values.back()) + "\n";
  }
  double mean = 0.0, var = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  for (double v : values) var += (v - mean) * (v - mean);
  const double sd = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
  csv += "mean,," + fmt4(mean) + "\nstd,," + fmt4(sd) + "\n";
  if (output_dir) write_text(*output_dir / "repeats.csv", csv);
  return reports;
}

}  // namespace circles
