#include "circles/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "circles/common.hpp"

namespace circles {

using nlohmann::json;

namespace {

const std::vector<std::pair<Method, std::string>>& method_table() {
  static const std::vector<std::pair<Method, std::string>> t = {
      {Method::none, "none"},       {Method::random, "random"},
      {Method::rices, "rices"},     {Method::muier, "muier"},
      {Method::mmices, "mmices"},   {Method::circles, "circles"},
      {Method::circles_no_txt, "circles_no_txt"}, {Method::icl_plus_attr, "icl_plus_attr"},
      {Method::cir_only, "cir_only"}};
  return t;
}

std::string join(const std::vector<std::string>& v, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

std::string kind_name(mock::RequestKind k) {
  switch (k) {
    case mock::RequestKind::attributes: return "attributes";
    case mock::RequestKind::caption: return "caption";
    case mock::RequestKind::answer: return "answer";
  }
  return "answer";
}

mock::RequestKind kind_from_name(const std::string& s) {
  if (s == "attributes") return mock::RequestKind::attributes;
  if (s == "caption") return mock::RequestKind::caption;
  if (s == "answer") return mock::RequestKind::answer;
  throw PreconditionError("unknown request kind '" + s + "' (expected attributes|caption|answer)");
}

json vlm_to_json(const mock::MockVlmConfig& v) {
  json j = {{"decisive_rank", v.decisive_rank}, {"image_tokens", v.image_tokens}};
  if (v.fixed_usage) {
    json f = json::object();
    for (const auto& [k, s] : *v.fixed_usage) f[kind_name(k)] = {{"prompt", s.prompt}, {"completion", s.completion}};
    j["fixed_usage"] = f;
  } else {
    j["fixed_usage"] = nullptr;
  }
  j["fail_images"] = v.fail_images;
  return j;
}

mock::MockVlmConfig vlm_from_json(const json& j) {
  mock::MockVlmConfig v;
  v.decisive_rank = j.value("decisive_rank", v.decisive_rank);
  v.image_tokens = j.value("image_tokens", v.image_tokens);
  if (j.contains("fixed_usage") && !j["fixed_usage"].is_null()) {
    std::map<mock::RequestKind, mock::MockVlmConfig::FixedSizes> f;
    for (const auto& [k, s] : j["fixed_usage"].items())
      f[kind_from_name(k)] = {s.at("prompt").get<std::uint64_t>(), s.at("completion").get<std::uint64_t>()};
    v.fixed_usage = std::move(f);
  }
  if (j.contains("fail_images")) v.fail_images = j["fail_images"].get<std::set<std::string>>();
  return v;
}

// Reads an optional key, recording a problem instead of throwing.
template <typename T>
void read(const json& obj, const char* key, T& out, std::vector<std::string>& problems, const std::string& path) {
  if (!obj.contains(key) || obj[key].is_null()) return;
  try {
    out = obj[key].get<T>();
  } catch (const json::exception&) {
    problems.push_back(path + key + ": wrong type (" + obj[key].dump() + ")");
  }
}

void check_keys(const json& obj, const std::set<std::string>& allowed, std::vector<std::string>& problems,
                const std::string& path) {
  for (const auto& [k, v] : obj.items())
    if (!allowed.count(k)) problems.push_back(path + k + ": unknown key");
}

}  // namespace

std::string to_string(Method m) {
  for (const auto& [mm, name] : method_table())
    if (mm == m) return name;
  return "unknown";
}

const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [m, name] : method_table()) out.push_back(name);
    return out;
  }();
  return names;
}

Method method_from_string(const std::string& s) {
  for (const auto& [m, name] : method_table())
    if (name == s) return m;
  throw PreconditionError("unknown method '" + s + "' (valid: " + join(method_names(), ", ") + ")");
}

bool uses_causal_branch(Method m) {
  return m == Method::circles || m == Method::circles_no_txt || m == Method::cir_only || m == Method::icl_plus_attr;
}

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error("invalid configuration:\n  " + join(problems, "\n  ")), problems_(std::move(problems)) {}

BudgetConfig RunConfig::budget_config() const {
  BudgetConfig b = allocate_budget(budget, num_attributes, method == Method::cir_only ? 0 : k_corr);
  if (per_attribute_k) b.per_attribute_k = *per_attribute_k;
  return b;
}

json RunConfig::to_json() const {
  json j;
  j["method"] = to_string(method);
  j["task"] = circles::to_string(task);
  j["budget"] = {{"total", budget},
                 {"k_corr", k_corr},
                 {"num_attributes", num_attributes},
                 {"per_attribute_k", per_attribute_k ? json(*per_attribute_k) : json(nullptr)}};
  j["scorer"] = circles::to_string(scorer);
  j["mmices_pool"] = mmices_pool;
  j["attribute_source"] = circles::to_string(attribute_source);
  j["generation"] = {{"temperature", generation.temperature},
                     {"max_tokens", generation.max_tokens},
                     {"num_generations", generation.num_generations}};
  j["seed"] = seed;
  j["exclude_self"] = exclude_self;
  j["ascending"] = ascending;
  j["repeats"] = repeats;
  j["concurrency"] = concurrency;
  j["max_failures"] = max_failures ? json(*max_failures) : json(nullptr);
  j["paths"] = {{"corpus", corpus_path}, {"queries", queries_path}, {"cache", cache_path}, {"output_dir", output_dir}};
  j["question_template"] = question_template ? json(*question_template) : json(nullptr);
  j["endpoints"] = {{"chat", {{"url", chat.url}, {"model", chat.model}}},
                    {"embed", {{"url", embed.url}, {"model", embed.model}}}};
  if (mock)
    j["mock"] = {{"world", mock->world.to_json()}, {"vlm", vlm_to_json(mock->vlm)}};
  else
    j["mock"] = nullptr;
  std::vector<std::string> sweep;
  for (auto m : sweep_methods) sweep.push_back(to_string(m));
  j["scarcity"] = {{"levels", scarcity_levels}, {"methods", sweep}};
  j["grid"] = {{"attributes", grid_attributes}, {"cir", grid_cir}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  std::vector<std::string> problems;
  RunConfig c;
  if (!j.is_object()) throw ConfigError({"configuration must be a JSON object"});
  check_keys(j,
             {"method", "task", "budget", "scorer", "mmices_pool", "attribute_source", "generation", "seed",
              "exclude_self", "ascending", "repeats", "concurrency", "max_failures", "paths", "question_template",
              "endpoints", "mock", "scarcity", "grid"},
             problems, "");

  auto enum_field = [&](const char* key, auto parse) {
    if (!j.contains(key) || j[key].is_null()) return;
    try {
      parse(j[key].get<std::string>());
    } catch (const json::exception&) {
      problems.push_back(std::string(key) + ": expected a string");
    } catch (const PreconditionError& e) {
      problems.push_back(std::string(key) + ": " + e.what());
    }
  };
  enum_field("method", [&](const std::string& s) { c.method = method_from_string(s); });
  enum_field("task", [&](const std::string& s) { c.task = task_kind_from_string(s); });
  enum_field("scorer", [&](const std::string& s) { c.scorer = scorer_variant_from_string(s); });
  enum_field("attribute_source", [&](const std::string& s) { c.attribute_source = attribute_source_from_string(s); });

  if (j.contains("budget") && j["budget"].is_object()) {
    const auto& b = j["budget"];
    check_keys(b, {"total", "k_corr", "num_attributes", "per_attribute_k"}, problems, "budget.");
    read(b, "total", c.budget, problems, "budget.");
    read(b, "k_corr", c.k_corr, problems, "budget.");
    read(b, "num_attributes", c.num_attributes, problems, "budget.");
    if (b.contains("per_attribute_k") && !b["per_attribute_k"].is_null()) {
      std::size_t v = 0;
      read(b, "per_attribute_k", v, problems, "budget.");
      c.per_attribute_k = v;
    }
  }
  read(j, "mmices_pool", c.mmices_pool, problems, "");
  if (j.contains("generation") && j["generation"].is_object()) {
    const auto& g = j["generation"];
    check_keys(g, {"temperature", "max_tokens", "num_generations"}, problems, "generation.");
    read(g, "temperature", c.generation.temperature, problems, "generation.");
    read(g, "max_tokens", c.generation.max_tokens, problems, "generation.");
    read(g, "num_generations", c.generation.num_generations, problems, "generation.");
  }
  read(j, "seed", c.seed, problems, "");
  read(j, "exclude_self", c.exclude_self, problems, "");
  read(j, "ascending", c.ascending, problems, "");
  read(j, "repeats", c.repeats, problems, "");
  read(j, "concurrency", c.concurrency, problems, "");
  if (j.contains("max_failures") && !j["max_failures"].is_null()) {
    std::size_t v = 0;
    read(j, "max_failures", v, problems, "");
    c.max_failures = v;
  }
  if (j.contains("paths") && j["paths"].is_object()) {
    const auto& p = j["paths"];
    check_keys(p, {"corpus", "queries", "cache", "output_dir"}, problems, "paths.");
    read(p, "corpus", c.corpus_path, problems, "paths.");
    read(p, "queries", c.queries_path, problems, "paths.");
    read(p, "cache", c.cache_path, problems, "paths.");
    read(p, "output_dir", c.output_dir, problems, "paths.");
  }
  if (j.contains("question_template") && !j["question_template"].is_null()) {
    std::string t;
    read(j, "question_template", t, problems, "");
    c.question_template = t;
  }
  if (j.contains("endpoints") && j["endpoints"].is_object()) {
    const auto& e = j["endpoints"];
    check_keys(e, {"chat", "embed"}, problems, "endpoints.");
    for (auto [key, spec] : {std::pair{"chat", &c.chat}, std::pair{"embed", &c.embed}}) {
      if (!e.contains(key) || !e[key].is_object()) continue;
      const std::string path = std::string("endpoints.") + key + ".";
      check_keys(e[key], {"url", "model"}, problems, path);
      read(e[key], "url", spec->url, problems, path);
      read(e[key], "model", spec->model, problems, path);
    }
  }
  if (j.contains("mock") && j["mock"].is_object()) {
    try {
      MockSpec m;
      if (j["mock"].contains("world")) m.world = mock::WorldConfig::from_json(j["mock"]["world"]);
      if (j["mock"].contains("vlm")) m.vlm = vlm_from_json(j["mock"]["vlm"]);
      c.mock = std::move(m);
    } catch (const std::exception& e) {
      problems.push_back(std::string("mock: ") + e.what());
    }
  }
  if (j.contains("scarcity") && j["scarcity"].is_object()) {
    const auto& s = j["scarcity"];
    check_keys(s, {"levels", "methods"}, problems, "scarcity.");
    read(s, "levels", c.scarcity_levels, problems, "scarcity.");
    if (s.contains("methods")) {
      std::vector<std::string> names;
      read(s, "methods", names, problems, "scarcity.");
      c.sweep_methods.clear();
      for (const auto& n : names) {
        try {
          c.sweep_methods.push_back(method_from_string(n));
        } catch (const PreconditionError& e) {
          problems.push_back(std::string("scarcity.methods: ") + e.what());
        }
      }
    }
  }
  if (j.contains("grid") && j["grid"].is_object()) {
    const auto& g = j["grid"];
    check_keys(g, {"attributes", "cir"}, problems, "grid.");
    read(g, "attributes", c.grid_attributes, problems, "grid.");
    read(g, "cir", c.grid_cir, problems, "grid.");
  }

  for (auto& p : c.problems()) problems.push_back(std::move(p));
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

std::vector<std::string> RunConfig::problems() const {
  std::vector<std::string> p;
  if (budget == 0) p.push_back("budget.total: must be positive");
  if (method != Method::cir_only && k_corr > budget)
    p.push_back("budget.k_corr: " + std::to_string(k_corr) + " exceeds budget.total " + std::to_string(budget));
  if (num_attributes == 0) p.push_back("budget.num_attributes: must be positive");
  if (per_attribute_k && *per_attribute_k == 0) p.push_back("budget.per_attribute_k: must be positive");
  if (per_attribute_k && num_attributes && budget >= k_corr && uses_causal_branch(method) &&
      method != Method::icl_plus_attr) {
    const std::size_t k_causal = budget - (method == Method::cir_only ? 0 : k_corr);
    if (*per_attribute_k * num_attributes < k_causal)
      p.push_back("budget.per_attribute_k: num_attributes x per_attribute_k cannot fill k_causal=" +
                  std::to_string(k_causal));
  }
  if (mmices_pool == 0) p.push_back("mmices_pool: must be positive");
  if (!(generation.temperature >= 0.0)) p.push_back("generation.temperature: must be >= 0");
  if (generation.max_tokens == 0) p.push_back("generation.max_tokens: must be positive");
  if (generation.num_generations == 0) p.push_back("generation.num_generations: must be positive");
  if (repeats == 0) p.push_back("repeats: must be positive");
  if (concurrency == 0) p.push_back("concurrency: must be positive");
  if (output_dir.empty()) p.push_back("paths.output_dir: must not be empty");
  for (double l : scarcity_levels)
    if (!(l >= 0.0 && l < 1.0)) p.push_back("scarcity.levels: " + std::to_string(l) + " outside [0, 1)");
  for (auto a : grid_attributes)
    if (a == 0) p.push_back("grid.attributes: entries must be positive");
  if (!mock) {
    if (corpus_path.empty()) p.push_back("paths.corpus: required without a mock world");
    if (queries_path.empty()) p.push_back("paths.queries: required without a mock world");
  } else {
    const auto& w = mock->world;
    if (w.num_attributes < 2) p.push_back("mock.world.num_attributes: must be >= 2");
    if (w.num_values < 2) p.push_back("mock.world.num_values: must be >= 2");
    if (w.num_confounders >= w.num_attributes) p.push_back("mock.world.num_confounders: must be < num_attributes");
    if (!(w.confounder_strength >= 0.0 && w.confounder_strength <= 1.0))
      p.push_back("mock.world.confounder_strength: must lie in [0, 1]");
    if (w.num_items == 0) p.push_back("mock.world.num_items: must be positive");
    if (w.num_queries == 0) p.push_back("mock.world.num_queries: must be positive");
  }
  if (mock && task != TaskKind::classification) p.push_back("task: the mock world is a classification task");
  return p;
}

void RunConfig::validate() const {
  auto p = problems();
  if (!p.empty()) throw ConfigError(std::move(p));
}

std::string RunConfig::fingerprint() const {
  json j = to_json();
  j["paths"].erase("output_dir");
  j.erase("concurrency");
  return sha256_hex(j.dump());
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot open config file " + path.string()});
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError({path.string() + ": " + e.what()});
  }
  return RunConfig::from_json(j);
}

}  // namespace circles
