#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "circles/embedding.hpp"
#include "circles/endpoint.hpp"

namespace testutil {

inline std::filesystem::path temp_dir(const std::string& tag) {
  static std::atomic<int> counter{0};
  const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
  auto p = std::filesystem::temp_directory_path() /
           ("circles-test-" + tag + "-" + std::to_string(stamp) + "-" + std::to_string(counter++));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline std::vector<float> unit(std::vector<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  std::vector<float> out;
  for (double x : v) out.push_back(static_cast<float>(x / n));
  return out;
}

inline std::vector<float> random_unit(std::mt19937_64& gen, std::size_t dim) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(dim);
  for (auto& x : v) x = nd(gen);
  return unit(v);
}

// Embedder backed by a fixed text -> vector table; optionally fails on
// listed inputs and counts calls.
class TableEmbedder : public circles::Embedder {
 public:
  std::map<std::string, std::vector<float>> table;
  std::vector<std::string> fail_on;
  std::atomic<int> calls{0};

  circles::EmbedResult embed(const circles::EmbedInput& in) override {
    ++calls;
    for (const auto& f : fail_on)
      if (f == in.content) throw circles::EndpointError("refused " + in.content);
    auto it = table.find(in.content);
    if (it == table.end()) throw circles::EndpointError("unknown input " + in.content);
    return {it->second, 1};
  }
  std::string identifier() const override { return "table"; }
};

// Chat endpoint replaying canned replies in order (the last one repeats).
class ScriptedVlm : public circles::ChatEndpoint {
 public:
  explicit ScriptedVlm(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  circles::ChatResponse complete(const circles::ChatRequest& req) override {
    std::lock_guard lock(mu_);
    requests.push_back(req);
    circles::ChatResponse r;
    r.text = replies_[std::min(next_, replies_.size() - 1)];
    ++next_;
    r.usage = {10, 2, 1};
    return r;
  }
  std::string identifier() const override { return "scripted"; }
  std::vector<circles::ChatRequest> requests;

 private:
  std::vector<std::string> replies_;
  std::size_t next_ = 0;
  std::mutex mu_;
};

}  // namespace testutil
