#include "circles/metrics.hpp"

#include <cctype>
#include <map>
#include <set>
#include <sstream>

#include "circles/common.hpp"

namespace circles {

namespace {

std::vector<std::string> tokens(const std::string& normalized) {
  std::vector<std::string> out;
  std::istringstream in(normalized);
  for (std::string t; in >> t;) out.push_back(t);
  return out;
}

}  // namespace

std::string normalize_answer(const std::string& s) {
  std::string cleaned;
  cleaned.reserve(s.size());
  for (unsigned char c : s) {
    if (std::ispunct(c)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(c)));
  }
  std::string out;
  for (const auto& t : tokens(cleaned)) {
    if (t == "a" || t == "an" || t == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += t;
  }
  return out;
}

int exact_match(const std::string& pred, const std::string& gold) {
  return normalize_answer(pred) == normalize_answer(gold) ? 1 : 0;
}

double word_f1(const std::string& pred, const std::string& gold) {
  const auto p = tokens(normalize_answer(pred));
  const auto g = tokens(normalize_answer(gold));
  if (p.empty() && g.empty()) return 1.0;
  if (p.empty() || g.empty()) return 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : g) ++counts[t];
  int same = 0;
  for (const auto& t : p) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++same;
    }
  }
  if (same == 0) return 0.0;
  const double precision = static_cast<double>(same) / static_cast<double>(p.size());
  const double recall = static_cast<double>(same) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

ClassificationMetrics classification_metrics(const std::vector<std::string>& preds,
                                             const std::vector<std::string>& golds,
                                             const std::vector<std::string>& label_set) {
  if (preds.size() != golds.size()) throw PreconditionError("preds and golds differ in length");
  ClassificationMetrics m;
  if (golds.empty()) return m;

  std::set<std::string> labels;
  for (const auto& l : label_set) labels.insert(normalize_answer(l));

  struct Counts {
    double tp = 0, fp = 0, fn = 0, support = 0;
  };
  std::map<std::string, Counts> per_class;
  for (const auto& l : labels) per_class[l];

  std::size_t correct = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const auto p = normalize_answer(preds[i]);
    const auto g = normalize_answer(golds[i]);
    const bool hit = p == g && labels.count(p);
    if (p == g) ++correct;
    if (auto it = per_class.find(g); it != per_class.end()) {
      it->second.support += 1;
      if (hit)
        it->second.tp += 1;
      else
        it->second.fn += 1;
    }
    if (!hit)
      if (auto it = per_class.find(p); it != per_class.end()) it->second.fp += 1;
  }

  const double n = static_cast<double>(golds.size());
  m.accuracy = static_cast<double>(correct) / n;
  for (const auto& [label, c] : per_class) {
    const double denom = 2 * c.tp + c.fp + c.fn;
    const double f1 = denom > 0 ? 2 * c.tp / denom : 0.0;
    m.weighted_f1 += (c.support / n) * f1;
  }
  return m;
}

}  // namespace circles
