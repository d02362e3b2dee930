#pragma once

#include <string>
#include <vector>

namespace circles {

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace. Follows the usual open-domain QA convention.
std::string normalize_answer(const std::string& s);

int exact_match(const std::string& pred, const std::string& gold);

/// Token-multiset F1 on normalized strings. Both empty -> 1, one empty -> 0.
double word_f1(const std::string& pred, const std::string& gold);

struct ClassificationMetrics {
  double accuracy = 0.0;
  double weighted_f1 = 0.0;
};

/// Accuracy and support-weighted F1 over `label_set`. Labels are compared
/// after normalization; predictions outside the set never count as a hit.
ClassificationMetrics classification_metrics(const std::vector<std::string>& preds,
                                             const std::vector<std::string>& golds,
                                             const std::vector<std::string>& label_set);

}  // namespace circles
