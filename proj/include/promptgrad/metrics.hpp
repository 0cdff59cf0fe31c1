#pragma once

#include <functional>
#include <string>
#include <vector>

namespace promptgrad {

struct EvalScore {
  double value = 0.0;
  std::string metric_name;
};

/// Lowercase, strip punctuation, drop the articles a/an/the, collapse
/// whitespace. The open-QA convention used for exact match.
std::string normalize_answer(const std::string& text);

/// Lowercase + strip punctuation tokens, articles kept. F1 is scored on
/// these tokens so near misses like "the X" vs "X" are partial credit,
/// not zero.
std::vector<std::string> f1_tokens(const std::string& text);

/// 1.0 iff the normalized strings are equal.
EvalScore exact_match(const std::string& pred, const std::string& gt);

/// Token-level F1 with multiset overlap. Both empty -> 1.0; exactly one
/// empty -> 0.0.
EvalScore f1_score(const std::string& pred, const std::string& gt);

using EvalFn = std::function<EvalScore(const std::string&, const std::string&)>;

EvalFn metric_by_name(const std::string& name);  // "em" | "f1"
std::string metric_description(const std::string& name);

}  // namespace promptgrad
