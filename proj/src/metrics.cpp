#include "promptgrad/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>

#include "promptgrad/errors.hpp"

namespace promptgrad {
namespace {

std::vector<std::string> tokenize_lower_nopunct(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  return tokens;
}

bool is_article(const std::string& t) { return t == "a" || t == "an" || t == "the"; }

}  // namespace

std::string normalize_answer(const std::string& text) {
  std::string out;
  for (const auto& t : tokenize_lower_nopunct(text)) {
    if (is_article(t)) continue;
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

std::vector<std::string> f1_tokens(const std::string& text) {
  return tokenize_lower_nopunct(text);
}

EvalScore exact_match(const std::string& pred, const std::string& gt) {
  return {normalize_answer(pred) == normalize_answer(gt) ? 1.0 : 0.0, "em"};
}

EvalScore f1_score(const std::string& pred, const std::string& gt) {
  auto p = f1_tokens(pred);
  auto g = f1_tokens(gt);
  if (p.empty() && g.empty()) return {1.0, "f1"};
  if (p.empty() || g.empty()) return {0.0, "f1"};
  std::map<std::string, int> counts;
  for (const auto& t : g) counts[t] += 1;
  int common = 0;
  for (const auto& t : p) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      ++common;
      --it->second;
    }
  }
  if (common == 0) return {0.0, "f1"};
  double precision = static_cast<double>(common) / p.size();
  double recall = static_cast<double>(common) / g.size();
  return {2.0 * precision * recall / (precision + recall), "f1"};
}

EvalFn metric_by_name(const std::string& name) {
  if (name == "em") return exact_match;
  if (name == "f1") return f1_score;
  throw ConfigError("unknown metric: " + name);
}

std::string metric_description(const std::string& name) {
  if (name == "em")
    return "exact_match: 1.0 if the normalized prediction equals the normalized ground truth, "
           "else 0.0";
  if (name == "f1")
    return "f1_score: token-level F1 between the prediction and the ground truth";
  throw ConfigError("unknown metric: " + name);
}

}  // namespace promptgrad
