#include "promptgrad/text.hpp"

#include <nlohmann/json.hpp>

namespace promptgrad {

std::string trim_copy(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::optional<std::string> extract_fenced_block(const std::string& text) {
  size_t open = text.find("```");
  if (open == std::string::npos) return std::nullopt;
  size_t body_start = open + 3;
  // skip an optional language tag on the opening fence line
  size_t eol = text.find('\n', body_start);
  if (eol != std::string::npos) {
    std::string tag = trim_copy(text.substr(body_start, eol - body_start));
    bool tag_like = !tag.empty() && tag.find('{') == std::string::npos &&
                    tag.find('`') == std::string::npos && tag.size() <= 16;
    if (tag.empty() || tag_like) body_start = eol + 1;
  }
  size_t close = text.find("```", body_start);
  if (close == std::string::npos) return std::nullopt;
  return trim_copy(text.substr(body_start, close - body_start));
}

std::string format_number(double v) {
  return nlohmann::json(v).dump();
}

}  // namespace promptgrad
