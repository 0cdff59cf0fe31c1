#include "promptgrad/param.hpp"

#include <string_view>

#include "promptgrad/errors.hpp"

namespace promptgrad {

const char* to_string(ParameterKind kind) {
  switch (kind) {
    case ParameterKind::kPrompt: return "PROMPT";
    case ParameterKind::kDemos: return "DEMOS";
    case ParameterKind::kInput: return "INPUT";
    case ParameterKind::kOutput: return "OUTPUT";
    case ParameterKind::kHyperparam: return "HYPERPARAM";
    case ParameterKind::kLossOutput: return "LOSS_OUTPUT";
  }
  return "UNKNOWN";
}

ParameterKind parameter_kind_from_string(const std::string& s) {
  if (s == "PROMPT") return ParameterKind::kPrompt;
  if (s == "DEMOS") return ParameterKind::kDemos;
  if (s == "INPUT") return ParameterKind::kInput;
  if (s == "OUTPUT") return ParameterKind::kOutput;
  if (s == "HYPERPARAM") return ParameterKind::kHyperparam;
  if (s == "LOSS_OUTPUT") return ParameterKind::kLossOutput;
  throw Error("unknown parameter kind: " + s);
}

uint64_t fnv1a64(std::string_view data) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

size_t GradientKeyHash::operator()(const Gradient::Key& k) const noexcept {
  uint64_t h = fnv1a64(k.data_id);
  h ^= k.digest + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  h ^= (uint64_t(k.call_index) << 32 | k.source) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return static_cast<size_t>(h);
}

}  // namespace promptgrad
