#pragma once

#include <optional>
#include <string>

namespace promptgrad {

std::string trim_copy(const std::string& s);

/// First triple-backtick-fenced block, language tag tolerated. nullopt when
/// the text has no complete fence.
std::optional<std::string> extract_fenced_block(const std::string& text);

/// Number formatting used inside rendered prompts (matches JSON float style,
/// e.g. 1.0, 0.84).
std::string format_number(double v);

}  // namespace promptgrad
