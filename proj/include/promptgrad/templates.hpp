#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "promptgrad/errors.hpp"

namespace promptgrad::tpl {

using Bindings = nlohmann::json;

/// A named prompt template. Bodies use a small Jinja-style syntax:
/// `{{ a.b }}` substitution, `{% if x %}..{% else %}..{% endif %}`,
/// `{% for x in xs %}..{% endfor %}` (with 1-based `{{loop.index}}` and
/// `{% for k, v in pairs %}` destructuring), and `{# comments #}`.
struct TemplateAsset {
  std::string id;
  std::string body;
};

/// Renders `asset.body` against `bindings` (a JSON object). Sections guarded
/// by `{% if %}` are dropped when the binding is absent or empty; a bare
/// `{{placeholder}}` with no binding raises TemplateError naming it.
std::string render_template(const TemplateAsset& asset, const Bindings& bindings);

std::string render(std::string_view body, const Bindings& bindings);

/// Built-in assets shipped with the library, keyed by id
/// (e.g. "FEEDBACK_ENGINE_TEMPLATE"). Throws TemplateError on unknown ids.
const TemplateAsset& asset(std::string_view id);

std::vector<std::string> asset_ids();

}  // namespace promptgrad::tpl
