#include "promptgrad/templates.hpp"

#include <memory>
#include <sstream>
#include <unordered_map>

namespace promptgrad::tpl {
namespace {

struct Node;
using NodeList = std::vector<Node>;

enum class NodeKind { kText, kVar, kIf, kFor };

struct Node {
  NodeKind kind;
  std::string text;           // kText: literal; kVar/kIf: dotted path; kFor: list path
  std::vector<std::string> loop_vars;  // kFor: 1 or 2 names
  NodeList body;
  NodeList else_body;  // kIf only
};

std::string trim(std::string_view s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path) {
    if (c == '.') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  return parts;
}

struct Parser {
  std::string_view src;
  size_t pos = 0;

  NodeList parse_until(const std::vector<std::string>& terminators, std::string* hit) {
    NodeList nodes;
    while (pos < src.size()) {
      size_t tag = src.find('{', pos);
      if (tag == std::string_view::npos || tag + 1 >= src.size()) {
        nodes.push_back({NodeKind::kText, std::string(src.substr(pos)), {}, {}, {}});
        pos = src.size();
        break;
      }
      char next = src[tag + 1];
      if (next != '{' && next != '%' && next != '#') {
        nodes.push_back({NodeKind::kText, std::string(src.substr(pos, tag + 1 - pos)), {}, {}, {}});
        pos = tag + 1;
        continue;
      }
      if (tag > pos)
        nodes.push_back({NodeKind::kText, std::string(src.substr(pos, tag - pos)), {}, {}, {}});
      if (next == '{') {
        size_t end = src.find("}}", tag);
        if (end == std::string_view::npos) throw TemplateError("unterminated '{{' expression");
        nodes.push_back({NodeKind::kVar, trim(src.substr(tag + 2, end - tag - 2)), {}, {}, {}});
        pos = end + 2;
      } else if (next == '#') {
        size_t end = src.find("#}", tag);
        if (end == std::string_view::npos) throw TemplateError("unterminated '{#' comment");
        pos = end + 2;
      } else {
        size_t end = src.find("%}", tag);
        if (end == std::string_view::npos) throw TemplateError("unterminated '{%' tag");
        std::string stmt = trim(src.substr(tag + 2, end - tag - 2));
        pos = end + 2;
        for (const auto& t : terminators) {
          if (stmt == t || stmt.rfind(t + " ", 0) == 0) {
            if (hit) *hit = stmt;
            return nodes;
          }
        }
        nodes.push_back(parse_block(stmt));
      }
    }
    if (!terminators.empty())
      throw TemplateError("missing closing tag for block (expected " + terminators.front() + ")");
    if (hit) hit->clear();
    return nodes;
  }

  Node parse_block(const std::string& stmt) {
    if (stmt.rfind("if ", 0) == 0) {
      Node n{NodeKind::kIf, trim(stmt.substr(3)), {}, {}, {}};
      std::string hit;
      n.body = parse_until({"else", "endif"}, &hit);
      if (hit == "else") n.else_body = parse_until({"endif"}, nullptr);
      return n;
    }
    if (stmt.rfind("for ", 0) == 0) {
      std::string rest = trim(stmt.substr(4));
      size_t in_pos = rest.find(" in ");
      if (in_pos == std::string::npos) throw TemplateError("malformed for tag: " + stmt);
      std::string vars = trim(rest.substr(0, in_pos));
      Node n{NodeKind::kFor, trim(rest.substr(in_pos + 4)), {}, {}, {}};
      size_t comma = vars.find(',');
      if (comma == std::string::npos) {
        n.loop_vars.push_back(trim(vars));
      } else {
        n.loop_vars.push_back(trim(vars.substr(0, comma)));
        n.loop_vars.push_back(trim(vars.substr(comma + 1)));
      }
      n.body = parse_until({"endfor"}, nullptr);
      return n;
    }
    throw TemplateError("unknown template tag: " + stmt);
  }
};

bool truthy(const nlohmann::json* v) {
  if (v == nullptr || v->is_null()) return false;
  if (v->is_boolean()) return v->get<bool>();
  if (v->is_string()) return !v->get_ref<const std::string&>().empty();
  if (v->is_array() || v->is_object()) return !v->empty();
  if (v->is_number()) return v->get<double>() != 0.0;
  return true;
}

std::string stringify(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "True" : "False";
  if (v.is_null()) return "";
  return v.dump();
}

struct Renderer {
  std::vector<const nlohmann::json*> scopes;

  const nlohmann::json* lookup(const std::string& path) const {
    auto parts = split_path(path);
    for (auto it = scopes.rbegin(); it != scopes.rend(); ++it) {
      const nlohmann::json* cur = *it;
      if (!cur->is_object() || !cur->contains(parts[0])) continue;
      cur = &(*cur)[parts[0]];
      for (size_t i = 1; i < parts.size(); ++i) {
        if (!cur->is_object() || !cur->contains(parts[i])) return nullptr;
        cur = &(*cur)[parts[i]];
      }
      return cur;
    }
    return nullptr;
  }

  void render_nodes(const NodeList& nodes, std::string& out) {
    for (const auto& n : nodes) {
      switch (n.kind) {
        case NodeKind::kText:
          out += n.text;
          break;
        case NodeKind::kVar: {
          const auto* v = lookup(n.text);
          if (v == nullptr) throw TemplateError("unbound placeholder: " + n.text);
          out += stringify(*v);
          break;
        }
        case NodeKind::kIf: {
          const auto* v = lookup(n.text);
          render_nodes(truthy(v) ? n.body : n.else_body, out);
          break;
        }
        case NodeKind::kFor: {
          const auto* list = lookup(n.text);
          if (list == nullptr) break;  // absent list behaves as empty
          if (!list->is_array())
            throw TemplateError("loop target is not a list: " + n.text);
          int index = 0;
          for (const auto& item : *list) {
            ++index;
            nlohmann::json scope = nlohmann::json::object();
            scope["loop"] = {{"index", index}};
            if (n.loop_vars.size() == 2) {
              // destructuring over {key, value} elements
              scope[n.loop_vars[0]] = item.is_object() && item.contains("key") ? item["key"] : item;
              scope[n.loop_vars[1]] = item.is_object() && item.contains("value") ? item["value"] : item;
            } else {
              scope[n.loop_vars[0]] = item;
            }
            scopes.push_back(&scope);
            render_nodes(n.body, out);
            scopes.pop_back();
          }
          break;
        }
      }
    }
  }
};

}  // namespace

std::string render(std::string_view body, const Bindings& bindings) {
  Parser parser{body};
  NodeList nodes = parser.parse_until({}, nullptr);
  Renderer r;
  r.scopes.push_back(&bindings);
  std::string out;
  r.render_nodes(nodes, out);
  return out;
}

std::string render_template(const TemplateAsset& asset, const Bindings& bindings) {
  try {
    return render(asset.body, bindings);
  } catch (const TemplateError& e) {
    throw TemplateError(asset.id + ": " + e.what());
  }
}

namespace detail {
// defined in the generated template_assets.cpp
const std::unordered_map<std::string, std::string>& builtin_assets();
}  // namespace detail

const TemplateAsset& asset(std::string_view id) {
  static std::unordered_map<std::string, TemplateAsset> cache = [] {
    std::unordered_map<std::string, TemplateAsset> m;
    for (const auto& [k, v] : detail::builtin_assets()) m.emplace(k, TemplateAsset{k, v});
    return m;
  }();
  auto it = cache.find(std::string(id));
  if (it == cache.end()) throw TemplateError("unknown template asset: " + std::string(id));
  return it->second;
}

std::vector<std::string> asset_ids() {
  std::vector<std::string> ids;
  for (const auto& [k, v] : detail::builtin_assets()) ids.push_back(k);
  return ids;
}

}  // namespace promptgrad::tpl
