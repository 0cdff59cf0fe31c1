#include <doctest.h>

#include "promptgrad/templates.hpp"

using namespace promptgrad;
using nlohmann::json;

TEST_CASE("substitution and dotted paths") {
  CHECK(tpl::render("hello {{name}}", {{"name", "world"}}) == "hello world");
  CHECK(tpl::render("{{a.b.c}}", {{"a", {{"b", {{"c", "deep"}}}}}}) == "deep");
  CHECK(tpl::render("{{ spaced }}", {{"spaced", "x"}}) == "x");
}

TEST_CASE("unbound placeholder names the culprit") {
  CHECK_THROWS_WITH_AS(tpl::render("{{missing_thing}}", json::object()),
                       doctest::Contains("missing_thing"), TemplateError);
}

TEST_CASE("conditionals omit absent sections") {
  const char* body = "a{% if x %}X{% endif %}b";
  CHECK(tpl::render(body, json::object()) == "ab");
  CHECK(tpl::render(body, {{"x", ""}}) == "ab");
  CHECK(tpl::render(body, {{"x", json::array()}}) == "ab");
  CHECK(tpl::render(body, {{"x", "yes"}}) == "aXb");
  CHECK(tpl::render("{% if x %}T{% else %}F{% endif %}", {{"x", false}}) == "F");
}

TEST_CASE("loops expand with 1-based loop.index") {
  std::string out = tpl::render("{% for h in hs %}{{loop.index}}:{{h}};{% endfor %}",
                                {{"hs", {"a", "b", "c"}}});
  CHECK(out == "1:a;2:b;3:c;");
}

TEST_CASE("key/value destructuring") {
  json inputs = json::array();
  inputs.push_back({{"key", "q"}, {"value", {{"role_desc", "question"}}}});
  std::string out = tpl::render(
      "{% for key, value in inputs %}{{key}}={{value.role_desc}} {% endfor %}",
      {{"inputs", inputs}});
  CHECK(out == "q=question ");
}

TEST_CASE("comments vanish and bools render python-style") {
  CHECK(tpl::render("a{# note #}b", json::object()) == "ab");
  CHECK(tpl::render("{{flag}}", {{"flag", true}}) == "True");
  CHECK(tpl::render("{{flag}}", {{"flag", false}}) == "False");
}

TEST_CASE("VARIABLE_AND_PEERS_INFO with zero peers omits the peer section") {
  json bindings{{"variable",
                 {{"name", "task"}, {"param_type", "PROMPT"}, {"role_desc", "r"}, {"data", "d"}}},
                {"peers", json::array()}};
  std::string out = tpl::render_template(tpl::asset("VARIABLE_AND_PEERS_INFO"), bindings);
  CHECK(out.find("<START_OF_VARIABLE_DESC>") != std::string::npos);
  CHECK(out.find("VARIBLE_PEERS") == std::string::npos);
}

TEST_CASE("empty peer renders PEER_VARIABLE: EMPTY") {
  json peers = json::array();
  peers.push_back({{"name", "p1"},
                   {"param_type", "PROMPT"},
                   {"role_desc", "r1"},
                   {"requires_opt", true},
                   {"data", "filled"}});
  peers.push_back({{"name", "p2"},
                   {"param_type", "DEMOS"},
                   {"role_desc", "r2"},
                   {"requires_opt", false},
                   {"data", ""}});
  json bindings{{"variable",
                 {{"name", "task"}, {"param_type", "PROMPT"}, {"role_desc", "r"}, {"data", "d"}}},
                {"peers", peers}};
  std::string out = tpl::render_template(tpl::asset("VARIABLE_AND_PEERS_INFO"), bindings);
  CHECK(out.find("PEER_VARIABLE: filled") != std::string::npos);
  CHECK(out.find("PEER_VARIABLE: EMPTY") != std::string::npos);
  CHECK(out.find("WILL_BE_OPTIMIZED: True") != std::string::npos);
  CHECK(out.find("WILL_BE_OPTIMIZED: False") != std::string::npos);
}

TEST_CASE("history loop renders 1,2 indices in the optimizer template") {
  json bindings{{"optimizer_system_prompt", "sys"},
                {"steps", 2},
                {"variable_and_peers_info", "VPI"},
                {"past_history", {"value: a\neval_score: 0.84", "value: b\neval_score: 0.76"}},
                {"variable_desc", "vd"}};
  std::string out = tpl::render_template(tpl::asset("TEXT_GRAD_DESC_TEMPLATE"), bindings);
  CHECK(out.find("1. value: a") != std::string::npos);
  CHECK(out.find("2. value: b") != std::string::npos);
  CHECK(out.find("score higher than all past iterations") != std::string::npos);
  CHECK(out.find("You are 2 steps since your last improvement") != std::string::npos);
  CHECK(out.find("You MUST approach differently") == std::string::npos);
}

TEST_CASE("unknown asset id is an error") {
  CHECK_THROWS_AS(tpl::asset("NO_SUCH_TEMPLATE"), TemplateError);
}

TEST_CASE("unterminated tags are reported") {
  CHECK_THROWS_AS(tpl::render("{{oops", json::object()), TemplateError);
  CHECK_THROWS_AS(tpl::render("{% if x %}no end", {{"x", "1"}}), TemplateError);
}
