#include <doctest.h>

#include "promptgrad/optimizer.hpp"
#include "test_support.hpp"

using namespace promptgrad;
using promptgrad::testing::entry;
using promptgrad::testing::fenced_proposal;

namespace {

struct OptFixture {
  ParameterGraph graph;
  ParamId target, peer, system_param, output;

  OptFixture() {
    Parameter& t = graph.create_parameter(ParameterKind::kPrompt, "task_instruction",
                                          "task instruction", "Count things.", true);
    Parameter& p = graph.create_parameter(ParameterKind::kPrompt, "output_format",
                                          "output format", "", false);
    Parameter& s = graph.create_parameter(ParameterKind::kPrompt, "query_task",
                                          "query instruction", "Write a query.", true);
    Parameter& o = graph.create_parameter(ParameterKind::kOutput, "out", "the answer", "x",
                                          false);
    target = t.id; peer = p.id; system_param = s.id; output = o.id;
  }
};

}  // namespace

TEST_CASE("parse_proposal failure modes are distinct") {
  Proposal ok = parse_proposal(fenced_proposal("why", "new value"));
  CHECK(ok.reasoning == "why");
  CHECK(ok.proposed_variable == "new value");

  CHECK_THROWS_WITH_AS(parse_proposal(R"({"reasoning": "r", "proposed_variable": "v"})"),
                       doctest::Contains("no fenced block"), ProposalParseError);
  CHECK_THROWS_WITH_AS(parse_proposal("```\n{\"proposed_variable\": \"v\"}\n```"),
                       doctest::Contains("missing key: reasoning"), ProposalParseError);
  CHECK_THROWS_WITH_AS(parse_proposal("```\nnot json at all\n```"),
                       doctest::Contains("malformed"), ProposalParseError);
  CHECK_THROWS_AS(parse_proposal("```\n{\"reasoning\": \"r\", \"proposed_variable\": \"\"}\n```"),
                  ProposalParseError);
}

TEST_CASE("rendered optimizer prompt carries SH, CH, constraints and peers") {
  OptFixture fx;
  fx.graph.record_gradient(fx.target, [&] {
    Gradient g;
    g.data_id = "s1";
    g.call_index = 1;
    g.source_output_id = fx.output;
    g.content = "needs itemized counting";
    g.context = {"LM_INPUT: {...}\nLM_OUTPUT: 9", "the answer", "task instruction"};
    return g;
  }());

  std::vector<HistoryEntry> sh{{"best prompt so far", 0.84, 3}, {"older prompt", 0.76, 1}};
  std::vector<FailedProposal> ch{{"a failed try", "rewrite everything", "rewrite everything"}};
  ModelRequest req = render_optimizer_request(fx.graph, fx.target, {fx.peer}, {fx.system_param},
                                              sh, ch, 2, 0.84);

  CHECK(req.role == ModelRole::kOptimizer);
  CHECK(req.phase == Phase::kPropose);
  const std::string& user = req.user_text;
  CHECK(user.find("You are 2 steps since your last improvement") != std::string::npos);
  CHECK(user.find("eval_score: 0.84") != std::string::npos);
  CHECK(user.find("score higher than all past iterations") != std::string::npos);
  CHECK(user.find("You MUST approach differently from the above methods") != std::string::npos);
  CHECK(user.find("a failed try") != std::string::npos);
  CHECK(user.find("needs itemized counting") != std::string::npos);
  CHECK(user.find("YOU MUST ENSURE the new variable shares the same intent") != std::string::npos);
  // peer awareness and system awareness
  CHECK(user.find("PEER_NAME: output_format") != std::string::npos);
  CHECK(user.find("PEER_VARIABLE: EMPTY") != std::string::npos);
  CHECK(user.find("Name: query_task") != std::string::npos);
  CHECK(req.system_text.find("enclose the JSON output in triple backticks") != std::string::npos);

  SUBCASE("no CH section when the step has no failed proposals") {
    ModelRequest clean = render_optimizer_request(fx.graph, fx.target, {fx.peer}, {}, sh, {}, 0,
                                                  0.84);
    CHECK(clean.user_text.find("You MUST approach differently") == std::string::npos);
  }
  SUBCASE("proposing for a fixed parameter is rejected") {
    CHECK_THROWS_AS(render_optimizer_request(fx.graph, fx.peer, {}, {}, {}, {}, 0, 0.0),
                    GraphError);
  }
}

TEST_CASE("propose parses the reply; one reprompt on parse failure") {
  OptFixture fx;
  SUBCASE("clean reply") {
    ScriptedBackend backend(
        {entry(ModelRole::kOptimizer, {"task_instruction"}, fenced_proposal("r", "better"))});
    Proposal p = propose(fx.graph, fx.target, {fx.peer}, {}, {}, {}, 0, 0.0, backend);
    CHECK(p.proposed_variable == "better");
    CHECK(p.target_param == fx.target);
  }
  SUBCASE("garbage then a valid retry succeeds") {
    UsageLedger ledger;
    ScriptedBackend backend(
        {
            entry(ModelRole::kOptimizer, {"task_instruction"}, "no json here", 1),
            entry(ModelRole::kOptimizer, {"could not be parsed"}, fenced_proposal("r", "fixed")),
        },
        &ledger);
    Proposal p = propose(fx.graph, fx.target, {}, {}, {}, {}, 0, 0.0, backend);
    CHECK(p.proposed_variable == "fixed");
    CHECK(ledger.by_phase(Phase::kPropose).requests == 2);
  }
  SUBCASE("two bad replies escape as a parse error") {
    ScriptedBackend backend({entry(ModelRole::kOptimizer, {}, "still not json")});
    CHECK_THROWS_AS(propose(fx.graph, fx.target, {}, {}, {}, {}, 0, 0.0, backend),
                    ProposalParseError);
  }
}

TEST_CASE("apply/revert round-trips exactly") {
  OptFixture fx;
  std::string original = fx.graph.at(fx.target).data;
  Proposal p{fx.target, "r", "proposed value"};
  RevertToken token = apply_proposal(fx.graph, fx.target, p);
  CHECK(fx.graph.at(fx.target).data == "proposed value");
  revert(fx.graph, token);
  CHECK(fx.graph.at(fx.target).data == original);

  SUBCASE("LIFO discipline over two applies") {
    RevertToken t1 = apply_proposal(fx.graph, fx.target, {fx.target, "r", "v1"});
    RevertToken t2 = apply_proposal(fx.graph, fx.target, {fx.target, "r", "v2"});
    revert(fx.graph, t2);
    revert(fx.graph, t1);
    CHECK(fx.graph.at(fx.target).data == original);
  }
  SUBCASE("stale token errors") {
    RevertToken t1 = apply_proposal(fx.graph, fx.target, {fx.target, "r", "v1"});
    apply_proposal(fx.graph, fx.target, {fx.target, "r", "v2"});
    CHECK_THROWS_WITH_AS(revert(fx.graph, t1), doctest::Contains("stale"), GraphError);
  }
}

TEST_CASE("record_outcome keeps SH sorted, bounded; CH collects rejects") {
  std::vector<HistoryEntry> sh{{"old", 0.76, 1}};
  std::vector<FailedProposal> ch;

  record_outcome(sh, ch, {ParamId{0}, "why", "accepted at 0.84"}, true, 0.84, true, 2, 5);
  REQUIRE(sh.size() == 2);
  CHECK(sh[0].val_score == 0.84);
  CHECK(sh[1].val_score == 0.76);
  CHECK(ch.empty());

  record_outcome(sh, ch, {ParamId{0}, "meh", "rejected"}, false, std::nullopt, false, 3, 5);
  CHECK(sh.size() == 2);
  REQUIRE(ch.size() == 1);
  CHECK(ch[0].value == "rejected");
  CHECK(ch[0].method == "meh");

  SUBCASE("capacity evicts the worst") {
    for (double s : {0.5, 0.6, 0.7}) record_outcome(sh, ch, {ParamId{0}, "r", "v"}, true, s, true, 4, 4);
    CHECK(sh.size() == 4);
    CHECK(sh.front().val_score == 0.84);
    CHECK(sh.back().val_score == 0.6);  // 0.5 evicted
  }
  SUBCASE("minibatch pass but val regression lands in CH") {
    record_outcome(sh, ch, {ParamId{0}, "r", "overfit"}, true, 0.3, false, 4, 5);
    CHECK(ch.back().value == "overfit");
    CHECK(sh.size() == 2);
  }
}
