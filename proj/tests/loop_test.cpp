#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "clio/cognitive_loop.hpp"
#include "clio/error.hpp"
#include "hand_traces.hpp"
#include "support.hpp"

namespace clio {
namespace {

using test::LoopScript;

GatewayOptions no_backoff() {
  GatewayOptions o;
  o.backoff_base = std::chrono::milliseconds(0);
  return o;
}

struct Harness {
  std::shared_ptr<ScriptedBackend> backend;
  Gateway gateway;
  CognitiveLoop loop;
  RunContext run;

  explicit Harness(const LoopScript& script, int parallel = 1, RunContextOptions opts = {})
      : backend(test::loop_backend(script)),
        gateway(backend, no_backoff()),
        loop(gateway, [&] {
          LoopConfig c;
          c.max_parallel_channels = parallel;
          return c;
        }()),
        run("run-test", std::move(opts)) {}
};

// --- hand-traced executions ---------------------------------------------------

class HandTraced : public ::testing::TestWithParam<test::HandTrace> {};

TEST_P(HandTraced, SequentialLogMatchesExactly) {
  const auto& h = GetParam();
  Harness hx(h.script);
  auto out = hx.loop.run_channel("Which immunoglobulin crosses the placenta?", test::params(h.b, h.D, h.tau), hx.run);
  EXPECT_EQ(test::compact(out.events), h.events);
  std::vector<std::string> visited;
  for (const auto& s : out.result.visited) visited.push_back(s.id);
  EXPECT_EQ(visited, h.visited);
  EXPECT_EQ(out.result.call_count, h.calls);
  EXPECT_EQ(test::metered_calls(out.events), h.calls);
  EXPECT_LE(h.calls, max_model_calls(h.b, h.D));
  EXPECT_EQ(out.answer.id, h.answer_state);
}

TEST_P(HandTraced, ParallelLogIsAPermutationOfSiblings) {
  const auto& h = GetParam();
  Harness hx(h.script, 4);
  auto out = hx.loop.run_channel("Which immunoglobulin crosses the placenta?", test::params(h.b, h.D, h.tau), hx.run);
  const auto seq = test::compact(out.events);
  auto got = seq;
  auto want = h.events;
  std::sort(got.begin(), got.end());
  std::sort(want.begin(), want.end());
  EXPECT_EQ(got, want);
  std::multiset<std::string> ids, expected(h.visited.begin(), h.visited.end());
  for (const auto& s : out.result.visited) ids.insert(s.id);
  EXPECT_EQ(ids, expected);
  EXPECT_EQ(out.result.call_count, h.calls);
  // The parent is always logged before its children and each child's
  // events stay in order relative to one another.
  std::map<std::string, std::size_t> first;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const auto& e = seq[i];
    if (e.rfind("spawn:", 0) == 0) first.emplace(e.substr(6), i);
  }
  for (const auto& [ch, pos] : first) {
    const auto dot = ch.rfind('.');
    if (dot == std::string::npos) continue;
    const auto parent = ch.substr(0, dot);
    if (first.count(parent)) {
      EXPECT_LT(first[parent], pos) << ch;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Cases, HandTraced, ::testing::ValuesIn(test::hand_traces()),
                         [](const auto& info) { return info.param.name; });

// --- single operations -----------------------------------------------------------

SemanticState root_state(const ChannelParams& p = test::params(2, 1)) {
  return init_state("Which cytokine drives Th1 differentiation?", p);
}

TEST(AssessConfidence, ReadsFixtureValue) {
  for (double c : {0.92, 0.0, 1.0}) {
    LoopScript s;
    s.default_confidence = c;
    Harness hx(s);
    auto st = root_state();
    EXPECT_DOUBLE_EQ(hx.loop.assess_confidence(st, hx.run), c);
    EXPECT_EQ(st.confidence_c, c);
  }
}

TEST(AssessConfidence, OutOfRangeTwiceIsMalformed) {
  Harness hx(LoopScript{});
  hx.backend->set_default("confidence", ScriptedReply::text("confidence: 1.2"));
  auto st = root_state();
  try {
    hx.loop.assess_confidence(st, hx.run);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::malformed_response);
  }
  EXPECT_EQ(hx.backend->request_count("confidence"), 2u);
}

TEST(AssessConfidence, AddressingOnlyCountsVisibleOpenIds) {
  Harness hx(LoopScript{});
  auto st = root_state();
  hx.backend->set_default("confidence", ScriptedReply::text("confidence: 0.4\nuncertainty: 0.6 | dosing"));
  hx.loop.assess_confidence(st, hx.run);
  hx.backend->set_default("confidence",
                          ScriptedReply::text("confidence: 0.8\nuncertainty: 0.2 | minor\naddressed: u0, u99"));
  hx.loop.assess_confidence(st, hx.run);
  std::vector<RunEvent> unc;
  for (const auto& e : hx.run.events())
    if (e.kind == EventKind::uncertainty) unc.push_back(e);
  ASSERT_EQ(unc.size(), 2u);
  EXPECT_EQ(unc[1].payload["addressed_prior_ids"], json::array({"u0"}));
  EXPECT_TRUE(hx.run.open_uncertainties("c0").size() == 1);
}

TEST(ComputeCoverage, GateFollowsThreshold) {
  struct Case {
    std::string checklist;
    double expected;
    bool registered;
  };
  const std::vector<Case> cases = {
      {"- [x] a\n- [x] b\n- [x] c\n- [ ] d", 0.75, false},
      {"- [x] a\n- [x] b\n- [x] c\n- [x] d", 1.0, true},
      {"- [ ] a\n- [ ] b\n- [ ] c\n- [ ] d\n- [ ] e", 0.0, false},
  };
  for (const auto& c : cases) {
    Harness hx(LoopScript{});
    hx.backend->set_default("coverage", ScriptedReply::text(c.checklist));
    auto st = root_state();
    EXPECT_DOUBLE_EQ(hx.loop.compute_coverage(st, hx.run), c.expected);
    EXPECT_EQ(st.completion_registered, c.registered);
    ASSERT_TRUE(st.checklist);
    EXPECT_EQ(st.checklist->generated_at_depth, 0);
  }
}

TEST(ComputeCoverage, SecondCallUpdatesTheSameChecklist) {
  Harness hx(LoopScript{});
  auto st = root_state();
  hx.loop.compute_coverage(st, hx.run);
  hx.loop.compute_coverage(st, hx.run);
  auto reqs = hx.backend->requests();
  ASSERT_EQ(reqs.size(), 2u);
  EXPECT_NE(reqs[1].messages.back().content.find("mechanism"), std::string::npos);
  auto ev = hx.run.events();
  EXPECT_EQ(ev[1].payload["generated"], true);
  EXPECT_EQ(ev[3].payload["generated"], false);
}

TEST(CheckCompletion, UnregisteredMakesNoCall) {
  Harness hx(LoopScript{});
  auto st = root_state();
  int tally = 0;
  EXPECT_FALSE(hx.loop.check_completion(st, hx.run, &tally).terminal);
  EXPECT_EQ(tally, 0);
  EXPECT_EQ(hx.backend->request_count(), 0u);
}

TEST(CheckCompletion, ToolInvocationIsTerminalFreeTextIsNot) {
  Harness hx(LoopScript{});
  auto st = root_state();
  st.completion_registered = true;
  hx.backend->set_default("completion", ScriptedReply::tool("complete_thought_channel", json{{"rationale", "ok"}}));
  EXPECT_TRUE(hx.loop.check_completion(st, hx.run).terminal);
  hx.backend->set_default("completion", ScriptedReply::text("I think we are done."));
  EXPECT_FALSE(hx.loop.check_completion(st, hx.run).terminal);
  auto req = hx.backend->requests().front();
  ASSERT_EQ(req.tools.size(), 1u);
  EXPECT_EQ(req.tools[0].name, "complete_thought_channel");
}

TEST(SampleNext, ChildrenHaveFreshContexts) {
  Harness hx(LoopScript{});
  ScriptRule one;
  one.purpose = "sample";
  one.channel = "c0.1";
  one.replies = {ScriptedReply::text("SIBLING-ONE-TEXT: IL-12 acts via STAT4.")};
  hx.backend->add_rule(one);
  auto st = root_state();
  auto kids = hx.loop.sample_next(st, 2, hx.run);
  ASSERT_EQ(kids.size(), 2u);
  EXPECT_EQ(kids[0].id, "c0.1");
  EXPECT_EQ(kids[1].id, "c0.2");
  for (const auto& k : kids) {
    EXPECT_EQ(k.depth_d, 1);
    EXPECT_EQ(k.question, st.question);
    EXPECT_EQ(k.parent_id, std::optional<std::string>("c0"));
  }
  EXPECT_EQ(kids[0].thought, "SIBLING-ONE-TEXT: IL-12 acts via STAT4.");
  for (const auto& r : hx.backend->requests()) {
    if (r.channel_id != "c0.2") continue;
    for (const auto& m : r.messages) EXPECT_EQ(m.content.find("SIBLING-ONE-TEXT"), std::string::npos);
  }
}

TEST(SampleNext, ChildTemperatureAndEvalTemperature) {
  Harness hx(LoopScript{});
  auto st = root_state();
  hx.loop.sample_next(st, 1, hx.run);
  for (const auto& r : hx.backend->requests()) {
    if (r.purpose == "optimize") EXPECT_DOUBLE_EQ(r.temperature, 0.0);
    if (r.purpose == "sample") EXPECT_DOUBLE_EQ(r.temperature, 1.0);
  }
}

TEST(SelfOptimize, ProposalsAreAppliedAndClamped) {
  Harness hx(LoopScript{});
  auto st = root_state(test::params(3, 2, 0.8));
  hx.backend->set_default("optimize", ScriptedReply::text("focus: statistical power analysis"));
  std::vector<std::string> unresolved{"unsure about statistical power"};
  auto p = hx.loop.self_optimize(st, unresolved, hx.run);
  EXPECT_EQ(p.focus, "statistical power analysis");
  EXPECT_EQ(p.branching_factor_b, 3);
  EXPECT_EQ(p.max_depth_D, 2);
  EXPECT_DOUBLE_EQ(p.confidence_threshold_tau, 0.8);
  EXPECT_NE(hx.backend->requests().back().messages.back().content.find("unsure about statistical power"),
            std::string::npos);

  hx.backend->set_default("optimize", ScriptedReply::text("no changes needed"));
  EXPECT_EQ(hx.loop.self_optimize(st, {}, hx.run), st.params);
  hx.backend->set_default("optimize", ScriptedReply::text("max_depth_D: 99"));
  EXPECT_EQ(hx.loop.self_optimize(st, {}, hx.run).max_depth_D, 2);
}

TEST(Synthesize, SingleResultIsQuoted) {
  Harness hx(LoopScript{});
  hx.backend->set_default("synthesize", ScriptedReply::text("Synthesis: IL-12 drives Th1, as s1 concluded."));
  auto parent = root_state();
  auto s1 = parent;
  s1.id = "c0.1";
  s1.thought = "s1 concludes IL-12.";
  std::vector<SemanticState> in{s1};
  auto out = hx.loop.synthesize(in, parent, hx.run);
  EXPECT_EQ(out.id, "c0.syn");
  EXPECT_EQ(out.depth_d, parent.depth_d);
  EXPECT_EQ(out.thought, "Synthesis: IL-12 drives Th1, as s1 concluded.");
  EXPECT_TRUE(out.confidence_c.has_value());
}

TEST(Synthesize, EmptyResultsFallBackToParent) {
  Harness hx(LoopScript{});
  auto parent = root_state();
  int tally = 0;
  auto out = hx.loop.synthesize({}, parent, hx.run, &tally);
  EXPECT_EQ(out.id, parent.id);
  EXPECT_EQ(out.confidence_c, 0.0);
  EXPECT_NE(std::find(out.annotations.begin(), out.annotations.end(), "no confident findings"), out.annotations.end());
  EXPECT_EQ(tally, 0);
}

TEST(Synthesize, ContradictoryInputsBothReachTheModel) {
  Harness hx(LoopScript{});
  auto parent = root_state();
  auto a = parent, b = parent;
  a.id = "c0.1";
  a.thought = "It is IgG.";
  b.id = "c0.2";
  b.thought = "It is definitely IgM.";
  std::vector<SemanticState> in{a, b};
  hx.loop.synthesize(in, parent, hx.run);
  const auto req = hx.backend->requests().front();
  EXPECT_EQ(req.purpose, "synthesize");
  EXPECT_NE(req.messages.back().content.find("It is IgG."), std::string::npos);
  EXPECT_NE(req.messages.back().content.find("It is definitely IgM."), std::string::npos);
}

// --- whole runs -----------------------------------------------------------------

TEST(Clio, ConfidentRootExpandsNothing) {
  LoopScript s;
  s.confidence = {{"c0", 0.92}};
  Harness hx(s);
  auto out = hx.loop.clio(root_state(test::params(2, 2, 0.85)), 0, hx.run);
  ASSERT_EQ(out.states.size(), 1u);
  EXPECT_EQ(out.states[0].id, "c0");
  for (const auto& e : hx.run.events()) EXPECT_NE(e.kind, EventKind::spawn);
}

TEST(Clio, SpawnBoundForB2D2) {
  Harness hx(LoopScript{}, 1);
  EXPECT_EQ(max_spawned_states(2, 2), 2 + 4 + 8);
  auto out = hx.loop.run_channel("Q?", test::params(2, 2), hx.run);
  int spawned = 0;
  for (const auto& e : out.events)
    if (e.kind == EventKind::spawn && !e.payload.value("synthesis", false) && !e.payload["parent_id"].is_null())
      ++spawned;
  EXPECT_EQ(spawned, 14);
  EXPECT_LE(test::metered_calls(out.events), max_model_calls(2, 2));
}

TEST(RunChannel, HappyPathEndsWithAnswer) {
  LoopScript s;
  s.confidence = {{"c0.1", 0.9}};
  Harness hx(s);
  auto out = hx.loop.run_channel("Q?", test::params(1, 1), hx.run);
  ASSERT_FALSE(out.events.empty());
  EXPECT_EQ(out.events.back().kind, EventKind::answer);
  EXPECT_EQ(out.events.back().payload["answer"], out.answer.thought);
  EXPECT_EQ(out.events.back().payload["call_count"], out.result.call_count);
  for (std::size_t i = 0; i < out.events.size(); ++i) EXPECT_EQ(out.events[i].seq, i);
}

TEST(RunChannel, TerminateMidRunCancels) {
  RunContext run("r");
  int calls = 0;
  auto backend = std::make_shared<test::FunctionBackend>([&](const ModelRequest& r) {
    if (++calls == 4) run.terminate(std::nullopt);
    if (r.purpose == "coverage") return test::text("- [ ] a");
    if (r.purpose == "confidence") return test::text("confidence: 0.2");
    return test::text("thinking");
  });
  Gateway g(backend, no_backoff());
  CognitiveLoop loop(g, LoopConfig{1.0, 0.0, 500, 1, 1200});
  try {
    loop.run_channel("Q?", test::params(2, 2), run);
    FAIL() << "run completed despite termination";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::cancelled);
  }
  auto ev = run.events();
  auto term = std::find_if(ev.begin(), ev.end(), [](const auto& e) { return e.kind == EventKind::terminate; });
  ASSERT_NE(term, ev.end());
  // Only the call already in flight may be logged after the terminate.
  int after = 0;
  for (auto it = term; it != ev.end(); ++it)
    if (it->kind == EventKind::model_call) ++after;
  EXPECT_LE(after, 1);
  EXPECT_EQ(calls, 4);
}

TEST(RunChannel, InterjectionReachesLaterSampleContexts) {
  RunContext run("r");
  auto backend = std::make_shared<test::FunctionBackend>([&](const ModelRequest& r) {
    if (r.purpose == "coverage") return test::text("- [x] a\n- [ ] b");
    if (r.purpose == "confidence") {
      if (r.channel_id == "c0") run.interject(std::nullopt, "focus on isotype switching");
      return test::text("confidence: 0.2");
    }
    return test::text("thinking");
  });
  Gateway g(backend, no_backoff());
  CognitiveLoop loop(g, LoopConfig{1.0, 0.0, 500, 1, 1200});
  loop.run_channel("Q?", test::params(2, 1), run);
  int samples = 0;
  for (const auto& r : backend->requests()) {
    if (r.purpose != "sample") continue;
    ++samples;
    std::string all;
    for (const auto& m : r.messages) all += m.content;
    EXPECT_NE(all.find("focus on isotype switching"), std::string::npos) << r.channel_id;
  }
  EXPECT_GT(samples, 0);
}

TEST(RunChannel, ChannelScopedInterjectionStaysInScope) {
  Harness hx(LoopScript{}, 1);
  hx.run.emit("c0.1", EventKind::spawn, json{{"parent_id", "c0"}});
  hx.run.interject(std::string("c0.1"), "only for branch one");
  EXPECT_EQ(hx.run.guidance_for("c0.1.f2").size(), 1u);
  EXPECT_EQ(hx.run.guidance_for("c0.2").size(), 0u);
  EXPECT_EQ(hx.run.guidance_for("c0").size(), 0u);
}

TEST(RunChannel, BudgetExhaustionStillAnswers) {
  RunContextOptions opts;
  opts.call_budget = 7;
  Harness hx(LoopScript{}, 1, opts);
  auto out = hx.loop.run_channel("Q?", test::params(3, 2), hx.run);
  EXPECT_TRUE(out.budget_exhausted);
  EXPECT_LE(test::metered_calls(out.events), 7);
  EXPECT_EQ(out.events.back().kind, EventKind::answer);
  EXPECT_EQ(out.events.back().payload["budget_exhausted"], true);
}

TEST(LoopConfig, ValidationAndMerge) {
  EXPECT_THROW(validate(LoopConfig{1.0, 0.0, 0, 1, 100}), ConfigError);
  EXPECT_THROW(validate(LoopConfig{1.0, 0.0, 10, 0, 100}), ConfigError);
  auto c = merge_loop_config(LoopConfig{}, json{{"budget", 12}, {"max_parallel_channels", 2}});
  EXPECT_EQ(c.call_budget, 12);
  EXPECT_EQ(c.max_parallel_channels, 2);
}

// --- randomized safety -----------------------------------------------------------

struct RandomRun {
  int b, D, budget, parallel;
  double tau;
  std::uint64_t seed;
  int terminate_at;  // 0: never
  std::string terminate_scope;
};

double unit(std::uint64_t h) { return static_cast<double>(h % 10007) / 10006.0; }

void check_random_run(const RandomRun& c) {
  RunContextOptions opts;
  opts.call_budget = c.budget;
  RunContext run("rand", opts);
  std::atomic<int> calls{0};
  auto backend = std::make_shared<test::FunctionBackend>([&](const ModelRequest& r) {
    const int n = ++calls;
    if (c.terminate_at && n == c.terminate_at)
      run.terminate(c.terminate_scope.empty() ? std::nullopt : std::optional<std::string>(c.terminate_scope));
    const auto h = fnv1a64(r.channel_id + "/" + r.purpose + "/" + std::to_string(c.seed));
    if (r.purpose == "coverage") {
      std::string list;
      for (int i = 0; i < 4; ++i) list += (h >> (i * 8)) % 3 ? "- [x] item\n" : "- [ ] item\n";
      return test::text(list);
    }
    if (r.purpose == "completion") return (h % 2) ? test::completion_tool_call() : test::text("not yet");
    if (r.purpose == "confidence") {
      std::ostringstream out;
      out << "confidence: " << unit(h) << "\nuncertainty: " << unit(h >> 17) << " | open point";
      return test::text(out.str());
    }
    if (r.purpose == "optimize") return test::text("max_depth_D: " + std::to_string(h % 5) + "\nb: 9");
    return test::text("thought " + std::to_string(h % 1000));
  });
  Gateway g(backend, no_backoff());
  LoopConfig lc;
  lc.max_parallel_channels = c.parallel;
  CognitiveLoop loop(g, lc);
  bool cancelled = false;
  try {
    loop.run_channel("Random question?", test::params(c.b, c.D, c.tau), run);
  } catch (const Error& e) {
    ASSERT_EQ(e.code(), Errc::cancelled) << e.what();
    cancelled = true;
  }
  const auto ev = run.events();
  const int metered = test::metered_calls(ev);
  EXPECT_LE(metered, c.budget);
  EXPECT_LE(metered, max_model_calls(c.b, c.D));
  int spawned = 0;
  for (const auto& e : ev) {
    if (e.kind != EventKind::spawn) continue;
    EXPECT_LE(e.payload.value("depth", 0), c.D + 1) << e.channel_id;
    if (!e.payload["parent_id"].is_null() && !e.payload.value("synthesis", false)) ++spawned;
  }
  EXPECT_LE(spawned, max_spawned_states(c.b, c.D));
  // No model call is logged in a scope once it is terminated.
  std::optional<std::string> scope;
  for (const auto& e : ev) {
    if (e.kind == EventKind::terminate) scope = e.payload.value("scope", std::string{});
    if (scope && e.kind == EventKind::model_call) EXPECT_FALSE(in_scope(e.channel_id, *scope)) << e.channel_id;
  }
  if (!c.terminate_at) {
    EXPECT_FALSE(cancelled);
    EXPECT_EQ(ev.back().kind, EventKind::answer);
  }
}

TEST(LoopProperties, RandomizedRunsStayBoundedAndTerminate) {
  std::mt19937_64 rng(20240611);
  for (int i = 0; i < 240; ++i) {
    RandomRun c;
    c.b = 1 + static_cast<int>(rng() % 3);
    c.D = static_cast<int>(rng() % 3);
    c.tau = 0.3 + 0.7 * unit(rng());
    c.budget = 3 + static_cast<int>(rng() % 80);
    c.parallel = 1 + static_cast<int>(rng() % 4);
    c.seed = rng();
    c.terminate_at = (rng() % 4 == 0) ? 1 + static_cast<int>(rng() % 20) : 0;
    c.terminate_scope = (rng() % 2) ? "" : "c0.1";
    SCOPED_TRACE("case " + std::to_string(i) + " b=" + std::to_string(c.b) + " D=" + std::to_string(c.D) +
                 " budget=" + std::to_string(c.budget));
    check_random_run(c);
  }
}

}  // namespace
}  // namespace clio
