// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "clio/bench.hpp"
#include "clio/cognitive_loop.hpp"
#include "clio/error.hpp"
#include "clio/graph.hpp"
#include "clio/run_manager.hpp"
#include "clio/telemetry.hpp"
#include "hand_traces.hpp"
#include "support.hpp"

namespace clio {
namespace {

using namespace std::chrono_literals;

const std::filesystem::path kFixtures = std::filesystem::path(CLIO_SOURCE_DIR) / "fixtures" / "bench";

/// Collects failed checks for one criterion.
struct Check {
  std::vector<std::string> failures;
  std::string summary;

  bool expect(bool ok, const std::string& what) {
    if (!ok && failures.size() < 8) failures.push_back(what);
    return ok;
  }
};

GatewayOptions no_backoff() {
  GatewayOptions o;
  o.backoff_base = 0ms;
  return o;
}

// --- 1. loop conformance -----------------------------------------------------------

void loop_conformance(Check& c) {
  std::set<int> bs, Ds;
  std::set<double> taus;
  int configs = 0;
  for (const auto& h : test::hand_traces()) {
    for (int parallel : {1, 4}) {
      auto backend = test::loop_backend(h.script);
      Gateway g(backend, no_backoff());
      LoopConfig lc;
      lc.max_parallel_channels = parallel;
      CognitiveLoop loop(g, lc);
      RunContext run("acc");
      auto out = loop.run_channel("Which immunoglobulin crosses the placenta?", test::params(h.b, h.D, h.tau), run);
      const auto got = test::compact(out.events);
      std::vector<std::string> visited;
      for (const auto& s : out.result.visited) visited.push_back(s.id);
      const std::string tag = h.name + (parallel > 1 ? " (parallel)" : "");
      if (parallel == 1) {
        c.expect(got == h.events, tag + ": event log differs");
        c.expect(visited == h.visited, tag + ": visited states differ");
      } else {
        auto a = got, b = h.events;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        c.expect(a == b, tag + ": event multiset differs");
        auto va = visited, vb = h.visited;
        std::sort(va.begin(), va.end());
        std::sort(vb.begin(), vb.end());
        c.expect(va == vb, tag + ": visited set differs");
      }
      c.expect(out.result.call_count == h.calls, tag + ": call count");
      c.expect(test::metered_calls(out.events) == h.calls, tag + ": metered calls");
      c.expect(h.calls <= max_model_calls(h.b, h.D), tag + ": call bound");
      c.expect(out.answer.id == h.answer_state, tag + ": answer state");
    }
    bs.insert(h.b);
    Ds.insert(h.D);
    taus.insert(h.tau);
    ++configs;
  }
  c.expect(configs >= 5 && bs == std::set<int>{1, 2, 3} && Ds == std::set<int>{0, 1, 2} && taus.size() >= 2,
           "configuration coverage");
  c.summary = std::to_string(configs) + " hand-traced configurations, sequential and parallel";
}

// --- 2. depth and termination safety ----------------------------------------------------

double unit(std::uint64_t h) { return static_cast<double>(h % 10007) / 10006.0; }

void depth_safety(Check& c) {
  std::mt19937_64 rng(99173);
  const int cases = 240;
  for (int i = 0; i < cases; ++i) {
    const int b = 1 + static_cast<int>(rng() % 3);
    const int D = static_cast<int>(rng() % 3);
    const double tau = 0.3 + 0.7 * unit(rng());
    const int budget = 3 + static_cast<int>(rng() % 80);
    const int parallel = 1 + static_cast<int>(rng() % 4);
    const auto seed = rng();
    const int terminate_at = (rng() % 4 == 0) ? 1 + static_cast<int>(rng() % 20) : 0;
    const std::string scope = (rng() % 2) ? "" : "c0.1";
    const std::string tag = "case " + std::to_string(i);

    RunContextOptions opts;
    opts.call_budget = budget;
    RunContext run("rand", opts);
    std::atomic<int> calls{0};
    auto backend = std::make_shared<test::FunctionBackend>([&](const ModelRequest& r) {
      if (terminate_at && ++calls == terminate_at)
        run.terminate(scope.empty() ? std::nullopt : std::optional<std::string>(scope));
      const auto h = fnv1a64(r.channel_id + "/" + r.purpose + "/" + std::to_string(seed));
      if (r.purpose == "coverage") {
        std::string list;
        for (int k = 0; k < 4; ++k) list += (h >> (k * 8)) % 3 ? "- [x] item\n" : "- [ ] item\n";
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
    lc.max_parallel_channels = parallel;
    CognitiveLoop loop(g, lc);
    bool cancelled = false;
    try {
      loop.run_channel("Random question?", test::params(b, D, tau), run);
    } catch (const Error& e) {
      if (!c.expect(e.code() == Errc::cancelled, tag + ": unexpected error " + e.what())) continue;
      cancelled = true;
    }
    const auto ev = run.events();
    const int metered = test::metered_calls(ev);
    c.expect(metered <= budget, tag + ": budget exceeded");
    c.expect(metered <= max_model_calls(b, D), tag + ": call bound exceeded");
    for (const auto& e : ev)
      if (e.kind == EventKind::spawn) c.expect(e.payload.value("depth", 0) <= D + 1, tag + ": depth > D+1");
    if (!terminate_at)
      c.expect(!cancelled && !ev.empty() && ev.back().kind == EventKind::answer, tag + ": no answer");
  }
  c.summary = std::to_string(cases) + " randomized runs";
}

// --- 3. clustering oracle ------------------------------------------------------------------

using Matrix = std::vector<std::vector<double>>;

double oracle_modularity(const WeightedGraph& g, const std::vector<int>& c) {
  Matrix a(g.n, std::vector<double>(g.n, 0.0));
  for (const auto& [u, v, w] : g.edges) {
    a[u][v] += w;
    if (u != v) a[v][u] += w;
  }
  std::vector<double> k(g.n, 0.0);
  double two_m = 0;
  for (int i = 0; i < g.n; ++i)
    for (int j = 0; j < g.n; ++j) {
      k[i] += a[i][j];
      two_m += a[i][j];
    }
  if (two_m == 0) return 0;
  double q = 0;
  for (int i = 0; i < g.n; ++i)
    for (int j = 0; j < g.n; ++j)
      if (c[i] == c[j]) q += a[i][j] - k[i] * k[j] / two_m;
  return q / two_m;
}

double exhaustive_best(const WeightedGraph& g) {
  if (g.n == 0) return 0;
  std::vector<int> c(g.n, 0);
  double best = -1;
  std::function<void(int, int)> rec = [&](int i, int used) {
    if (i == g.n) {
      best = std::max(best, oracle_modularity(g, c));
      return;
    }
    for (int label = 0; label <= used; ++label) {
      c[i] = label;
      rec(i + 1, std::max(used, label + 1));
    }
  };
  rec(0, 0);
  return best;
}

WeightedGraph clique(int n, int offset = 0, WeightedGraph g = {}) {
  g.n = std::max(g.n, offset + n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) g.edges.emplace_back(offset + i, offset + j, 1.0);
  return g;
}

WeightedGraph path(int n) {
  WeightedGraph g{n, {}};
  for (int i = 0; i + 1 < n; ++i) g.edges.emplace_back(i, i + 1, 1.0);
  return g;
}

std::vector<std::pair<std::string, WeightedGraph>> oracle_graphs() {
  std::vector<std::pair<std::string, WeightedGraph>> out;
  for (int n = 2; n <= 8; ++n) out.emplace_back("path" + std::to_string(n), path(n));
  for (int n = 3; n <= 8; ++n) out.emplace_back("clique" + std::to_string(n), clique(n));
  {
    auto g = clique(3, 3, clique(3));
    g.edges.emplace_back(2, 3, 1.0);
    out.emplace_back("barbell_3_3", g);
  }
  {
    auto g = clique(4, 4, clique(4));
    g.edges.emplace_back(3, 4, 1.0);
    out.emplace_back("barbell_4_4", g);
  }
  out.emplace_back("two_triangles", clique(3, 3, clique(3)));
  out.emplace_back("three_edges", WeightedGraph{6, {{0, 1, 1.0}, {2, 3, 1.0}, {4, 5, 1.0}}});
  {
    auto g = clique(4, 0, WeightedGraph{7, {}});
    g.edges.emplace_back(4, 5, 1.0);
    out.emplace_back("clique_edge_isolated", g);
  }
  {
    WeightedGraph g{8, {}};
    for (int i = 0; i < 8; ++i) g.edges.emplace_back(i, (i + 1) % 8, 1.0);
    out.emplace_back("cycle8", g);
  }
  {
    WeightedGraph g{7, {}};
    for (int i = 1; i < 7; ++i) g.edges.emplace_back(0, i, 1.0);
    out.emplace_back("star7", g);
  }
  std::mt19937_64 rng(31);
  for (int k = 0; k < 20; ++k) {
    WeightedGraph g{4 + static_cast<int>(rng() % 5), {}};
    const double density = 0.3 + 0.4 * static_cast<double>(rng() % 100) / 100.0;
    for (int i = 0; i < g.n; ++i)
      for (int j = i + 1; j < g.n; ++j)
        if (static_cast<double>(rng() % 1000) / 1000.0 < density) g.edges.emplace_back(i, j, 1.0);
    if (g.edges.empty()) g.edges.emplace_back(0, 1, 1.0);
    out.emplace_back("random" + std::to_string(k), g);
  }
  return out;
}

void clustering_oracle(Check& c) {
  int cases = 0;
  for (const auto& [name, g] : oracle_graphs()) {
    GraphFragment f;
    for (int i = 0; i < g.n; ++i) f.add_entity({"n" + std::to_string(i), "thing", "", {}});
    for (const auto& [u, v, w] : g.edges) f.add_relation({"n" + std::to_string(u), "n" + std::to_string(v), "", 1.0});
    const std::vector<GraphFragment> fragments{f};
    const auto graph = cluster_graph(build_graph(fragments));
    // Nodes are sorted by name; map back to indices. Level 0 is the coarsest.
    std::vector<int> membership(g.n, 0);
    for (const auto& node : graph.nodes) membership[std::stoi(node.name.substr(1))] = node.communities.front();
    const double got = oracle_modularity(g, membership);
    const double best = exhaustive_best(g);
    c.expect(std::abs(got - best) <= 1e-9, name + ": modularity " + std::to_string(got) + " vs " + std::to_string(best));
    ++cases;
  }
  c.expect(cases >= 25, "fewer than 25 graphs");
  c.summary = std::to_string(cases) + " graphs with n <= 8 against exhaustive search";
}

// --- 4. graph merge invariance --------------------------------------------------------------

void merge_invariance(Check& c) {
  const std::vector<std::string> vocab{"IgG", "IgM", "FcRn", "placenta", "IL-4", "IL-12", "Th1", "Th2",
                                       "STAT4", "STAT6", "B cell", "mast cell"};
  std::mt19937_64 rng(4242);
  auto shape = [](const ThoughtGraph& g) {
    std::map<std::string, int> nodes;
    std::map<std::pair<std::string, std::string>, int> edges;
    for (const auto& n : g.nodes) nodes[n.name] = n.occurrence_count;
    for (const auto& e : g.edges) edges[{e.source, e.target}] = e.weight;
    return std::make_pair(nodes, edges);
  };
  int shuffles = 0;
  for (int base = 0; base < 10; ++base) {
    std::vector<GraphFragment> fragments(3 + rng() % 5);
    for (auto& f : fragments) {
      const int entities = 2 + static_cast<int>(rng() % 5);
      for (int i = 0; i < entities; ++i) {
        auto name = vocab[rng() % vocab.size()];
        if (rng() % 2) std::transform(name.begin(), name.end(), name.begin(), ::toupper);
        f.add_entity({name, "t", "d" + std::to_string(rng() % 3), {}});
      }
      const int relations = static_cast<int>(rng() % 5);
      for (int i = 0; i < relations; ++i)
        f.add_relation({vocab[rng() % vocab.size()], vocab[rng() % vocab.size()], "r", 0.25 * (1 + rng() % 4)});
    }
    const auto want = shape(build_graph(fragments));
    for (int s = 0; s < 12; ++s) {
      std::shuffle(fragments.begin(), fragments.end(), rng);
      c.expect(shape(build_graph(fragments)) == want, "base " + std::to_string(base) + " shuffle " + std::to_string(s));
      ++shuffles;
    }
  }
  c.expect(shuffles >= 100, "fewer than 100 shuffles");
  c.summary = std::to_string(shuffles) + " fragment-order shuffles";
}

// --- 5. DRIFT accounting ----------------------------------------------------------------------

void drift_accounting(Check& c) {
  auto backend = std::make_shared<ScriptedBackend>(32);
  backend->set_default("coverage", ScriptedReply::text("- [x] a\n- [ ] b\n- [ ] c"));
  backend->set_default("confidence", ScriptedReply::text("confidence: 0.9"));
  backend->set_default("synthesize", ScriptedReply::text("IgG crosses via FcRn."));
  backend->set_default("extract", ScriptedReply::text("entity: IgG | antibody | crosses\n"
                                                      "entity: FcRn | receptor | transports\n"
                                                      "entity: placenta | organ | barrier\n"
                                                      "entity: IgM | antibody | too large\n"
                                                      "entity: pentamer | structure | size\n"
                                                      "entity: B cell | cell | secretes\n"
                                                      "relation: IgG | FcRn | binds\n"
                                                      "relation: FcRn | placenta | expressed in\n"
                                                      "relation: IgG | placenta | crosses\n"
                                                      "relation: IgM | pentamer | forms\n"
                                                      "relation: pentamer | B cell | secreted by\n"
                                                      "relation: IgM | B cell | made by\n"
                                                      "relation: placenta | IgM | blocks"));
  backend->set_default("summarize", ScriptedReply::text("Community summary."));
  backend->set_default("drift_primer",
                       ScriptedReply::text("answer: probably IgG\nfollow_up: which receptor?\nfollow_up: size limit?"));
  backend->set_default("drift_fold", ScriptedReply::text("answer: FcRn\nfollow_up: timing?\nfollow_up: isotype?"));
  backend->set_default("drift_reduce", ScriptedReply::text("Final answer: IgG (planted)"));

  Gateway gw(backend, no_backoff());
  LoopConfig lc;
  lc.max_parallel_channels = 1;
  CognitiveLoop loop(gw, lc);
  RunContext run("mt");
  MoreThinkingConfig cfg;
  cfg.M = 3;
  cfg.f = 2;
  cfg.u = 2;
  const auto result = more_thinking("Which antibody crosses the placenta?", test::params(1, 0), cfg, loop, run);

  std::map<std::string, int> calls;
  for (const auto& e : run.events())
    if (e.kind == EventKind::model_call) ++calls[e.payload.value("purpose", std::string{})];
  std::set<std::vector<std::string>> communities;
  for (int level = 0; level < result.graph.levels; ++level)
    for (const auto& members : result.graph.communities(level)) communities.insert(members);

  c.expect(calls["drift_primer"] == 1, "primer calls " + std::to_string(calls["drift_primer"]));
  c.expect(calls["drift_fold"] == cfg.f * cfg.u, "fold calls " + std::to_string(calls["drift_fold"]));
  c.expect(calls["drift_reduce"] == 1, "reduce calls " + std::to_string(calls["drift_reduce"]));
  c.expect(calls["summarize"] == static_cast<int>(communities.size()),
           "summarize calls " + std::to_string(calls["summarize"]) + " for " + std::to_string(communities.size()) +
               " communities");
  c.expect(communities.size() == 2, "expected the two planted communities");
  c.expect(result.chains_succeeded == 3, "chains succeeded");
  c.expect(result.answer == "Final answer: IgG (planted)", "answer: " + result.answer);
  c.summary = "primer " + std::to_string(calls["drift_primer"]) + ", folds " + std::to_string(calls["drift_fold"]) +
              ", reduce " + std::to_string(calls["drift_reduce"]) + ", summarize " +
              std::to_string(calls["summarize"]);
}

// --- 6. telemetry oracles ------------------------------------------------------------------------

UncertaintyTrace trace_of(const std::vector<double>& levels) {
  UncertaintyTrace t;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    UncertaintyEvent e;
    e.id = "u" + std::to_string(i);
    e.timestamp = static_cast<std::int64_t>(i);
    e.level = levels[i];
    t.events.push_back(e);
  }
  return t;
}

std::pair<long double, long double> ols(const std::vector<double>& y) {
  const long double n = static_cast<long double>(y.size());
  long double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sx += i;
    sy += y[i];
    sxx += static_cast<long double>(i) * i;
    sxy += i * static_cast<long double>(y[i]);
  }
  const long double Sxx = sxx - sx * sx / n, Sxy = sxy - sx * sy / n;
  const long double b1 = Sxy / Sxx, b0 = (sy - b1 * sx) / n;
  long double sse = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const long double r = y[i] - (b0 + b1 * i);
    sse += r * r;
  }
  return {b1, b1 / std::sqrt(sse / (n - 2) / Sxx)};
}

bool close_rel(double got, long double want, double tol) {
  const long double scale = std::max<long double>(1.0L, std::fabs(want));
  return std::fabs(static_cast<long double>(got) - want) <= tol * scale;
}

void telemetry_oracles(Check& c) {
  std::mt19937_64 rng(606);
  std::uniform_real_distribution<double> level(0.0, 1.0);
  const int traces = 60;
  for (int i = 0; i < traces; ++i) {
    std::vector<double> y(3 + rng() % 20);
    for (auto& v : y) v = level(rng);
    const auto s = slope_stats(trace_of(y));
    const auto [b1, t] = ols(y);
    c.expect(close_rel(s.slope, b1, 1e-9), "slope on trace " + std::to_string(i));
    c.expect(close_rel(s.t_stat, t, 1e-9), "t-stat on trace " + std::to_string(i));
  }

  c.expect(oscillation_count(trace_of({0.1, 0.9, 0.1, 0.9}), 0.05) == 2, "oscillation alternating");
  c.expect(oscillation_count(trace_of({0.1, 0.4, 0.38, 0.68}), 0.05) == 0, "oscillation small wiggle");
  c.expect(oscillation_count(trace_of({0.2, 0.2, 0.2}), 0.05) == 0, "oscillation flat");
  c.expect(oscillation_count(trace_of({0.5, 0.8, 0.6, 0.9, 0.7, 0.95}), 0.05) == 4, "oscillation volatile");

  auto linked = [](std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& links) {
    auto t = trace_of(std::vector<double>(n, 0.5));
    for (auto [from, to] : links) t.events[from].addressed_prior_ids.push_back("u" + std::to_string(to));
    return t;
  };
  c.expect(addressing_ratio(linked(4, {{1, 0}, {2, 1}, {3, 2}})) == 0.75, "addressing 3 of 4");
  c.expect(addressing_ratio(linked(3, {{1, 0}, {2, 0}})) == 1.0 / 3.0, "addressing duplicate link");
  c.expect(addressing_ratio(linked(2, {})) == 0.0, "addressing none");
  c.expect(addressing_ratio(UncertaintyTrace{}) == 1.0, "addressing empty");

  // Welch and Cohen by hand: variances 0.005 each, difference -0.7, df 2.
  std::vector<TraceFeatures> correct(2), incorrect(2);
  correct[0].initial_uncertainty = 0.8, correct[1].initial_uncertainty = 0.9;
  incorrect[0].initial_uncertainty = 0.1, incorrect[1].initial_uncertainty = 0.2;
  const auto g = compare_groups(correct, incorrect, "initial_uncertainty");
  const double t = -0.7 / std::sqrt(0.005);
  c.expect(std::abs(g.t_stat - t) < 1e-9, "welch t");
  c.expect(std::abs(g.effect_size - t) < 1e-9, "cohen d");
  c.expect(std::abs(g.degrees_of_freedom - 2.0) < 1e-9, "welch df");
  c.expect(std::abs(g.p_value - (1.0 - std::abs(t) / std::sqrt(t * t + 2.0))) < 1e-9, "welch p");

  struct Panel {
    std::vector<double> levels;
    bool incorrect;
  };
  const std::vector<Panel> panels{{{0.4, 0.3, 0.25, 0.15, 0.1}, false},
                                  {{0.5, 0.9, 0.8, 0.6, 0.4}, false},
                                  {{0.1, 0.15, 0.2, 0.3, 0.35}, true},
                                  {{0.5, 0.8, 0.6, 0.9, 0.7, 0.95}, true}};
  std::set<Regime> regimes;
  int escalated = 0;
  for (const auto& p : panels) {
    const auto cls = classify_trace(compute_features(trace_of(p.levels)));
    regimes.insert(cls.regime);
    c.expect(cls.escalate == p.incorrect, "panel escalation " + to_string(cls.regime));
    escalated += cls.escalate;
  }
  c.expect(regimes.size() == 4, "regimes not distinct");
  c.summary = std::to_string(traces) + " OLS traces, hand oracles, 4 regimes with " + std::to_string(escalated) +
              " escalations";
}

// --- 7. reported arithmetic ---------------------------------------------------------------------

void arithmetic(Check& c) {
  const auto a = accuracy_percent(34, 152);
  const auto b = accuracy_percent(13, 152);
  const auto imp = improvement_report(22.37, 8.55);
  c.expect(a == "22.37%", "34/152 = " + a);
  c.expect(b == "8.55%", "13/152 = " + b);
  c.expect(imp.net_text == "13.82" && imp.relative_text == "161.64%",
           "improvement = (" + imp.net_text + ", " + imp.relative_text + ")");
  c.summary = "34/152 = " + a + ", 13/152 = " + b + ", improvement (" + imp.net_text + ", " + imp.relative_text + ")";
}

// --- 8. steering -------------------------------------------------------------------------------

/// Blocks the first request matching `match` until released.
class Gate {
 public:
  explicit Gate(std::function<bool(const ModelRequest&)> match) : match_(std::move(match)) {}

  void maybe_hold(const ModelRequest& r) {
    std::unique_lock lock(mutex_);
    if (used_ || !match_(r)) return;
    used_ = true;
    entered_ = true;
    cv_.notify_all();
    cv_.wait_for(lock, 20s, [&] { return open_; });
  }
  bool wait_entered() {
    std::unique_lock lock(mutex_);
    return cv_.wait_for(lock, 20s, [&] { return entered_; });
  }
  void release() {
    std::lock_guard lock(mutex_);
    open_ = true;
    cv_.notify_all();
  }

 private:
  std::function<bool(const ModelRequest&)> match_;
  std::mutex mutex_;
  std::condition_variable cv_;
  bool used_ = false, entered_ = false, open_ = false;
};

ModelResponse loop_reply(const ModelRequest& r) {
  if (r.purpose == "coverage") return test::text("- [x] a\n- [ ] b\n- [ ] c");
  if (r.purpose == "confidence")
    return test::text(r.channel_id.ends_with(".syn") || r.channel_id.ends_with(".f1") ? "confidence: 0.9"
                                                                                      : "confidence: 0.3");
  if (r.purpose == "synthesize") return test::text("Final answer: B");
  return test::text("thinking about it");
}

std::string all_text(const ModelRequest& r) {
  std::string out;
  for (const auto& m : r.messages) out += m.content + "\n";
  return out;
}

bool gapless(const std::vector<RunEvent>& events) {
  for (std::size_t i = 0; i < events.size(); ++i)
    if (events[i].seq != i) return false;
  return true;
}

const json kSmall = {{"params", {{"branching_factor_b", 2}, {"max_depth_D", 1}}},
                     {"loop", {{"max_parallel_channels", 1}}}};

RunStatus settle(RunManager& mgr, const std::string& id) {
  auto status = mgr.wait_until_idle(id).status;
  for (int i = 0; i < 10 && status == RunStatus::awaiting_user; ++i) {
    mgr.steer({id, std::nullopt, SteerAction::resume, std::nullopt});
    status = mgr.wait_until_idle(id).status;
  }
  return status;
}

void steering(Check& c) {
  test::TempDir dir;
  RunManager::Options mo;
  mo.data_dir = dir.path();
  mo.gateway.backoff_base = 0ms;
  std::vector<std::string> ids;

  // (a) scoped terminate while a call in the subtree is in flight.
  {
    auto gate = std::make_shared<Gate>([](const ModelRequest& r) { return r.channel_id == "c0.1" && r.purpose == "sample"; });
    auto backend = std::make_shared<test::FunctionBackend>([gate](const ModelRequest& r) {
      gate->maybe_hold(r);
      return loop_reply(r);
    });
    RunManager mgr(backend, mo);
    const auto id = mgr.create_run("Which immunoglobulin crosses the placenta?", RunMode::single, kSmall).run_id;
    ids.push_back(id);
    c.expect(gate->wait_entered(), "(a) subtree call never started");
    const auto term_seq = mgr.steer({id, std::string("c0.1"), SteerAction::terminate, std::nullopt})["seq"].get<std::uint64_t>();
    gate->release();
    const auto status = settle(mgr, id);
    c.expect(status == RunStatus::completed, "(a) run did not complete: " + to_string(status));
    int after_in_scope = 0, sibling_calls = 0;
    for (const auto& e : mgr.events(id)) {
      if (e.seq <= term_seq || e.kind != EventKind::model_call) continue;
      if (in_scope(e.channel_id, "c0.1")) ++after_in_scope;
      if (in_scope(e.channel_id, "c0.2")) ++sibling_calls;
    }
    c.expect(after_in_scope == 0, "(a) model calls logged in the terminated subtree");
    c.expect(sibling_calls > 0, "(a) sibling subtree did not run");
    int later_requests = 0;
    bool seen_hold = false;
    for (const auto& r : backend->requests()) {
      if (seen_hold && in_scope(r.channel_id, "c0.1")) ++later_requests;
      if (r.channel_id == "c0.1" && r.purpose == "sample") seen_hold = true;
    }
    c.expect(later_requests == 0, "(a) provider called for the terminated subtree");
  }

  // (b) interjection reaches the next model context.
  {
    const std::string message = "consider maternal IgA transport";
    auto gate = std::make_shared<Gate>([](const ModelRequest& r) { return r.channel_id == "c0" && r.purpose == "confidence"; });
    auto backend = std::make_shared<test::FunctionBackend>([gate](const ModelRequest& r) {
      gate->maybe_hold(r);
      return loop_reply(r);
    });
    RunManager mgr(backend, mo);
    const auto id = mgr.create_run("Which immunoglobulin crosses the placenta?", RunMode::single, kSmall).run_id;
    ids.push_back(id);
    c.expect(gate->wait_entered(), "(b) call never started");
    const std::size_t held = backend->requests().size();
    mgr.steer({id, std::nullopt, SteerAction::interject, message});
    gate->release();
    c.expect(settle(mgr, id) == RunStatus::completed, "(b) run did not complete");
    const auto requests = backend->requests();
    c.expect(requests.size() > held, "(b) no request after the interjection");
    for (std::size_t i = held; i < requests.size(); ++i)
      c.expect(all_text(requests[i]).find(message) != std::string::npos,
               "(b) request " + std::to_string(i) + " lacks the interjection");
    c.expect(all_text(requests[held - 1]).find(message) == std::string::npos, "(b) held request already had it");
  }

  // (c) terminate the run, then resume with guidance.
  {
    const std::string message = "reconsider with FcRn in mind";
    auto gate = std::make_shared<Gate>([](const ModelRequest& r) { return r.channel_id == "c0.1" && r.purpose == "sample"; });
    auto backend = std::make_shared<test::FunctionBackend>([gate](const ModelRequest& r) {
      gate->maybe_hold(r);
      return loop_reply(r);
    });
    RunManager mgr(backend, mo);
    const auto id = mgr.create_run("Which immunoglobulin crosses the placenta?", RunMode::single, kSmall).run_id;
    ids.push_back(id);
    c.expect(gate->wait_entered(), "(c) call never started");
    mgr.steer({id, std::nullopt, SteerAction::terminate, std::nullopt});
    gate->release();
    c.expect(mgr.wait_until_idle(id).status == RunStatus::terminated, "(c) run not terminated");
    const auto before = mgr.events(id).size();
    const std::size_t requests_before = backend->requests().size();
    mgr.steer({id, std::nullopt, SteerAction::resume, message});
    c.expect(settle(mgr, id) == RunStatus::completed, "(c) resumed run did not complete");
    const auto events = mgr.events(id);
    c.expect(gapless(events), "(c) seq has gaps");
    c.expect(events.size() > before + 1 && events[before].kind == EventKind::resume, "(c) resume event missing");
    const auto requests = backend->requests();
    c.expect(requests.size() > requests_before &&
                 all_text(requests[requests_before]).find(message) != std::string::npos,
             "(c) resume guidance missing from the next context");
  }

  // Every fixture run rebuilds to its stored record, in memory and after a restart.
  {
    auto backend = std::make_shared<ScriptedBackend>();
    backend->load_directory(kFixtures);
    RunManager mgr(backend, mo);
    BenchOptions opts;
    std::ifstream in(kFixtures / "config.json");
    opts.config = json::parse(in);
    const auto qs = load_questions(kFixtures / "questions.jsonl");
    for (const auto& rec : run_benchmark(qs, opts, mgr))
      for (const auto& run : rec.runs) ids.push_back(run.run_id);
  }
  std::map<std::string, RunRecord> stored;
  {
    RunManager mgr(std::make_shared<ScriptedBackend>(), mo);
    for (const auto& id : ids) {
      const auto events = mgr.events(id);
      c.expect(gapless(events), id + ": persisted log has gaps");
      stored[id] = mgr.get_run(id);
      c.expect(fold_record(events) == stored[id], id + ": fold differs from stored record");
    }
  }
  {
    RunManager mgr(std::make_shared<ScriptedBackend>(), mo);
    for (const auto& id : ids) c.expect(mgr.get_run(id) == stored[id], id + ": record changed across restart");
  }
  c.summary = "scoped terminate, interject, resume; " + std::to_string(ids.size()) + " runs rebuilt from their logs";
}

// --- 9. replay determinism ---------------------------------------------------------------------

std::string bench_report(const std::filesystem::path& dir) {
  auto backend = std::make_shared<ScriptedBackend>();
  backend->load_directory(kFixtures);
  RunManager::Options mo;
  mo.data_dir = dir;
  RunManager manager(backend, mo);
  BenchOptions opts;
  std::ifstream in(kFixtures / "config.json");
  opts.config = json::parse(in);
  opts.k = 2;
  const auto qs = load_questions(kFixtures / "questions.jsonl");
  const auto records = run_benchmark(qs, opts, manager);
  const auto acc = accuracy_report(records);
  return bench_report_json(records, acc, opts).dump(2) + "\n" + accuracy_csv(acc) +
         bench_features_csv(records, parse_run_config(opts.config).escalation);
}

void replay_determinism(Check& c) {
  test::TempDir a, b;
  const auto first = bench_report(a.path());
  const auto second = bench_report(b.path());
  c.expect(first == second, "reports differ");
  const auto doc = json::parse(first.substr(0, first.find("\ncategory,")));
  c.expect(doc["question_count"] == 12, "question count");
  c.summary = "12 questions x 2 runs, " + std::to_string(first.size()) + " identical bytes, accuracy " +
              doc["total"]["fraction"].get<std::string>();
}

struct Criterion {
  int number;
  std::string name;
  std::chrono::seconds limit;  // zero: no limit
  std::function<void(Check&)> run;
};

}  // namespace
}  // namespace clio

int main() {
  using namespace clio;
  const std::vector<Criterion> criteria{
      {1, "loop conformance", 10s, loop_conformance},
      {2, "depth and termination safety", 60s, depth_safety},
      {3, "clustering optimum", 30s, clustering_oracle},
      {4, "graph merge invariance", 0s, merge_invariance},
      {5, "DRIFT call accounting", 5s, drift_accounting},
      {6, "telemetry oracles", 0s, telemetry_oracles},
      {7, "reported arithmetic", 0s, arithmetic},
      {8, "steering semantics", 0s, steering},
      {9, "replay determinism", 60s, replay_determinism},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    Check check;
    const auto start = std::chrono::steady_clock::now();
    try {
      cr.run(check);
    } catch (const std::exception& e) {
      check.failures.push_back(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (cr.limit.count() > 0 && secs >= static_cast<double>(cr.limit.count()))
      check.failures.push_back("took " + std::to_string(secs) + " s");
    const bool ok = check.failures.empty();
    failed += !ok;
    std::printf("%s %d %s: %s (%.2f s)\n", ok ? "PASS" : "FAIL", cr.number, cr.name.c_str(),
                check.summary.empty() ? "-" : check.summary.c_str(), secs);
    for (const auto& f : check.failures) std::printf("     %s\n", f.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
